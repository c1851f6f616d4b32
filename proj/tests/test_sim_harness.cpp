#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "oracles.hpp"
#include "search_fixtures.hpp"
#include "vecqmdp/sim_harness.hpp"

using namespace vecqmdp;
using fixture::iteration_config;

namespace {

const std::string kFixtures = VECQMDP_FIXTURE_DIR;

bool boxes_collide(const AgentState& a, const AgentState& b) {
  return oracle::polygons_intersect(oracle::rectangle(a.x, a.y, a.heading, a.half_length, a.half_width),
                                    oracle::rectangle(b.x, b.y, b.heading, b.half_length, b.half_width));
}

EpisodeConfig quick_episode(double duration) {
  EpisodeConfig c;
  c.search = iteration_config(16, 8, 1, 30);
  c.traj.workers = 1;
  c.duration = duration;
  return c;
}

bool same_scene(const SceneSpec& a, const SceneSpec& b) {
  return scene_to_json(a) == scene_to_json(b);
}

}  // namespace

TEST_CASE("scene generation") {
  SUBCASE("density 0") {
    const SceneSpec s = generate_scene(0, Layout::highway, 3);
    CHECK(s.agents.empty());
    CHECK_NOTHROW(s.validate());
  }
  SUBCASE("determinism") {
    CHECK(same_scene(generate_scene(40, Layout::crossing, 11), generate_scene(40, Layout::crossing, 11)));
    CHECK_FALSE(same_scene(generate_scene(40, Layout::crossing, 11), generate_scene(40, Layout::crossing, 12)));
  }
  SUBCASE("initial boxes are collision-free") {
    for (Layout layout : {Layout::highway, Layout::crossing}) {
      for (std::uint64_t seed = 0; seed < 5; ++seed) {
        const SceneSpec s = generate_scene(50, layout, seed);
        REQUIRE(s.agents.size() == 50);
        const AgentState ego{s.ego.x, s.ego.y, s.ego.heading, s.ego.speed, 2.4, 1.0};
        for (std::size_t i = 0; i < s.agents.size(); ++i) {
          REQUIRE_FALSE(boxes_collide(ego, s.agents[i].state));
          REQUIRE(s.agents[i].intentions.size() >= 1);
          REQUIRE(s.agents[i].intentions.size() <= 3);
          for (std::size_t j = i + 1; j < s.agents.size(); ++j) {
            REQUIRE_FALSE(boxes_collide(s.agents[i].state, s.agents[j].state));
          }
        }
      }
    }
  }
  SUBCASE("placement failure") {
    CHECK_THROWS_WITH_AS(generate_scene(300, Layout::highway, 1), "scene too dense", std::runtime_error);
    CHECK_THROWS_AS(generate_scene(-1, Layout::highway, 1), std::invalid_argument);
  }
}

TEST_CASE("scene files") {
  SUBCASE("golden document") {
    const SceneSpec s = load_scene(kFixtures + "/scene_small.json");
    CHECK(s.layout == Layout::crossing);
    CHECK(s.seed == 7);
    CHECK(s.has_crossing);
    CHECK(s.ego.speed == 10.0);
    REQUIRE(s.agents.size() == 2);
    CHECK(s.agents[0].intentions[1].kind == IntentionKind::cut_in);
    CHECK(s.agents[0].intentions[1].maneuver_duration == 2.5);
    CHECK(s.agents[1].state.half_length == 2.4);
    CHECK(s.agents[1].intentions[0].kind == IntentionKind::cross);
    CHECK(s.agents[1].intentions[1].maneuver_start == 0.5);
  }
  SUBCASE("round trip") {
    const SceneSpec s = generate_scene(25, Layout::crossing, 4);
    const std::string path = (std::filesystem::temp_directory_path() / "vecqmdp_scene_rt.json").string();
    save_scene(s, path);
    const SceneSpec back = load_scene(path);
    std::remove(path.c_str());
    CHECK(same_scene(s, back));
    CHECK(back.agents.size() == 25);
    for (std::size_t j = 0; j < 25; ++j) {
      CHECK(back.agents[j].state == s.agents[j].state);
      CHECK(back.agents[j].intentions.size() == s.agents[j].intentions.size());
    }
  }
  SUBCASE("bad documents") {
    nlohmann::json doc = scene_to_json(generate_scene(3, Layout::highway, 1));
    nlohmann::json v2 = doc;
    v2["format_version"] = 2;
    CHECK_THROWS_AS(scene_from_json(v2), std::invalid_argument);
    nlohmann::json no_road = doc;
    no_road.erase("road");
    CHECK_THROWS_AS(scene_from_json(no_road), std::invalid_argument);
    nlohmann::json bad_prob = doc;
    bad_prob["agents"][0]["intentions"][0]["probability"] = 5.0;
    CHECK_THROWS_AS(scene_from_json(bad_prob), std::invalid_argument);
    nlohmann::json bad_kind = doc;
    bad_kind["agents"][0]["intentions"][0]["kind"] = "teleport";
    CHECK_THROWS_AS(scene_from_json(bad_kind), std::invalid_argument);
    CHECK_THROWS_AS(load_scene(kFixtures + "/missing.json"), std::runtime_error);
    const std::string path = (std::filesystem::temp_directory_path() / "vecqmdp_scene_bad.json").string();
    {
      std::ofstream out(path);
      out << "{ \"format_version\": 1, ";
    }
    CHECK_THROWS_AS(load_scene(path), std::invalid_argument);
    std::remove(path.c_str());
  }
}

TEST_CASE("ego-only episode reaches free-flow progress") {
  const SceneSpec s = generate_scene(0, Layout::highway, 1);
  const EpisodeConfig cfg = quick_episode(15.0);
  const EpisodeResult r = run_episode(s, cfg);
  CHECK(r.completed);
  CHECK_FALSE(r.collided);
  CHECK(r.collisions.empty());
  CHECK(r.states.size() == 151);
  CHECK(r.plan_ms.size() == 30);
  const double free = free_flow_progress(s, cfg.params, 15.0);
  const double v0 = cfg.params.idm.desired_speed;
  CHECK(r.progress >= 0.9 * free);
  CHECK(std::fabs(r.progress - v0 * 15.0) <= 0.1 * v0 * 15.0);
  // Free-flow bound: speed never exceeds the desired speed.
  CHECK(free <= v0 * 15.0 + 1e-9);
}

TEST_CASE("pre-placed overlap collides immediately") {
  SceneSpec s = generate_scene(0, Layout::highway, 1);
  AgentBelief a;
  a.agent_id = 0;
  a.state = AgentState{1.0, 0.2, 0.0, 0.0, 2.4, 1.0};
  Intention stay;
  stay.target_speed = 0.0;
  a.intentions = {stay};
  s.agents = {a};
  const EpisodeResult r = run_episode(s, quick_episode(5.0));
  CHECK(r.collided);
  CHECK_FALSE(r.completed);
  REQUIRE(r.collisions.size() == 1);
  CHECK(r.collisions[0] == CollisionEvent{0, 0});
  CHECK(r.states.size() == 1);
}

TEST_CASE("episodes are deterministic and collisions recheck") {
  const SceneSpec s = generate_scene(30, Layout::crossing, 5);
  EpisodeConfig cfg = quick_episode(6.0);
  const EpisodeResult a = run_episode(s, cfg);
  cfg.search.workers = 2;
  cfg.traj.workers = 2;
  const EpisodeResult b = run_episode(s, cfg);
  CHECK(a.states == b.states);
  CHECK(a.collisions == b.collisions);
  CHECK(a.progress == b.progress);
  CHECK(a.true_intentions == b.true_intentions);
  CHECK(recheck_collisions(s, cfg, a) == a.collisions);

  std::ostringstream csv;
  write_episode_csv(csv, a);
  const std::string text = csv.str();
  CHECK(static_cast<std::size_t>(std::count(text.begin(), text.end(), '\n')) == a.states.size() + 1);

  cfg.duration = 0.0;
  CHECK_THROWS_AS(run_episode(s, cfg), std::invalid_argument);
}

TEST_CASE("recheck finds an injected collision") {
  SceneSpec s = generate_scene(0, Layout::highway, 1);
  AgentBelief a;
  a.state = AgentState{80.0, 0.0, std::numbers::pi, 0.0, 2.4, 1.0};
  Intention stay;
  stay.target_speed = 0.0;
  a.intentions = {stay};
  s.agents = {a};
  const EpisodeConfig cfg = quick_episode(2.0);
  EpisodeResult fake;
  for (int k = 0; k <= 20; ++k) fake.states.push_back(EgoState{4.0 * k, 0.0, 0.0, 10.0});
  const auto hits = recheck_collisions(s, cfg, fake);
  REQUIRE_FALSE(hits.empty());
  // Boxes touch once the centers are within 4.8 m: x = 76 at k = 19.
  CHECK(hits.front() == CollisionEvent{19, 0});
}

TEST_CASE("serial reference planner") {
  for (std::uint64_t seed = 0; seed < 6; ++seed) {
    const PlanningProblem p = make_problem(generate_scene(10 + 10 * static_cast<int>(seed), Layout::crossing, seed));
    const PlanningWorld w = PlanningWorld::sample(p, 8, seed);
    const SearchConfig cfg = iteration_config(8, 1, 1, 40, 0.5, seed);
    const PlanResult vec = Planner(cfg).plan(w);
    const PlanResult ser = serial_reference_plan(w, cfg);
    REQUIRE(ser.pi_star == vec.pi_star);
    REQUIRE(ser.root.q == vec.root.q);
    REQUIRE(ser.telemetry.log == vec.telemetry.log);
    REQUIRE(ser.telemetry.total_edges == vec.telemetry.total_edges);
    REQUIRE(telemetry_csv_row(ser.telemetry).size() > 0);
  }
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    PlanningProblem p = fixture::random_problem(seed, 5, 60.0);
    p.actions = {standard_actions()[1], standard_actions()[4], standard_actions()[7]};
    p.params.depth = 3;
    const PlanningWorld w = PlanningWorld::sample(p, 1, seed);
    const PlanResult r = serial_reference_plan(w, iteration_config(1, 1, 1, 0));
    const fixture::Enumeration e = fixture::enumerate_sequences(w, 0);
    REQUIRE(r.root.q == e.root_q);
    for (int i = 0; i < e.best_length; ++i) {
      REQUIRE(r.pi_star[static_cast<std::size_t>(i)] == e.best[static_cast<std::size_t>(i)]);
    }
  }
}

TEST_CASE("benchmark records") {
  BenchmarkConfig cfg;
  cfg.search = iteration_config(16, 8, 2, 0);
  cfg.iterations = 25;
  const auto recs = run_benchmark({0, 15}, {Variant::serial, Variant::full, Variant::lambda0}, 2, 3, cfg);
  REQUIRE(recs.size() == 12);
  for (const ThroughputRecord& r : recs) {
    CHECK(r.recounted_edges == r.total_edges);
    CHECK(r.edges_per_ms == doctest::Approx(static_cast<double>(r.total_edges) / r.wall_ms));
    CHECK(r.imbalance >= 0.0);
    CHECK(r.imbalance <= 1.0);
    if (r.variant == Variant::serial) {
      CHECK(r.speedup_vs_serial == 1.0);
      CHECK(r.workers == 1);
      CHECK(r.batch_width == 1);
    }
    if (r.variant == Variant::lambda0) CHECK(r.lambda == 0.0);
  }
  const auto again = run_benchmark({0, 15}, {Variant::serial, Variant::full, Variant::lambda0}, 2, 3, cfg);
  for (std::size_t i = 0; i < recs.size(); ++i) {
    CHECK(again[i].total_edges == recs[i].total_edges);
    CHECK(again[i].imbalance == recs[i].imbalance);
  }
  const std::string h = throughput_csv_header(), row = throughput_csv_row(recs[0]);
  CHECK(std::count(h.begin(), h.end(), ',') == std::count(row.begin(), row.end(), ','));
  CHECK_THROWS_AS(run_benchmark({}, {Variant::full}, 1, 1, cfg), std::invalid_argument);
  CHECK(variant_from_string(to_string(Variant::single_worker_vectorized)) == Variant::single_worker_vectorized);
  CHECK_THROWS(variant_from_string("turbo"));
}
