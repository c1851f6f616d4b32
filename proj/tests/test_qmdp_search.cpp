#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <map>
#include <numeric>

#include "search_fixtures.hpp"

using namespace vecqmdp;
using fixture::iteration_config;
using fixture::random_problem;

namespace {

std::vector<ExpansionSlot> random_batch(Rng& rng, const PlanningWorld& w, int width) {
  std::vector<ExpansionSlot> b(static_cast<std::size_t>(width));
  for (ExpansionSlot& s : b) {
    s.active = rng.below(4) != 0;
    s.scenario = rng.below(w.scenario_count());
    s.action = static_cast<int>(rng.below(w.actions().size()));
    s.depth = static_cast<int>(rng.below(static_cast<std::uint64_t>(w.params().depth)));
    const double x = rng.uniform(-5.0, 40.0), y = rng.uniform(-4.5, 4.5), h = rng.uniform(-0.3, 0.3),
                 v = rng.uniform(0.0, 15.0);
    s.ego = EgoState{x, y, h, v};
  }
  return b;
}

/// Full subtree frontier scan.
DepthRange brute_range(const ScenarioTree& t, NodeIndex v) {
  DepthRange r = t.empty_range();
  if (t.is_frontier(v)) r = {static_cast<std::int16_t>(t.depth(v)), static_cast<std::int16_t>(t.depth(v))};
  if (t.depth(v) >= t.max_depth()) return r;
  for (int a = 0; a < t.tried(v); ++a) {
    const DepthRange c = brute_range(t, t.child(v, a));
    if (c.empty()) continue;
    r.lo = std::min(r.lo, c.lo);
    r.hi = std::max(r.hi, c.hi);
  }
  return r;
}

bool ranges_sound(const ScenarioTree& t, NodeIndex v) {
  if (!(t.range(v) == brute_range(t, v))) return false;
  if (t.depth(v) >= t.max_depth()) return true;
  for (int a = 0; a < t.tried(v); ++a) {
    if (!ranges_sound(t, t.child(v, a))) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("configuration validation") {
  SearchConfig c;
  CHECK_NOTHROW(c.validate());
  c.scenarios = 60;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = SearchConfig{};
  c.lambda = -1.0;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = SearchConfig{};
  c.workers = 0;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = SearchConfig{};
  c.batch_width = 0;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);

  PlanningProblem p = random_problem(1, 3);
  CHECK_NOTHROW(p.validate());
  p.actions.clear();
  CHECK_THROWS_AS(p.validate(), std::invalid_argument);
  p = random_problem(1, 3);
  p.actions[0].path_id = 3;
  CHECK_THROWS_AS(p.validate(), std::invalid_argument);
}

TEST_CASE("batched kernel equals the scalar reference") {
  for (std::uint64_t seed = 0; seed < 6; ++seed) {
    const PlanningProblem p = random_problem(seed, 10 + static_cast<int>(seed) * 8);
    const PlanningWorld w = PlanningWorld::sample(p, 16, seed);
    const int width = seed % 2 == 0 ? 8 : 5;
    LockstepKernel kernel(w, width);
    Rng rng(seed, 0xbb);
    for (int t = 0; t < 40; ++t) {
      const auto batch = random_batch(rng, w, width);
      const auto out = vectorized_expansion(kernel, batch);
      const auto ret = vectorized_rollout(kernel, batch);
      for (std::size_t l = 0; l < batch.size(); ++l) {
        const ExpansionSlot& s = batch[l];
        if (!s.active) {
          REQUIRE(out[l] == MacroOutcome{s.ego, 0.0, false});
          REQUIRE(ret[l] == 0.0);
          continue;
        }
        REQUIRE(out[l] == reference_macro(w, s.scenario, s.ego, s.depth, s.action));
        REQUIRE(ret[l] == reference_rollout(w, s.scenario, s.ego, s.depth, s.action));
      }
    }
  }
}

TEST_CASE("lockstep symmetry") {
  const PlanningProblem p = random_problem(3, 20);
  const PlanningWorld w = PlanningWorld::sample(p, 8, 3);
  LockstepKernel kernel(w, 8);
  std::vector<ExpansionSlot> batch(8, ExpansionSlot{true, 2, 0, 4, w.ego(), 1});
  const auto out = vectorized_expansion(kernel, batch);
  const auto ret = vectorized_rollout(kernel, batch);
  for (std::size_t l = 1; l < 8; ++l) {
    CHECK(out[l] == out[0]);
    CHECK(ret[l] == ret[0]);
  }
}

TEST_CASE("collision masks the slot and charges the penalty") {
  PlanningProblem p;
  p.ego = {0.0, 0.0, 0.0, 12.0};
  AgentBelief oncoming;
  oncoming.state = AgentState{30.0, 0.0, std::numbers::pi, 12.0, 2.4, 1.0};
  Intention keep;
  keep.target_speed = 12.0;
  oncoming.intentions = {keep};
  p.belief.agents = {oncoming};
  const PlanningWorld w = PlanningWorld::sample(p, 1, 1);
  LockstepKernel kernel(w, 2);
  const std::vector<ExpansionSlot> batch{{true, 0, 0, 1, w.ego(), 0}, {false, 0, 0, 1, w.ego(), 0}};
  const auto out = vectorized_expansion(kernel, batch);
  CHECK(out[0].terminal);
  CHECK(out[0].reward < p.params.reward.collision_penalty + 50.0);
  CHECK(kernel.collided(0));
  CHECK_FALSE(kernel.active(1));
  CHECK(out[1] == MacroOutcome{w.ego(), 0.0, false});
  // Fewer steps than a full macro: the lane stopped at the collision.
  CHECK(kernel.steps() < static_cast<std::uint64_t>(p.params.steps_per_action));
  CHECK(out[0] == reference_macro(w, 0, w.ego(), 0, 1));
}

TEST_CASE("rollout boundaries") {
  PlanningProblem p;
  p.params.reward.comfort_weight = 0.0;
  p.ego = {0.0, 0.0, 0.0, p.params.idm.desired_speed};
  const PlanningWorld w = PlanningWorld::sample(p, 1, 1);
  LockstepKernel kernel(w, 1);

  SUBCASE("already at the horizon") {
    const std::vector<ExpansionSlot> at_h{{true, 0, 0, 1, w.ego(), p.params.depth}};
    const std::uint64_t before = kernel.steps();
    CHECK(vectorized_rollout(kernel, at_h)[0] == 0.0);
    CHECK(kernel.steps() == before);
  }
  SUBCASE("constant reward per step gives the geometric series") {
    const double per_macro = p.params.idm.desired_speed * p.params.dt * p.params.steps_per_action;
    const double g = p.params.reward.gamma;
    for (int d = 0; d < p.params.depth; ++d) {
      const std::vector<ExpansionSlot> slot{{true, 0, 0, 1, w.ego(), d}};
      const int n = p.params.depth - d;
      const double expect = per_macro * (1.0 - std::pow(g, n)) / (1.0 - g);
      CHECK(vectorized_rollout(kernel, slot)[0] == doctest::Approx(expect).epsilon(1e-9));
    }
  }
}

TEST_CASE("LB-UCB score") {
  const double plain = 1.0 + 1.4 * std::sqrt(std::log(10.0) / 4.0);
  CHECK(lb_ucb_score(1.0, 10, 4, 1.4, {2, 5}, 3, 1.0) == doctest::Approx(plain).epsilon(1e-15));
  CHECK(lb_ucb_score(1.0, 10, 4, 1.4, {5, 6}, 3, 1.0) == doctest::Approx(plain - 2.0).epsilon(1e-15));
  CHECK(lb_ucb_score(1.0, 10, 4, 1.4, {0, 1}, 3, 0.5) == doctest::Approx(plain - 1.0).epsilon(1e-15));
  Rng rng(1, 1);
  for (int i = 0; i < 1000; ++i) {
    const auto lo = static_cast<std::int16_t>(rng.below(5));
    const DepthRange r{lo, static_cast<std::int16_t>(lo + rng.below(3))};
    const double q = rng.uniform(-10.0, 10.0);
    const auto n = static_cast<std::uint32_t>(1 + rng.below(50));
    REQUIRE(lb_ucb_score(q, n + 10, n, 1.4, r, static_cast<int>(rng.below(6)), 0.0) ==
            q + 1.4 * std::sqrt(std::log(static_cast<double>(n + 10)) / n));
  }
  CHECK(std::isinf(lb_ucb_score(0.0, 3, 0, 1.4, {1, 1}, 1, 0.5)));
  CHECK(lb_ucb_score(0.0, 3, 1, 1.4, DepthRange{}, 1, 0.5) == -kInf);
}

TEST_CASE("majority depth") {
  const std::vector<int> a{2, 2, 3, 1};
  CHECK(majority_depth(a) == 2);
  const std::vector<int> tie{3, 1, 3, 1};
  CHECK(majority_depth(tie) == 1);
  CHECK_THROWS_AS(majority_depth(std::vector<int>{}), std::invalid_argument);
}

TEST_CASE("penalty steers selection toward the reference depth") {
  ScenarioTree t(3, 2);
  t.init_root(EgoState{});
  const NodeIndex c0 = t.child(0, 0), c1 = t.child(0, 1);
  t.expand_child(0, c0, EgoState{}, 0.0, false, 0.0);
  backup(t, c0, 0.0, 1.0);
  t.expand_child(0, c1, EgoState{}, 0.0, false, 0.0);
  backup(t, c1, 0.0, 1.0);
  for (int a = 0; a < 2; ++a) {
    t.expand_child(c0, t.child(c0, a), EgoState{}, 0.0, false, 0.0);
    backup(t, t.child(c0, a), 0.0, 1.0);
  }
  // Equal statistics at the root action level is required for a pure
  // penalty comparison.
  t.record_visit(0, 1, 0.0);
  t.record_visit(0, 1, 0.0);
  REQUIRE(t.q(0, 0) == t.q(0, 1));
  REQUIRE(t.visits(0, 0) == t.visits(0, 1));
  REQUIRE(t.range(c0) == DepthRange{2, 2});
  REQUIRE(t.range(c1) == DepthRange{1, 1});
  CHECK(t.depth(descend(t, 1.4, 2, 10.0)) == 2);
  CHECK(descend(t, 1.4, 1, 10.0) == c1);
  CHECK(t.depth(descend(t, 1.4, 0, 0.0)) == 2);  // tie goes to action 0
}

TEST_CASE("lambda = 0 keeps the plain UCB picks") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const PlanningProblem p = random_problem(seed, 12);
    const SearchConfig cfg = iteration_config(16, 8, 1, 60, 0.0, seed);
    const PlanningWorld w = PlanningWorld::sample(p, 16, seed);
    const PlanResult r = Planner(cfg).plan(w);
    for (const DepthSample& s : r.telemetry.depth_log) REQUIRE(s.selected == s.tentative);
    REQUIRE(r.telemetry.log == fixture::plain_ucb_search(w, cfg));
  }
}

TEST_CASE("backup statistics") {
  SUBCASE("first and second backups") {
    ScenarioTree t(2, 2);
    t.init_root(EgoState{});
    const NodeIndex c = t.child(0, 0);
    t.expand_child(0, c, EgoState{}, 0.0, false, 1.0);
    backup(t, c, 1.0, 1.0);
    CHECK(t.q(0, 0) == 1.0);
    CHECK(t.visits(0, 0) == 1);
    const NodeIndex g = t.child(c, 0);
    t.expand_child(c, g, EgoState{}, 0.0, false, 3.0);
    backup(t, g, 3.0, 1.0);
    CHECK(t.q(0, 0) == 2.0);
    CHECK(t.visits(0, 0) == 2);
    CHECK(t.q(c, 0) == 3.0);
    CHECK(t.visits(c, 0) == 1);
  }
  SUBCASE("log replay of running means") {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      Rng rng(seed, 9);
      const double gamma = 0.9;
      ScenarioTree t(3, 3);
      t.init_root(EgoState{});
      std::map<std::pair<NodeIndex, int>, std::vector<double>> credited;
      for (int it = 0; it < 39; ++it) {
        const NodeIndex v = descend(t, 1.0, 0, 0.0);
        if (v == kNoNode) break;
        const NodeIndex c = t.child(v, t.tried(v));
        const double r = rng.uniform(-3.0, 3.0), leaf = rng.uniform(-10.0, 10.0);
        t.expand_child(v, c, EgoState{}, r, false, leaf);
        backup(t, c, leaf, gamma);
        double g = leaf;
        for (NodeIndex u = c; u != 0; u = t.parent(u)) {
          g = t.reward(u) + gamma * g;
          credited[{t.parent(u), t.action_of(u)}].push_back(g);
        }
      }
      for (const auto& [key, gs] : credited) {
        const double mean = std::accumulate(gs.begin(), gs.end(), 0.0) / static_cast<double>(gs.size());
        REQUIRE(t.visits(key.first, key.second) == gs.size());
        REQUIRE(t.q(key.first, key.second) == doctest::Approx(mean).epsilon(1e-12));
      }
    }
  }
}

TEST_CASE("convergence check") {
  std::vector<std::vector<double>> h;
  for (int i = 0; i < 5; ++i) {
    h.push_back({1.0, 2.0});
    CHECK(check_convergence(h, 1e-3, 5) == (i == 4));
  }
  std::vector<std::vector<double>> osc;
  for (int i = 0; i < 30; ++i) osc.push_back(i % 2 ? std::vector<double>{1.0, 1.0 + 1e-5} : std::vector<double>{1.0 + 1e-5, 1.0});
  CHECK_FALSE(check_convergence(osc, 1e-3, 5));

  // q_t = 1 + 0.5^t: successive changes 0.5^t drop below 1e-3 from t = 10,
  // so a window of 5 snapshots first holds at 14 snapshots.
  std::vector<std::vector<double>> geo;
  int first = -1;
  for (int t = 0; t < 40 && first < 0; ++t) {
    geo.push_back({1.0 + std::pow(0.5, t), 0.0});
    if (check_convergence(geo, 1e-3, 5)) first = static_cast<int>(geo.size());
  }
  CHECK(first == 14);
  CHECK_THROWS(check_convergence(std::vector<std::vector<double>>{}, 1e-3, 5));
}

TEST_CASE("imbalance metric") {
  std::vector<std::vector<int>> aligned(10, {2, 2, 2, 2});
  CHECK(imbalance_metric(aligned) == 0.0);
  std::vector<std::vector<int>> some = aligned;
  for (int i : {1, 4, 7}) some[static_cast<std::size_t>(i)] = {2, 2, 2, 3};
  CHECK(imbalance_metric(some) == doctest::Approx(0.3).epsilon(1e-15));
  Rng rng(3, 3);
  for (int rep = 0; rep < 50; ++rep) {
    std::vector<std::vector<int>> log;
    int count = 0;
    for (int i = 0; i < 100; ++i) {
      std::vector<int> d;
      for (int l = 0; l < 8; ++l) d.push_back(rng.uniform() < 0.9 ? 2 : static_cast<int>(rng.below(4)));
      count += *std::max_element(d.begin(), d.end()) != *std::min_element(d.begin(), d.end());
      log.push_back(d);
    }
    REQUIRE(imbalance_metric(log) == static_cast<double>(count) / 100.0);
  }
}

TEST_CASE("root aggregation") {
  const std::vector<std::vector<double>> two{{1.0, 2.0}, {3.0, 2.0}};
  const RootStatistics s = aggregate_root(two);
  CHECK(s.q == std::vector<double>{2.0, 2.0});
  CHECK(s.best_action == 0);
  const std::vector<std::vector<double>> one{{4.0, -1.0, 7.0}};
  CHECK(aggregate_root(one).q == one[0]);
  CHECK(aggregate_root(one).best_action == 2);
  Rng rng(6, 6);
  for (int rep = 0; rep < 100; ++rep) {
    std::vector<std::vector<double>> table(8, std::vector<double>(9));
    for (auto& row : table) for (double& x : row) x = rng.uniform(-1000.0, 100.0);
    const RootStatistics r = aggregate_root(table);
    for (std::size_t a = 0; a < 9; ++a) {
      long double sum = 0;
      for (const auto& row : table) sum += row[a];
      REQUIRE(std::fabs(r.q[a] - static_cast<double>(sum / 8)) < 1e-12 * std::max(1.0, std::fabs(r.q[a])));
    }
  }
  const std::vector<std::vector<double>> ragged{{1.0, 2.0}, {1.0}};
  CHECK_THROWS_AS(aggregate_root(ragged), std::invalid_argument);
  const std::vector<std::vector<double>> missing{{1.0, std::nan("")}};
  CHECK_THROWS_AS(aggregate_root(missing), std::invalid_argument);
  CHECK_THROWS_AS(aggregate_root(std::vector<std::vector<double>>{}), std::invalid_argument);
}

TEST_CASE("planning against exhaustive enumeration") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    PlanningProblem p = random_problem(seed, 6, 60.0);
    Rng rng(seed, 0xe);
    const auto all = standard_actions();
    const std::size_t na = 2 + seed % 2;
    p.actions.clear();
    for (std::size_t i = 0; i < na; ++i) p.actions.push_back(all[rng.below(all.size())]);
    p.params.depth = 2 + static_cast<int>(seed / 2 % 2);
    const PlanningWorld w = PlanningWorld::sample(p, 1, seed);
    const PlanResult r = Planner(iteration_config(1, 1, 1, 0)).plan(w);
    const fixture::Enumeration e = fixture::enumerate_sequences(w, 0);
    CHECK(r.root.q == e.root_q);
    for (int i = 0; i < e.best_length; ++i) REQUIRE(r.pi_star[static_cast<std::size_t>(i)] == e.best[static_cast<std::size_t>(i)]);
  }
}

TEST_CASE("identical actions tie at the lowest index") {
  PlanningProblem p = random_problem(4, 5);
  p.actions = {MacroAction{0, 0.0, 2.0}, MacroAction{0, 0.0, 2.0}, MacroAction{0, 0.0, 2.0}};
  const PlanResult r = plan(p, iteration_config(8, 8, 1, 30));
  CHECK(r.root.q[0] == r.root.q[1]);
  CHECK(r.root.q[1] == r.root.q[2]);
  CHECK(r.pi_star == std::vector<int>(static_cast<std::size_t>(p.params.depth), 0));
}

TEST_CASE("forest search invariants") {
  for (std::uint64_t seed = 0; seed < 4; ++seed) {
    const PlanningProblem p = random_problem(seed, 15);
    const PlanningWorld w = PlanningWorld::sample(p, 32, seed);
    const SearchConfig cfg = iteration_config(32, 8, 1, 80, 0.5, seed);
    Planner planner(cfg);
    const PlanResult r = planner.plan(w);
    const SearchTelemetry& t = r.telemetry;

    std::uint64_t edges = 0;
    std::map<std::uint32_t, std::uint32_t> per_tree;
    for (const ExpansionRecord& e : t.log) {
      edges += static_cast<std::uint64_t>(edge_contribution(e.depth, p.params.depth));
      ++per_tree[e.tree];
      REQUIRE_FALSE(planner.trees()[e.tree].terminal(e.node));
      REQUIRE(planner.trees()[e.tree].depth(e.node) == e.depth);
    }
    CHECK(edges == t.total_edges);
    CHECK(t.log.size() == t.tree_iterations);
    for (std::size_t k = 0; k < 32; ++k) {
      REQUIRE(planner.trees()[k].node_visits(0) == per_tree[static_cast<std::uint32_t>(k)]);
      REQUIRE(ranges_sound(planner.trees()[k], 0));
    }
    std::vector<std::vector<int>> tentative;
    for (const DepthSample& s : t.depth_log) tentative.push_back(s.tentative);
    CHECK(imbalance_metric(tentative) == t.imbalance);
    CHECK(std::is_sorted(t.log.begin(), t.log.end(), [](const ExpansionRecord& a, const ExpansionRecord& b) {
      return a.round != b.round ? a.round < b.round : a.tree < b.tree;
    }));
    CHECK(t.edges_per_ms == doctest::Approx(static_cast<double>(t.total_edges) / t.wall_ms));
  }
}

TEST_CASE("worker count does not change the result") {
  const PlanningProblem p = random_problem(12, 20);
  const PlanResult one = plan(p, iteration_config(64, 8, 1, 50, 0.5, 9));
  const PlanResult eight = plan(p, iteration_config(64, 8, 8, 50, 0.5, 9));
  const PlanResult three = plan(p, iteration_config(64, 8, 3, 50, 0.5, 9));
  CHECK(one.pi_star == eight.pi_star);
  CHECK(one.root.q == eight.root.q);
  CHECK(one.telemetry.log == eight.telemetry.log);
  CHECK(one.root.q == three.root.q);
  CHECK(one.telemetry.log == three.telemetry.log);
}

TEST_CASE("zero budget expands the roots only") {
  const PlanningProblem p = random_problem(2, 10);
  SearchConfig cfg = iteration_config(16, 8, 1, 0);
  cfg.time_budget_ms = 0.0;
  Planner planner(cfg);
  const PlanResult r = planner.plan(p);
  CHECK(r.telemetry.iterations == 2 * 9);
  for (const ScenarioTree& t : planner.trees()) {
    CHECK(t.tried(0) == 9);
    for (int a = 0; a < 9; ++a) CHECK(t.leaf_value(t.child(0, a)) == 0.0);
  }
  CHECK(r.pi_star.size() == static_cast<std::size_t>(p.params.depth));
}

TEST_CASE("reused planner matches a fresh one") {
  const PlanningProblem a = random_problem(5, 12), b = random_problem(6, 18);
  const SearchConfig cfg = iteration_config(16, 8, 2, 40);
  Planner reused(cfg);
  reused.plan(a);
  const PlanResult second = reused.plan(b);
  const PlanResult fresh = Planner(cfg).plan(b);
  CHECK(second.root.q == fresh.root.q);
  CHECK(second.telemetry.log == fresh.telemetry.log);
}

TEST_CASE("telemetry CSV") {
  const PlanResult r = plan(random_problem(1, 4), iteration_config(8, 8, 1, 12));
  const std::string h = telemetry_csv_header(9), row = telemetry_csv_row(r.telemetry);
  CHECK(std::count(h.begin(), h.end(), ',') == std::count(row.begin(), row.end(), ','));
  CHECK(h.rfind("wall_ms,iterations,tree_iterations,total_edges,edges_per_ms,imbalance,mean_depth_spread", 0) == 0);
}
