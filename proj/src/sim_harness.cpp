#include "vecqmdp/sim_harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <memory>
#include <numbers>
#include <ostream>
#include <stdexcept>

#include "vecqmdp/random.hpp"

namespace vecqmdp {

namespace {

double now_ms() {
  using clock = std::chrono::steady_clock;
  return std::chrono::duration<double, std::milli>(clock::now().time_since_epoch()).count();
}

constexpr std::uint64_t kSceneStream = 0x5ce0e;
constexpr std::uint64_t kTruthStream = 0x7e57;
constexpr int kPlacementRetries = 400;
constexpr double kMaxSpan = 600.0;  // m ahead of the ego; the road window agents may occupy

Obb agent_box(const AgentState& a, double pad_length = 0.0, double pad_width = 0.0) {
  return {a.x, a.y, a.heading, a.half_length + pad_length, a.half_width + pad_width};
}

std::vector<double> random_distribution(Rng& rng, std::size_t n) {
  std::vector<double> w(n);
  double sum = 0.0;
  for (double& x : w) {
    x = rng.uniform(0.2, 1.0);
    sum += x;
  }
  double acc = 0.0;
  for (std::size_t i = 0; i + 1 < n; ++i) {
    w[i] /= sum;
    acc += w[i];
  }
  w[n - 1] = 1.0 - acc;
  return w;
}

}  // namespace

std::string to_string(Layout layout) { return layout == Layout::highway ? "highway" : "crossing"; }

Layout layout_from_string(const std::string& name) {
  if (name == "highway") return Layout::highway;
  if (name == "crossing") return Layout::crossing;
  throw std::invalid_argument("unknown layout: " + name);
}

void SceneSpec::validate() const {
  if (format_version != kSceneFormatVersion) {
    throw std::invalid_argument("unsupported scene format version " + std::to_string(format_version));
  }
  if (lane_count < 1 || !(road.lane_width > 0.0) || !(road.length > 0.0)) {
    throw std::invalid_argument("invalid lane layout");
  }
  Belief b{agents};
  b.validate();
}

SceneSpec generate_scene(int density, Layout layout, std::uint64_t seed) {
  if (density < 0) throw std::invalid_argument("density must be non-negative");
  SceneSpec scene;
  scene.layout = layout;
  scene.has_crossing = layout == Layout::crossing;
  scene.seed = seed;
  Rng rng(seed, kSceneStream);

  const double w = scene.road.lane_width;
  const auto offsets = scene.road.lane_offsets();
  const double span = std::min(80.0 + 6.0 * density, kMaxSpan);
  std::vector<Obb> placed{Obb{scene.ego.x, scene.ego.y, scene.ego.heading, 2.4 + 6.0, 1.0 + 0.3}};

  for (int j = 0; j < density; ++j) {
    const bool crossing = scene.has_crossing && rng.uniform() < 1.0 / 3.0;
    AgentBelief ab;
    ab.agent_id = j;
    bool ok = false;
    for (int attempt = 0; attempt < kPlacementRetries && !ok; ++attempt) {
      AgentState a;
      a.half_length = rng.uniform(2.2, 2.6);
      a.half_width = rng.uniform(0.9, 1.05);
      if (crossing) {
        const bool from_south = rng.uniform() < 0.5;
        a.x = scene.crossing_x + (from_south ? 0.5 * w : -0.5 * w);
        const double dist = rng.uniform(15.0, 15.0 + 0.5 * span);
        a.y = from_south ? -dist : dist;
        a.heading = from_south ? 0.5 * std::numbers::pi : -0.5 * std::numbers::pi;
        a.speed = rng.uniform(4.0, 10.0);
      } else {
        const std::size_t lane = rng.below(3);
        a.x = rng.uniform(-0.25 * span, span);
        a.y = offsets[lane];
        a.heading = 0.0;
        a.speed = rng.uniform(6.0, 13.0);
      }
      const Obb box = agent_box(a, 1.0, 0.3);
      ok = std::none_of(placed.begin(), placed.end(), [&](const Obb& o) { return obb_overlap(box, o); });
      if (ok) {
        placed.push_back(box);
        ab.state = a;
      }
    }
    if (!ok) throw std::runtime_error("scene too dense");

    const AgentState& a = ab.state;
    Intention keep;
    keep.kind = crossing ? IntentionKind::cross : IntentionKind::keep_lane;
    keep.target_speed = a.speed;
    ab.intentions.push_back(keep);
    const std::size_t extra = rng.below(3);
    if (extra >= 1) {
      Intention y;
      y.kind = IntentionKind::yield;
      y.target_speed = crossing ? 0.0 : 0.5 * a.speed;
      y.maneuver_start = rng.uniform(0.0, 2.0);
      ab.intentions.push_back(y);
    }
    if (extra >= 2) {
      Intention c;
      if (crossing) {
        c.kind = IntentionKind::cross;
        c.target_speed = a.speed + 3.0;
      } else {
        c.kind = IntentionKind::cut_in;
        c.target_speed = a.speed;
        double target = a.y == offsets[0] ? (rng.uniform() < 0.5 ? offsets[1] : offsets[2]) : offsets[0];
        c.lateral_shift = target - a.y;
        c.maneuver_start = rng.uniform(0.0, 3.0);
        c.maneuver_duration = 3.0;
      }
      ab.intentions.push_back(c);
    }
    const auto probs = random_distribution(rng, ab.intentions.size());
    for (std::size_t i = 0; i < probs.size(); ++i) ab.intentions[i].probability = probs[i];
    scene.agents.push_back(std::move(ab));
  }
  scene.validate();
  return scene;
}

// ---------------------------------------------------------------------------

nlohmann::json scene_to_json(const SceneSpec& scene) {
  using nlohmann::json;
  json doc;
  doc["format_version"] = scene.format_version;
  doc["layout"] = to_string(scene.layout);
  doc["seed"] = scene.seed;
  doc["road"] = {{"origin", {scene.road.origin.x, scene.road.origin.y}},
                 {"heading", scene.road.heading},
                 {"length", scene.road.length},
                 {"lane_width", scene.road.lane_width},
                 {"ego_lane_d", scene.road.ego_lane_d},
                 {"lane_count", scene.lane_count},
                 {"has_crossing", scene.has_crossing},
                 {"crossing_x", scene.crossing_x}};
  doc["ego"] = {{"x", scene.ego.x}, {"y", scene.ego.y}, {"heading", scene.ego.heading}, {"speed", scene.ego.speed},
                {"goal_s", scene.goal_s}};
  json agents = json::array();
  for (const AgentBelief& a : scene.agents) {
    json ints = json::array();
    for (const Intention& it : a.intentions) {
      ints.push_back({{"kind", to_string(it.kind)},
                      {"probability", it.probability},
                      {"target_speed", it.target_speed},
                      {"lateral_shift", it.lateral_shift},
                      {"maneuver_start", it.maneuver_start},
                      {"maneuver_duration", it.maneuver_duration}});
    }
    agents.push_back({{"id", a.agent_id},
                      {"x", a.state.x},
                      {"y", a.state.y},
                      {"heading", a.state.heading},
                      {"speed", a.state.speed},
                      {"half_length", a.state.half_length},
                      {"half_width", a.state.half_width},
                      {"intentions", ints}});
  }
  doc["agents"] = agents;
  return doc;
}

SceneSpec scene_from_json(const nlohmann::json& doc) {
  SceneSpec s;
  try {
    s.format_version = doc.at("format_version").get<int>();
    if (s.format_version != kSceneFormatVersion) {
      throw std::invalid_argument("unsupported scene format version " + std::to_string(s.format_version));
    }
    s.layout = layout_from_string(doc.at("layout").get<std::string>());
    s.seed = doc.value("seed", std::uint64_t{0});
    const auto& r = doc.at("road");
    s.road.origin = {r.at("origin").at(0).get<double>(), r.at("origin").at(1).get<double>()};
    s.road.heading = r.at("heading").get<double>();
    s.road.length = r.at("length").get<double>();
    s.road.lane_width = r.at("lane_width").get<double>();
    s.road.ego_lane_d = r.value("ego_lane_d", 0.0);
    s.lane_count = r.value("lane_count", 3);
    s.has_crossing = r.value("has_crossing", false);
    s.crossing_x = r.value("crossing_x", 60.0);
    const auto& e = doc.at("ego");
    s.ego = {e.at("x").get<double>(), e.at("y").get<double>(), e.at("heading").get<double>(),
             e.at("speed").get<double>()};
    s.goal_s = e.value("goal_s", 1000.0);
    for (const auto& a : doc.at("agents")) {
      AgentBelief ab;
      ab.agent_id = a.at("id").get<int>();
      ab.state = {a.at("x").get<double>(),     a.at("y").get<double>(),
                  a.at("heading").get<double>(), a.at("speed").get<double>(),
                  a.value("half_length", 2.4),  a.value("half_width", 1.0)};
      for (const auto& it : a.at("intentions")) {
        Intention in;
        in.kind = intention_kind_from_string(it.at("kind").get<std::string>());
        in.probability = it.at("probability").get<double>();
        in.target_speed = it.at("target_speed").get<double>();
        in.lateral_shift = it.value("lateral_shift", 0.0);
        in.maneuver_start = it.value("maneuver_start", 0.0);
        in.maneuver_duration = it.value("maneuver_duration", 3.0);
        ab.intentions.push_back(in);
      }
      s.agents.push_back(std::move(ab));
    }
  } catch (const nlohmann::json::exception& ex) {
    throw std::invalid_argument(std::string("malformed scene document: ") + ex.what());
  }
  s.validate();
  return s;
}

SceneSpec load_scene(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open scene file " + path);
  nlohmann::json doc;
  try {
    in >> doc;
  } catch (const nlohmann::json::exception& ex) {
    throw std::invalid_argument(std::string("malformed scene document: ") + ex.what());
  }
  return scene_from_json(doc);
}

void save_scene(const SceneSpec& scene, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write scene file " + path);
  out << scene_to_json(scene).dump(2) << '\n';
}

PlanningProblem make_problem(const SceneSpec& scene, const ModelParams& params) {
  PlanningProblem p;
  p.road = scene.road;
  p.params = params;
  p.params.lane_width = scene.road.lane_width;
  p.belief.agents = scene.agents;
  p.ego = scene.ego;
  return p;
}

// ---------------------------------------------------------------------------

namespace {

/// Open-loop true world over the whole episode.
struct TrueWorld {
  std::vector<std::size_t> choice;
  std::vector<Trajectory> traj;
  const SceneSpec* scene = nullptr;

  AgentState state(std::size_t agent, int step) const {
    return step == 0 ? scene->agents[agent].state : traj[agent].states[static_cast<std::size_t>(step - 1)];
  }
};

TrueWorld make_true_world(const SceneSpec& scene, const EpisodeConfig& cfg, int steps) {
  TrueWorld w;
  w.scene = &scene;
  std::vector<std::vector<double>> dists;
  for (const AgentBelief& a : scene.agents) {
    std::vector<double> p;
    for (const Intention& it : a.intentions) p.push_back(it.probability);
    dists.push_back(std::move(p));
  }
  w.choice = draw_intentions(dists, cfg.seed, kTruthStream);
  for (std::size_t j = 0; j < scene.agents.size(); ++j) {
    w.traj.push_back(generate_intention_trajectory(scene.agents[j].state, scene.agents[j].intentions[w.choice[j]],
                                                   cfg.params.dt, steps));
  }
  return w;
}

/// Belief at `step`: observed current states, intentions re-timed to now.
Belief belief_at(const SceneSpec& scene, const TrueWorld& truth, int step, double dt) {
  Belief b;
  const double t = step * dt;
  for (std::size_t j = 0; j < scene.agents.size(); ++j) {
    const AgentBelief& src = scene.agents[j];
    AgentBelief ab = src;
    const AgentState now = truth.state(j, step);
    const double h0 = src.state.heading;
    const double c0 = std::cos(h0);
    const double s0 = std::sin(h0);
    const double lateral_done = -(now.x - src.state.x) * s0 + (now.y - src.state.y) * c0;
    ab.state = now;
    ab.state.heading = h0;
    for (Intention& it : ab.intentions) {
      if (it.lateral_shift != 0.0) {
        const double remaining = it.lateral_shift - lateral_done;
        it.lateral_shift = std::fabs(remaining) < 1e-3 ? 0.0 : remaining;
      }
      const double end = it.maneuver_start + it.maneuver_duration;
      it.maneuver_start = std::max(0.0, it.maneuver_start - t);
      it.maneuver_duration = std::max(0.5, end - t - it.maneuver_start);
    }
    b.agents.push_back(std::move(ab));
  }
  return b;
}

std::vector<CollisionEvent> collisions_at(const SceneSpec& scene, const TrueWorld& truth, const EgoState& ego,
                                          int step, const VehicleParams& vehicle) {
  std::vector<CollisionEvent> out;
  const Obb e{ego.x, ego.y, ego.heading, vehicle.half_length, vehicle.half_width};
  for (std::size_t j = 0; j < scene.agents.size(); ++j) {
    if (obb_overlap(e, agent_box(truth.state(j, step)))) out.push_back({step, static_cast<int>(j)});
  }
  return out;
}

}  // namespace

EpisodeResult run_episode(const SceneSpec& scene, const EpisodeConfig& config) {
  scene.validate();
  if (!(config.duration > 0.0)) throw std::invalid_argument("episode duration must be positive");
  const ModelParams& prm = config.params;
  const int total_steps = static_cast<int>(std::lround(config.duration / prm.dt));
  const int period = std::max(1, static_cast<int>(std::lround(config.replan_period / prm.dt)));
  if (period > prm.horizon_steps()) throw std::invalid_argument("replan period exceeds the planning horizon");

  const TrueWorld truth = make_true_world(scene, config, total_steps);
  const ReferencePath road = road_path(scene.road);
  const double rc = road.segment_cos(0);
  const double rsn = road.segment_sin(0);

  EpisodeResult res;
  res.true_intentions = truth.choice;
  EgoState ego = scene.ego;
  res.states.push_back(ego);
  res.collisions = collisions_at(scene, truth, ego, 0, prm.vehicle);
  if (!res.collisions.empty()) {
    res.collided = true;
    return res;
  }

  Planner planner(config.search);
  int step = 0;
  for (std::uint64_t cycle = 0; step < total_steps; ++cycle) {
    PlanningProblem problem = make_problem(scene, prm);
    problem.belief = belief_at(scene, truth, step, prm.dt);
    problem.ego = ego;
    const PlanningWorld world =
        PlanningWorld::sample(problem, config.search.scenarios, mix_seed(config.search.seed, cycle));
    const double t0 = now_ms();
    const PlanResult plan = planner.plan(world);
    CandidateTrajectory tau;
    if (config.optimize_trajectory) {
      TrajOptConfig tc = config.traj;
      tc.seed = mix_seed(config.traj.seed, cycle);
      tau = optimize_trajectory(problem, plan.pi_star, config.search.scenarios, tc).best;
    } else {
      const std::size_t first = 0;
      tau = generate_candidates(world, plan.pi_star, std::span<const std::size_t>(&first, 1)).front();
    }
    res.plan_ms.push_back(now_ms() - t0);

    for (int k = 0; k < period && step < total_steps; ++k) {
      const EgoState next = tau.states[static_cast<std::size_t>(k)];
      res.progress += (next.x - ego.x) * rc + (next.y - ego.y) * rsn;
      ego = next;
      ++step;
      res.states.push_back(ego);
      auto hits = collisions_at(scene, truth, ego, step, prm.vehicle);
      if (!hits.empty()) {
        res.collisions.insert(res.collisions.end(), hits.begin(), hits.end());
        res.collided = true;
        return res;
      }
    }
  }
  res.completed = true;
  return res;
}

double free_flow_progress(const SceneSpec& scene, const ModelParams& params, double duration) {
  const ReferencePath road = road_path(scene.road);
  const std::vector<ReferencePath> paths = candidate_paths(scene.road);
  const int steps = static_cast<int>(std::lround(duration / params.dt));
  EgoState ego = scene.ego;
  double progress = 0.0;
  for (int k = 0; k < steps; ++k) {
    const StepResult st = step_ego(ego, paths[0], 0.0, LeaderInfo{}, params);
    progress += (st.next.x - ego.x) * road.segment_cos(0) + (st.next.y - ego.y) * road.segment_sin(0);
    ego = st.next;
  }
  return progress;
}

std::vector<CollisionEvent> recheck_collisions(const SceneSpec& scene, const EpisodeConfig& config,
                                               const EpisodeResult& result) {
  const int steps = static_cast<int>(result.states.size()) - 1;
  const TrueWorld truth = make_true_world(scene, config, std::max(steps, 1));
  std::vector<CollisionEvent> out;
  for (int k = 0; k <= steps; ++k) {
    auto hits = collisions_at(scene, truth, result.states[static_cast<std::size_t>(k)], k, config.params.vehicle);
    out.insert(out.end(), hits.begin(), hits.end());
  }
  return out;
}

void write_episode_csv(std::ostream& os, const EpisodeResult& result) {
  os << "step,x,y,heading,speed,collision\n";
  char buf[192];
  for (std::size_t k = 0; k < result.states.size(); ++k) {
    const EgoState& e = result.states[k];
    const bool hit = std::any_of(result.collisions.begin(), result.collisions.end(),
                                 [&](const CollisionEvent& c) { return c.step == static_cast<int>(k); });
    std::snprintf(buf, sizeof buf, "%zu,%.17g,%.17g,%.17g,%.17g,%d\n", k, e.x, e.y, e.heading, e.speed, hit ? 1 : 0);
    os << buf;
  }
}

// ---------------------------------------------------------------------------
// Serial reference planner

namespace {

struct SerialNode {
  SerialNode* parent = nullptr;
  int action = -1;
  int depth = 0;
  NodeIndex id = 0;
  EgoState ego;
  double reward = 0.0;
  double leaf = 0.0;
  double value = 0.0;
  bool terminal = false;
  int tried = 0;
  int lo = 0;
  int hi = -1;
  std::vector<std::unique_ptr<SerialNode>> children;
  std::vector<double> q;
  std::vector<std::uint32_t> n;
};

class SerialTree {
 public:
  SerialTree(int horizon, int branching, const EgoState& ego) : horizon_(horizon), branching_(branching) {
    root_ = make(nullptr, -1, 0, 0, ego);
    refresh_range(root_.get());
  }

  SerialNode* root() const { return root_.get(); }
  int branching() const { return branching_; }

  bool frontier(const SerialNode* v) const {
    return !v->terminal && v->depth < horizon_ && v->tried < branching_;
  }

  SerialNode* add_child(SerialNode* v, const EgoState& ego, double reward, bool terminal, double leaf) {
    const int a = v->tried;
    const NodeIndex id = static_cast<NodeIndex>(branching_) * v->id + static_cast<NodeIndex>(a) + 1;
    v->children[static_cast<std::size_t>(a)] = make(v, a, v->depth + 1, id, ego);
    SerialNode* c = v->children[static_cast<std::size_t>(a)].get();
    c->reward = reward;
    c->terminal = terminal;
    c->leaf = leaf;
    c->value = leaf;
    ++v->tried;
    return c;
  }

  /// Full recomputation from the children, no early exit.
  void refresh_range(SerialNode* v) const {
    int lo = horizon_ + 1;
    int hi = -1;
    if (frontier(v)) lo = hi = v->depth;
    for (int a = 0; a < v->tried; ++a) {
      const SerialNode* c = v->children[static_cast<std::size_t>(a)].get();
      if (c->lo > c->hi) continue;
      lo = std::min(lo, c->lo);
      hi = std::max(hi, c->hi);
    }
    v->lo = lo;
    v->hi = hi;
  }

 private:
  std::unique_ptr<SerialNode> make(SerialNode* parent, int action, int depth, NodeIndex id, const EgoState& ego) {
    auto v = std::make_unique<SerialNode>();
    v->parent = parent;
    v->action = action;
    v->depth = depth;
    v->id = id;
    v->ego = ego;
    v->children.resize(static_cast<std::size_t>(branching_));
    v->q.assign(static_cast<std::size_t>(branching_), 0.0);
    v->n.assign(static_cast<std::size_t>(branching_), 0);
    return v;
  }

  int horizon_;
  int branching_;
  std::unique_ptr<SerialNode> root_;
};

double serial_best_q(const SerialNode* v, int a, double gamma) {
  const SerialNode* c = v->children[static_cast<std::size_t>(a)].get();
  return c->reward + gamma * c->value;
}

SerialNode* serial_descend(const SerialTree& tree, double ucb_c, int d_ref, double lambda) {
  SerialNode* v = tree.root();
  if (v->lo > v->hi) return nullptr;
  while (!tree.frontier(v)) {
    std::uint32_t total = 0;
    for (int a = 0; a < tree.branching(); ++a) total += v->n[static_cast<std::size_t>(a)];
    int best = -1;
    double best_score = 0.0;
    for (int a = 0; a < tree.branching(); ++a) {
      const SerialNode* c = v->children[static_cast<std::size_t>(a)].get();
      if (c == nullptr || c->lo > c->hi) continue;
      const std::uint32_t na = v->n[static_cast<std::size_t>(a)];
      double score;
      if (na == 0) {
        score = std::numeric_limits<double>::infinity();
      } else {
        const double ucb = v->q[static_cast<std::size_t>(a)] +
                           ucb_c * std::sqrt(std::log(static_cast<double>(total)) / static_cast<double>(na));
        const int nearest = d_ref < c->lo ? c->lo : (d_ref > c->hi ? c->hi : d_ref);
        score = ucb - lambda * std::abs(nearest - d_ref);
      }
      if (best < 0 || score > best_score) {
        best = a;
        best_score = score;
      }
    }
    if (best < 0) return nullptr;
    v = v->children[static_cast<std::size_t>(best)].get();
  }
  return v;
}

}  // namespace

PlanResult serial_reference_plan(const PlanningWorld& world, const SearchConfig& config) {
  config.validate();
  const double t0 = now_ms();
  const ModelParams& prm = world.params();
  const int horizon = prm.depth;
  const int b = static_cast<int>(world.actions().size());
  const double gamma = prm.reward.gamma;
  const std::size_t k_total = world.scenario_count();
  const bool zero_budget = !(config.time_budget_ms > 0.0);
  const double deadline = t0 + config.time_budget_ms;
  const auto actions = static_cast<std::size_t>(b);

  std::vector<SerialTree> trees;
  trees.reserve(k_total);
  for (std::size_t k = 0; k < k_total; ++k) trees.emplace_back(horizon, b, world.ego());
  std::vector<std::uint64_t> rounds(k_total, 0);
  std::vector<std::uint8_t> done(k_total, 0);
  std::vector<std::vector<std::vector<double>>> history(k_total);

  PlanResult result;
  SearchTelemetry& tel = result.telemetry;
  std::size_t converged = 0;

  for (bool progressed = true; progressed;) {
    progressed = false;
    for (std::size_t k = 0; k < k_total; ++k) {
      if (done[k]) continue;
      const bool root_phase = rounds[k] < actions;
      if ((zero_budget && !root_phase) || (!root_phase && now_ms() >= deadline)) {
        done[k] = 1;
        continue;
      }
      SerialTree& tree = trees[k];
      SerialNode* tentative = serial_descend(tree, config.ucb_c, 0, 0.0);
      if (tentative == nullptr) {
        done[k] = 1;
        continue;
      }
      progressed = true;
      // A single tree is its own majority.
      const int d_ref = tentative->depth;
      SerialNode* v = serial_descend(tree, config.ucb_c, d_ref, config.lambda);
      const int a = v->tried;
      const MacroOutcome out = reference_macro(world, k, v->ego, v->depth, a);
      double leaf = 0.0;
      if (!zero_budget && !out.terminal && v->depth + 1 < horizon) {
        leaf = reference_rollout(world, k, out.ego, v->depth + 1, a);
      }
      if (config.record_log) {
        tel.log.push_back({rounds[k], static_cast<std::uint32_t>(k), v->id, v->depth, a});
        tel.depth_log.push_back({static_cast<std::uint32_t>(k), {tentative->depth}, {v->depth}});
      }
      tel.total_edges += static_cast<std::uint64_t>(horizon - v->depth);
      SerialNode* c = tree.add_child(v, out.ego, out.reward, out.terminal, leaf);
      tree.refresh_range(c);
      double g = leaf;
      for (SerialNode* u = c; u->parent != nullptr; u = u->parent) {
        SerialNode* p = u->parent;
        g = u->reward + gamma * g;
        const auto ai = static_cast<std::size_t>(u->action);
        p->n[ai] += 1;
        p->q[ai] += (g - p->q[ai]) / static_cast<double>(p->n[ai]);
        if (p->tried == 0) {
          p->value = p->leaf;
        } else {
          double best = serial_best_q(p, 0, gamma);
          for (int x = 1; x < p->tried; ++x) best = std::max(best, serial_best_q(p, x, gamma));
          p->value = best;
        }
        tree.refresh_range(p);
      }
      ++rounds[k];
      ++tel.tree_iterations;
      if (config.max_iterations > 0 && rounds[k] >= std::max(config.max_iterations, actions)) done[k] = 1;

      if (config.use_convergence && !zero_budget && tree.root()->tried == b) {
        std::vector<double> snap(actions);
        for (int x = 0; x < b; ++x) snap[static_cast<std::size_t>(x)] = serial_best_q(tree.root(), x, gamma) / 1.0;
        history[k].push_back(std::move(snap));
        const auto& h = history[k];
        const auto win = static_cast<std::size_t>(config.convergence_window);
        if (h.size() >= win) {
          bool stable = true;
          const std::size_t first = h.size() - win;
          const auto arg = [](const std::vector<double>& row) {
            return static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
          };
          for (std::size_t i = first + 1; i < h.size() && stable; ++i) {
            for (std::size_t x = 0; x < actions; ++x) {
              if (!(std::fabs(h[i][x] - h[i - 1][x]) < config.convergence_epsilon)) stable = false;
            }
            if (arg(h[i]) != arg(h[first])) stable = false;
          }
          if (stable) {
            done[k] = 1;
            ++converged;
          }
        }
      }
    }
  }

  // Root values averaged over scenarios.
  result.root.q.assign(actions, 0.0);
  result.root.returns.assign(k_total, std::vector<double>(actions, std::numeric_limits<double>::quiet_NaN()));
  for (std::size_t k = 0; k < k_total; ++k) {
    const SerialNode* r = trees[k].root();
    for (int x = 0; x < r->tried; ++x) result.root.returns[k][static_cast<std::size_t>(x)] = serial_best_q(r, x, gamma);
  }
  for (std::size_t x = 0; x < actions; ++x) {
    for (std::size_t k = 0; k < k_total; ++k) {
      if (std::isnan(result.root.returns[k][x])) throw std::invalid_argument("incomplete forest: missing return");
      result.root.q[x] += result.root.returns[k][x];
    }
    result.root.q[x] /= static_cast<double>(k_total);
  }
  result.root.best_action = 0;
  for (std::size_t x = 1; x < actions; ++x) {
    if (result.root.q[x] > result.root.q[static_cast<std::size_t>(result.root.best_action)]) {
      result.root.best_action = static_cast<int>(x);
    }
  }

  // Greedy sequence over per-level averages.
  std::vector<const SerialNode*> cursor;
  for (const SerialTree& t : trees) cursor.push_back(t.root());
  for (int level = 0; level < horizon; ++level) {
    int best = -1;
    double best_val = 0.0;
    for (int x = 0; x < b; ++x) {
      double sum = 0.0;
      std::size_t cnt = 0;
      for (const SerialNode* v : cursor) {
        if (v == nullptr || v->terminal || x >= v->tried) continue;
        sum += serial_best_q(v, x, gamma);
        ++cnt;
      }
      if (cnt == 0) continue;
      const double val = sum / static_cast<double>(cnt);
      if (best < 0 || val > best_val) {
        best = x;
        best_val = val;
      }
    }
    if (best < 0) break;
    result.pi_star.push_back(best);
    for (const SerialNode*& v : cursor) {
      v = (v != nullptr && best < v->tried) ? v->children[static_cast<std::size_t>(best)].get() : nullptr;
    }
  }
  const int fill = result.pi_star.empty() ? 0 : result.pi_star.back();
  while (static_cast<int>(result.pi_star.size()) < horizon) result.pi_star.push_back(fill);

  for (std::uint64_t r : rounds) tel.iterations += r;
  tel.converged_minibatches = converged;
  tel.q_qmdp = result.root.q;
  tel.wall_ms = now_ms() - t0;
  tel.edges_per_ms = tel.wall_ms > 0.0 ? static_cast<double>(tel.total_edges) / tel.wall_ms : 0.0;
  std::stable_sort(tel.log.begin(), tel.log.end(), [](const ExpansionRecord& x, const ExpansionRecord& y) {
    return x.round != y.round ? x.round < y.round : x.tree < y.tree;
  });
  return result;
}

PlanResult serial_reference_plan(const PlanningProblem& problem, const SearchConfig& config) {
  const PlanningWorld world = PlanningWorld::sample(problem, config.scenarios, config.seed);
  return serial_reference_plan(world, config);
}

// ---------------------------------------------------------------------------

std::string to_string(Variant v) {
  switch (v) {
    case Variant::serial: return "serial";
    case Variant::single_worker_vectorized: return "single-worker-vectorized";
    case Variant::full: return "full";
    case Variant::lambda0: return "lambda0";
    case Variant::unbatched: return "unbatched";
  }
  return "full";
}

Variant variant_from_string(const std::string& name) {
  if (name == "serial") return Variant::serial;
  if (name == "single-worker-vectorized") return Variant::single_worker_vectorized;
  if (name == "full") return Variant::full;
  if (name == "lambda0" || name == "lambda=0") return Variant::lambda0;
  if (name == "unbatched") return Variant::unbatched;
  throw std::invalid_argument("unknown variant: " + name);
}

SearchConfig variant_config(Variant v, const SearchConfig& full) {
  SearchConfig c = full;
  switch (v) {
    case Variant::serial:
      c.workers = 1;
      c.batch_width = 1;
      break;
    case Variant::single_worker_vectorized: c.workers = 1; break;
    case Variant::full: break;
    case Variant::lambda0: c.lambda = 0.0; break;
    case Variant::unbatched: c.batch_width = 1; break;
  }
  return c;
}

std::vector<ThroughputRecord> run_benchmark(const std::vector<int>& densities, const std::vector<Variant>& variants,
                                            int repetitions, std::uint64_t seed, const BenchmarkConfig& config) {
  if (densities.empty() || variants.empty()) throw std::invalid_argument("benchmark needs densities and variants");
  if (repetitions < 1) throw std::invalid_argument("repetitions must be at least 1");
  SearchConfig base = config.search;
  base.time_budget_ms = std::numeric_limits<double>::infinity();
  base.max_iterations = config.iterations;
  base.use_convergence = false;

  std::vector<ThroughputRecord> out;
  for (int density : densities) {
    for (int rep = 0; rep < repetitions; ++rep) {
      const std::uint64_t s = mix_seed(seed, static_cast<std::uint64_t>(density) * 1000u + static_cast<std::uint64_t>(rep));
      const SceneSpec scene = generate_scene(density, config.layout, s);
      const PlanningProblem problem = make_problem(scene, config.params);
      const PlanningWorld world = PlanningWorld::sample(problem, base.scenarios, s);

      SearchConfig probe_cfg = variant_config(Variant::lambda0, base);
      probe_cfg.record_log = false;
      const double imbalance = Planner(probe_cfg).plan(world).telemetry.imbalance;

      SearchConfig serial_cfg = variant_config(Variant::serial, base);
      serial_cfg.record_log = false;
      const double serial_rate = serial_reference_plan(world, serial_cfg).telemetry.edges_per_ms;

      for (Variant v : variants) {
        const SearchConfig cfg = variant_config(v, base);
        const PlanResult r = v == Variant::serial ? serial_reference_plan(world, cfg) : Planner(cfg).plan(world);
        ThroughputRecord rec;
        rec.density = density;
        rec.variant = v;
        rec.repetition = rep;
        rec.scenarios = cfg.scenarios;
        rec.workers = cfg.workers;
        rec.batch_width = cfg.batch_width;
        rec.lambda = cfg.lambda;
        rec.total_edges = r.telemetry.total_edges;
        rec.wall_ms = r.telemetry.wall_ms;
        rec.edges_per_ms = r.telemetry.edges_per_ms;
        rec.imbalance = imbalance;
        rec.mean_depth_spread = r.telemetry.mean_depth_spread;
        rec.speedup_vs_serial = v == Variant::serial ? 1.0 : (serial_rate > 0.0 ? rec.edges_per_ms / serial_rate : 0.0);
        for (const ExpansionRecord& e : r.telemetry.log) {
          rec.recounted_edges += static_cast<std::uint64_t>(edge_contribution(e.depth, world.params().depth));
        }
        out.push_back(rec);
      }
    }
  }
  return out;
}

std::string throughput_csv_header() {
  return "density,variant,repetition,scenarios,workers,batch_width,lambda,total_edges,wall_ms,edges_per_ms,"
         "imbalance,mean_depth_spread,speedup_vs_serial";
}

std::string throughput_csv_row(const ThroughputRecord& r) {
  char buf[512];
  std::snprintf(buf, sizeof buf, "%d,%s,%d,%zu,%d,%d,%.17g,%llu,%.6f,%.6f,%.6f,%.6f,%.6f", r.density,
                to_string(r.variant).c_str(), r.repetition, r.scenarios, r.workers, r.batch_width, r.lambda,
                static_cast<unsigned long long>(r.total_edges), r.wall_ms, r.edges_per_ms, r.imbalance,
                r.mean_depth_spread, r.speedup_vs_serial);
  return buf;
}

}  // namespace vecqmdp
