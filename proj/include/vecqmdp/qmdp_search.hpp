#pragma once

// Vectorized QMDP belief-tree search: K scenario trees searched in
// minibatches of W lanes by a step-synchronous kernel, with load-balancing
// UCB selection and root aggregation by averaging per-scenario values.

#include <array>
#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "vecqmdp/scenario_model.hpp"
#include "vecqmdp/spatial_index.hpp"
#include "vecqmdp/vec_tree.hpp"

namespace vecqmdp {

/// Everything the planner needs for one cycle besides the search settings.
struct PlanningProblem {
  RoadLayout road;
  ModelParams params;
  std::vector<MacroAction> actions = standard_actions();
  Belief belief;
  EgoState ego;

  void validate() const;
};

struct SearchConfig {
  std::size_t scenarios = 64;  // K
  int workers = 8;             // M
  int batch_width = 8;         // W, trees per minibatch
  double ucb_c = 1.4;
  double lambda = 0.5;
  /// Wall-clock budget. <= 0 stops after the root expansion (no rollouts);
  /// infinity leaves only the other stopping rules.
  double time_budget_ms = 100.0;
  /// Per-minibatch iteration cap (at least the root width); 0 means none.
  std::size_t max_iterations = 0;
  bool use_convergence = true;
  double convergence_epsilon = 1e-3;
  int convergence_window = 20;
  std::uint64_t seed = 1;
  /// Keep the per-expansion log and per-iteration depth samples.
  bool record_log = true;

  void validate() const;
};

// ---------------------------------------------------------------------------
// World: scenarios plus every per-cycle precomputation the kernels read.

class PlanningWorld {
 public:
  PlanningWorld(const PlanningProblem& problem, std::vector<Scenario> scenarios);
  /// Samples K scenarios from the problem's belief (one stream per scenario).
  static PlanningWorld sample(const PlanningProblem& problem, std::size_t count, std::uint64_t seed);

  const ModelParams& params() const { return params_; }
  const std::vector<MacroAction>& actions() const { return actions_; }
  const ReferencePath& road() const { return road_; }
  const std::vector<ReferencePath>& paths() const { return paths_; }
  const std::array<double, 3>& lane_offsets() const { return lane_offsets_; }
  const EgoState& ego() const { return ego_; }

  std::size_t scenario_count() const { return scenarios_.size(); }
  std::size_t agent_count() const { return agents_; }
  std::size_t frame_count() const { return frames_; }
  int intervals() const { return params_.depth; }
  const Scenario& scenario(std::size_t k) const { return scenarios_[k]; }
  const std::vector<Scenario>& scenarios() const { return scenarios_; }
  /// Broad-phase tree of scenario k over frames of macro interval i.
  const StrTree& str_tree(std::size_t k, int interval) const {
    return trees_[k * static_cast<std::size_t>(params_.depth) + static_cast<std::size_t>(interval)];
  }
  /// Offset of (scenario k, frame f, agent 0) in the flat agent arrays.
  std::size_t frame_base(std::size_t k, std::size_t f) const { return (k * frames_ + f) * agents_; }

  // Flat time-major agent data over all scenarios.
  std::vector<double> ax, ay, ac, as, a_s, a_d, a_s_speed, a_s_ext;
  std::vector<double> a_half_length, a_half_width;  // per agent

 private:
  ModelParams params_;
  std::vector<MacroAction> actions_;
  ReferencePath road_;
  std::vector<ReferencePath> paths_;
  std::array<double, 3> lane_offsets_{};
  EgoState ego_;
  std::vector<Scenario> scenarios_;
  std::size_t agents_ = 0;
  std::size_t frames_ = 0;
  std::vector<StrTree> trees_;
};

// ---------------------------------------------------------------------------
// Step-synchronous kernel

/// Per-lane trajectory capture for candidate generation.
struct TrajectoryRecord {
  std::vector<std::vector<EgoState>> states;  // [lane][step]
  std::vector<std::vector<double>> accel;     // [lane][step]
};

class LockstepKernel {
 public:
  LockstepKernel(const PlanningWorld& world, int width);

  int width() const { return width_; }
  const PlanningWorld& world() const { return *world_; }
  /// Masks every lane.
  void clear();
  /// Activates lane with the given start state; depth selects the first frame.
  void load(int lane, std::size_t scenario, const EgoState& ego, int depth, int action);
  void set_action(int lane, int action) { action_[static_cast<std::size_t>(lane)] = action; }
  /// Lanes keep advancing after a collision (reward stops accumulating).
  void set_stop_on_collision(bool stop) { stop_on_collision_ = stop; }
  void set_record(TrajectoryRecord* record) { record_ = record; }

  /// Executes one macro-action on every active lane below the horizon.
  /// Returns the number of lanes that took part.
  int run_macro();

  bool active(int lane) const { return act_[static_cast<std::size_t>(lane)] != 0.0; }
  /// Lane has not collided since load().
  bool alive(int lane) const { return alive_[static_cast<std::size_t>(lane)] != 0.0; }
  bool collided(int lane) const { return collided_[static_cast<std::size_t>(lane)] != 0.0; }
  int depth(int lane) const { return depth_[static_cast<std::size_t>(lane)]; }
  double macro_reward(int lane) const { return reward_[static_cast<std::size_t>(lane)]; }
  EgoState ego(int lane) const;
  bool any_active() const;

  /// Lockstep steps executed and lane-steps with an active lane.
  std::uint64_t steps() const { return steps_; }
  std::uint64_t active_lane_steps() const { return active_lane_steps_; }

 private:
  void begin_macro(int lane);
  void step();

  const PlanningWorld* world_;
  int width_;
  bool stop_on_collision_ = true;
  TrajectoryRecord* record_ = nullptr;

  std::vector<double> act_, alive_, collided_, hit_, part_;
  std::vector<double> x_, y_, h_, v_, ch_, sh_;
  std::vector<double> pox_, poy_, pc_, ps_, plen_, phead_, nudge_, center_;
  std::vector<double> reward_, es_, ed_, lead_gap_, lead_speed_;
  std::vector<double> nx_, ny_, nh_, nv_, nch_, nsh_, acc_, prog_;
  std::vector<double> bmin_s_, bmax_s_, bmin_d_, bmax_d_;
  std::vector<std::int64_t> base_;
  std::vector<int> frame_, depth_, action_;
  std::vector<std::size_t> scen_;
  std::vector<int> candidates_;
  std::vector<int> pair_lane_, pair_agent_;
  std::uint64_t steps_ = 0;
  std::uint64_t active_lane_steps_ = 0;
};

/// One batch slot: tree id, node, macro-action, ego state and depth.
struct ExpansionSlot {
  bool active = false;
  std::size_t scenario = 0;
  NodeIndex node = 0;
  int action = 0;
  EgoState ego;
  int depth = 0;
};

struct MacroOutcome {
  EgoState ego;
  double reward = 0.0;
  bool terminal = false;

  friend bool operator==(const MacroOutcome&, const MacroOutcome&) = default;
};

/// Executes each active slot's macro-action in lockstep. Inactive slots
/// return their input state with zero reward.
std::vector<MacroOutcome> vectorized_expansion(LockstepKernel& kernel, std::span<const ExpansionSlot> batch);

/// Continues each active slot under the rollout policy (repeat its action)
/// until the horizon or a collision; returns discounted returns per slot.
std::vector<double> vectorized_rollout(LockstepKernel& kernel, std::span<const ExpansionSlot> batch);

/// Scalar reference kernel built only from scenario-model primitives and
/// brute-force SAT.
MacroOutcome reference_macro(const PlanningWorld& world, std::size_t scenario, const EgoState& ego,
                             int depth, int action);
double reference_rollout(const PlanningWorld& world, std::size_t scenario, const EgoState& ego, int depth,
                         int action);

// ---------------------------------------------------------------------------
// Selection, backup, aggregation

/// UCB with a load-balancing penalty. Untried actions score +infinity;
/// children with an empty depth range score -infinity (ineligible).
double lb_ucb_score(double q, std::uint32_t n_parent, std::uint32_t n_action, double ucb_c,
                    DepthRange range, int d_ref, double lambda);

/// Descends to a frontier node; kNoNode when the tree is exhausted.
NodeIndex descend(const ScenarioTree& tree, double ucb_c, int d_ref, double lambda);

/// Majority depth; ties go to the smaller depth. Requires a non-empty list.
int majority_depth(std::span<const int> depths);

struct Selection {
  std::vector<NodeIndex> tentative;  // plain-UCB picks (kNoNode when exhausted)
  std::vector<NodeIndex> selected;   // load-balanced picks
  std::vector<int> tentative_depth;
  std::vector<int> selected_depth;
  int d_ref = 0;
  bool any = false;
};

/// Two-stage selection over one minibatch of trees.
Selection traverse_select(std::span<ScenarioTree* const> trees, double ucb_c, double lambda);

/// Credits `leaf_return` (the value at `leaf`) along the path to the root:
/// running-mean Q and visit counts, best-value refresh, depth ranges with
/// early termination.
void backup(ScenarioTree& tree, NodeIndex leaf, double leaf_return, double gamma);

/// True when the last `window` snapshots change by less than epsilon in
/// every entry and keep the same argmax.
bool check_convergence(std::span<const std::vector<double>> history, double epsilon, int window);

/// Fraction of iterations whose depths differ across lanes.
double imbalance_metric(std::span<const std::vector<int>> depth_log);

/// Index of the maximum; lowest index on ties.
int argmax_lowest(std::span<const double> values);

struct RootStatistics {
  std::vector<double> q;                     // Q_QMDP(a)
  std::vector<std::vector<double>> returns;  // [scenario][action]
  int best_action = 0;
};

/// Averages per-scenario returns per action; throws on a ragged or
/// incomplete table.
RootStatistics aggregate_root(std::span<const std::vector<double>> returns);

/// Greedy action sequence over per-level averaged best values; padded to
/// `horizon` by repeating the last action.
std::vector<int> extract_action_sequence(std::span<const ScenarioTree* const> trees, double gamma,
                                         int horizon);

// ---------------------------------------------------------------------------
// Planner

struct ExpansionRecord {
  std::uint64_t round = 0;  // iteration index within the tree's minibatch
  std::uint32_t tree = 0;
  NodeIndex node = 0;
  int depth = 0;
  int action = 0;

  friend bool operator==(const ExpansionRecord&, const ExpansionRecord&) = default;
};

struct DepthSample {
  std::uint32_t minibatch = 0;
  std::vector<int> tentative;
  std::vector<int> selected;
};

struct SearchTelemetry {
  double wall_ms = 0.0;
  std::uint64_t iterations = 0;       // minibatch iterations
  std::uint64_t tree_iterations = 0;  // per-tree completed iterations
  std::uint64_t total_edges = 0;
  double edges_per_ms = 0.0;
  double imbalance = 0.0;
  double mean_depth_spread = 0.0;
  std::uint64_t kernel_lane_steps = 0;
  std::uint64_t active_lane_steps = 0;
  std::size_t converged_minibatches = 0;
  std::vector<double> q_qmdp;
  std::vector<ExpansionRecord> log;  // ordered by (round, tree)
  std::vector<DepthSample> depth_log;
};

struct PlanResult {
  std::vector<int> pi_star;
  RootStatistics root;
  SearchTelemetry telemetry;
};

class Planner {
 public:
  explicit Planner(SearchConfig config);

  const SearchConfig& config() const { return config_; }
  /// Samples scenarios with config.seed and searches them.
  PlanResult plan(const PlanningProblem& problem);
  /// Searches the given world's scenarios.
  PlanResult plan(const PlanningWorld& world);
  /// Trees of the last cycle (valid until the next plan call).
  const std::vector<ScenarioTree>& trees() const { return trees_; }

 private:
  PlanResult search(const PlanningWorld& world, double started_ms);

  SearchConfig config_;
  std::vector<ScenarioTree> trees_;
};

PlanResult plan(const PlanningProblem& problem, const SearchConfig& config);

/// Fixed column order shared by every telemetry CSV.
std::string telemetry_csv_header(std::size_t actions);
std::string telemetry_csv_row(const SearchTelemetry& t);

}  // namespace vecqmdp
