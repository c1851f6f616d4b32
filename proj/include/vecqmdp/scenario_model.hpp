#pragma once

// Scene state, beliefs, macro-actions, closed-loop vehicle dynamics and the
// reward model. Everything here is a pure function of its inputs.

#include <array>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "vecqmdp/geometry.hpp"
#include "vecqmdp/math.hpp"

namespace vecqmdp {

inline constexpr double kInf = std::numeric_limits<double>::infinity();

struct EgoState {
  double x = 0.0;
  double y = 0.0;
  double heading = 0.0;  // (-pi, pi]
  double speed = 0.0;    // >= 0

  friend bool operator==(const EgoState&, const EgoState&) = default;
};

struct AgentState {
  double x = 0.0;
  double y = 0.0;
  double heading = 0.0;
  double speed = 0.0;
  double half_length = 2.4;
  double half_width = 1.0;

  friend bool operator==(const AgentState&, const AgentState&) = default;
};

/// Predicted agent motion; entry i is the state at time (i + 1) * dt.
struct Trajectory {
  std::vector<AgentState> states;
};

enum class IntentionKind { keep_lane, yield, cut_in, cross };

std::string to_string(IntentionKind kind);
IntentionKind intention_kind_from_string(const std::string& name);

/// One discrete intention with the parameters of the constant controller that
/// realizes it. The resulting trajectory depends on these parameters only.
struct Intention {
  IntentionKind kind = IntentionKind::keep_lane;
  double probability = 1.0;
  double target_speed = 10.0;     // m/s
  double lateral_shift = 0.0;     // m, left of the agent's heading positive
  double maneuver_start = 0.0;    // s
  double maneuver_duration = 3.0; // s
};

struct AgentBelief {
  int agent_id = 0;
  AgentState state;
  std::vector<Intention> intentions;
};

struct Belief {
  std::vector<AgentBelief> agents;

  /// Throws std::invalid_argument on an empty intention list, negative
  /// probabilities, or per-agent sums off 1 by more than 1e-9.
  void validate() const;
};

struct MacroAction {
  int path_id = 0;     // 0: current lane, 1: left change, 2: right change
  double nudge = 0.0;  // lateral offset on the path, m
  double duration = 2.0;

  friend bool operator==(const MacroAction&, const MacroAction&) = default;
};

/// The nine (path, nudge) macro-actions in path-major order.
std::vector<MacroAction> standard_actions(double duration = 2.0);

struct IdmParams {
  double desired_speed = 13.9;  // v0
  double time_headway = 1.5;    // T
  double min_gap = 2.0;         // s0
  double max_accel = 1.5;       // a
  double comfort_decel = 2.0;   // b
  int exponent = 4;             // delta, 1..15
  double max_decel = 8.0;       // emergency braking bound b_max
};

struct StanleyParams {
  double gain = 2.5;
  double max_steer = 0.6;
  double min_speed = 0.1;
};

struct MobilParams {
  double politeness = 0.3;
  double safe_decel = 3.0;
  double threshold = 0.1;
  /// Incentive contributed by the planner having commanded the change.
  double commanded_bias = 0.2;
};

struct VehicleParams {
  double half_length = 2.4;
  double half_width = 1.0;
  double wheelbase = 2.8;
};

struct RewardSpec {
  double collision_penalty = -1000.0;
  double progress_weight = 1.0;
  double comfort_weight = 0.1;
  double gamma = 0.95;

  void validate() const;
};

/// All model constants of one planning problem.
struct ModelParams {
  IdmParams idm;
  StanleyParams stanley;
  MobilParams mobil;
  VehicleParams vehicle;
  RewardSpec reward;
  double dt = 0.1;
  int steps_per_action = 20;
  int depth = 4;  // H tree levels
  double lane_width = 3.5;
  double aabb_margin = 0.1;

  int horizon_steps() const { return depth * steps_per_action; }
};

// ---------------------------------------------------------------------------
// Control laws. Shared verbatim by the scalar reference path and the batch
// kernels; keep them branch-free.

/// Intelligent Driver Model acceleration, clamped to [-max_decel, max_accel].
/// A missing leader is an infinite gap; gap <= 0 yields -max_decel.
VECQMDP_INLINE double idm_law(double speed, double gap, double lead_speed, const IdmParams& p) {
  // Binary powering with a fixed trip count keeps the batched loop vectorizable.
  double base = speed / p.desired_speed;
  double free_term = 1.0;
  for (int bit = 0; bit < 4; ++bit) {
    free_term = ((p.exponent >> bit) & 1) ? free_term * base : free_term;
    base *= base;
  }
  const double dyn = speed * p.time_headway +
                     speed * (speed - lead_speed) / (2.0 * std::sqrt(p.max_accel * p.comfort_decel));
  const double desired_gap = p.min_gap + (dyn > 0.0 ? dyn : 0.0);
  const double q = desired_gap / gap;
  double acc = p.max_accel * (1.0 - free_term - q * q);
  acc = acc > p.max_accel ? p.max_accel : acc;
  acc = acc < -p.max_decel ? -p.max_decel : acc;
  return gap > 0.0 ? acc : -p.max_decel;
}

/// Stanley steering from heading error and signed lateral error (left positive).
VECQMDP_INLINE double stanley_law(double heading_error, double lateral_error, double speed,
                                  const StanleyParams& p) {
  const double v = speed > p.min_speed ? speed : p.min_speed;
  double steer = heading_error + fmath::atan(-p.gain * lateral_error / v);
  steer = steer > p.max_steer ? p.max_steer : steer;
  steer = steer < -p.max_steer ? -p.max_steer : steer;
  return steer;
}

/// Kinematic bicycle update (explicit Euler). cos_h/sin_h hold the cosine and
/// sine of the incoming heading and are refreshed for the outgoing one.
VECQMDP_INLINE void bicycle_update(double& x, double& y, double& heading, double& speed,
                                   double& cos_h, double& sin_h, double steer, double accel,
                                   double wheelbase, double dt) {
  const double v = speed;
  x = x + v * cos_h * dt;
  y = y + v * sin_h * dt;
  heading = fmath::wrap_angle(heading + v * fmath::tan(steer) / wheelbase * dt);
  const double nv = v + accel * dt;
  speed = nv > 0.0 ? nv : 0.0;
  fmath::sin_cos(heading, sin_h, cos_h);
}

VECQMDP_INLINE double reward_law(bool collision, double progress, double accel, const RewardSpec& r) {
  return (collision ? r.collision_penalty : 0.0) + r.progress_weight * progress -
         r.comfort_weight * accel * accel;
}

/// Road-frame coordinates of (x, y) on a straight road through (ox, oy) with
/// unit direction (c, s). Matches frenet_project on an interior foot point.
VECQMDP_INLINE void road_coords(double x, double y, double ox, double oy, double c, double s,
                                double& rs, double& rd) {
  const double rx = x - ox;
  const double ry = y - oy;
  rs = rx * c + ry * s;
  rd = c * ry - s * rx;
}

/// Road-frame half extents of a rectangle whose heading relative to the road
/// has cosine cr and sine sr.
VECQMDP_INLINE void frenet_extents(double cr, double sr, double half_length, double half_width,
                                   double& s_ext, double& d_ext) {
  const double ac = std::fabs(cr);
  const double as = std::fabs(sr);
  s_ext = half_length * ac + half_width * as;
  d_ext = half_length * as + half_width * ac;
}

/// Agent occupies the lane corridor centered at `center`.
VECQMDP_INLINE bool in_lane(double agent_d, double center, double half_lane) {
  return std::fabs(agent_d - center) < half_lane;
}

/// Bumper gap to an agent ahead of the ego.
VECQMDP_INLINE double gap_ahead(double agent_s, double agent_s_ext, double ego_s, double ego_half_length) {
  return (agent_s - agent_s_ext) - (ego_s + ego_half_length);
}

/// Bumper gap to an agent behind the ego.
VECQMDP_INLINE double gap_behind(double agent_s, double agent_s_ext, double ego_s, double ego_half_length) {
  return (ego_s - ego_half_length) - (agent_s + agent_s_ext);
}

// ---------------------------------------------------------------------------

double idm_acceleration(double speed, double gap, double lead_speed, const IdmParams& params = {});

struct SteeringResult {
  double steering = 0.0;
  bool projection_clamped = false;
};

/// Stanley steering toward `path` shifted laterally by `nudge`.
SteeringResult stanley_steering(const EgoState& ego, const ReferencePath& path,
                                const StanleyParams& params = {}, double nudge = 0.0);

struct Neighbor {
  bool present = false;
  double gap = kInf;  // bumper to bumper, m
  double speed = 0.0;
};

struct LaneChangeContext {
  double ego_speed = 0.0;
  double ego_length = 4.8;
  Neighbor current_leader;
  Neighbor current_follower;
  Neighbor target_leader;
  Neighbor target_follower;
};

/// MOBIL safety and incentive criteria for a commanded lane change.
bool mobil_feasible(const LaneChangeContext& ctx, const MobilParams& mobil = {},
                    const IdmParams& idm = {});

struct LeaderInfo {
  double gap = kInf;
  double speed = 0.0;
};

struct StepResult {
  EgoState next;
  double accel = 0.0;
  double steering = 0.0;
  bool projection_clamped = false;
};

/// One control step tracking `path` + `nudge` with IDM and Stanley.
StepResult step_ego(const EgoState& ego, const ReferencePath& path, double nudge,
                    const LeaderInfo& leader, const ModelParams& params);

/// Same, resolving the action's path from the candidate path set.
StepResult step_ego(const EgoState& ego, const MacroAction& action,
                    std::span<const ReferencePath> paths, const LeaderInfo& leader,
                    const ModelParams& params);

double step_reward(const EgoState& ego, bool collision, double progress_delta, double accel,
                   const RewardSpec& spec);

// ---------------------------------------------------------------------------
// Road layout

/// Straight road with parallel lanes. Candidate path 0 is the ego lane, 1 the
/// lane to its left and 2 the lane to its right.
struct RoadLayout {
  Vec2 origin{-1000.0, 0.0};
  double heading = 0.0;
  double length = 4000.0;
  double lane_width = 3.5;
  double ego_lane_d = 0.0;  // road-frame offset of the ego lane center

  /// Road-frame lateral offsets of the three candidate paths.
  std::array<double, 3> lane_offsets() const {
    return {ego_lane_d, ego_lane_d + lane_width, ego_lane_d - lane_width};
  }
};

ReferencePath road_path(const RoadLayout& layout);
std::vector<ReferencePath> candidate_paths(const RoadLayout& layout);

/// Index of the lane offset closest to d; ties go to the lower index.
int nearest_lane(double d, std::span<const double> offsets);

// ---------------------------------------------------------------------------
// Scenarios

/// Time-major agent states of one scenario: frame f holds every agent at time
/// f * dt (frame 0 is the current state). Road-frame quantities are
/// precomputed for the kernels.
class ScenarioFrames {
 public:
  ScenarioFrames() = default;
  ScenarioFrames(std::size_t agents, std::size_t frames);

  std::size_t agent_count() const { return agents_; }
  std::size_t frame_count() const { return frames_; }
  std::size_t index(std::size_t frame, std::size_t agent) const { return frame * agents_ + agent; }

  /// Writes one agent state into frame f, deriving road-frame fields.
  void set(std::size_t frame, std::size_t agent, const AgentState& a, const ReferencePath& road);
  AgentState state(std::size_t frame, std::size_t agent) const;

  std::vector<double> x, y, heading, cos_h, sin_h, speed;
  std::vector<double> s, d;     // road-frame position
  std::vector<double> s_speed;  // speed component along the road
  std::vector<double> s_extent, d_extent;  // road-frame half extents
  std::vector<double> half_length, half_width;  // per agent

 private:
  std::size_t agents_ = 0;
  std::size_t frames_ = 0;
};

/// Nearest in-lane agent ahead of the ego at `frame`.
LeaderInfo find_leader(const ScenarioFrames& frames, std::size_t frame, double ego_s, double center,
                       double half_lane, double ego_half_length);

/// Leaders and followers in the current and target lanes at `frame`.
LaneChangeContext lane_change_context(const ScenarioFrames& frames, std::size_t frame, double ego_s,
                                      double ego_speed, double current_center, double target_center,
                                      double half_lane, double ego_half_length);

struct Scenario {
  std::size_t id = 0;
  EgoState ego;
  std::vector<std::size_t> intention;  // chosen intention per agent
  ScenarioFrames frames;

  std::size_t agent_count() const { return frames.agent_count(); }
  Trajectory trajectory(std::size_t agent) const;
};

struct ScenarioSettings {
  double dt = 0.1;
  int steps = 80;
  const ReferencePath* road = nullptr;
};

/// Open-loop rollout of one intention's constant controller.
Trajectory generate_intention_trajectory(const AgentState& start, const Intention& intention,
                                         double dt, int steps);

/// Builds a scenario from explicit intention choices.
Scenario make_scenario(const Belief& belief, const EgoState& ego,
                       std::span<const std::size_t> intention_choice, std::size_t id,
                       const ScenarioSettings& settings);

/// Draws K scenarios; scenario k uses its own stream derived from (seed, k).
std::vector<Scenario> sample_scenarios(const Belief& belief, const EgoState& ego, std::size_t count,
                                       std::uint64_t seed, const ScenarioSettings& settings);

/// Same, drawing intentions from explicit per-agent distributions over the
/// belief's support.
std::vector<Scenario> sample_scenarios(const Belief& belief, std::span<const std::vector<double>> distributions,
                                       const EgoState& ego, std::size_t count, std::uint64_t seed,
                                       const ScenarioSettings& settings);

/// Draws intention indices for one scenario from per-agent distributions.
std::vector<std::size_t> draw_intentions(std::span<const std::vector<double>> distributions,
                                         std::uint64_t seed, std::uint64_t stream);

}  // namespace vecqmdp
