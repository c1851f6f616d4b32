#include "vecqmdp/scenario_model.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "vecqmdp/random.hpp"

namespace vecqmdp {

std::string to_string(IntentionKind kind) {
  switch (kind) {
    case IntentionKind::keep_lane: return "keep_lane";
    case IntentionKind::yield: return "yield";
    case IntentionKind::cut_in: return "cut_in";
    case IntentionKind::cross: return "cross";
  }
  return "keep_lane";
}

IntentionKind intention_kind_from_string(const std::string& name) {
  if (name == "keep_lane") return IntentionKind::keep_lane;
  if (name == "yield") return IntentionKind::yield;
  if (name == "cut_in") return IntentionKind::cut_in;
  if (name == "cross") return IntentionKind::cross;
  throw std::invalid_argument("unknown intention kind: " + name);
}

void Belief::validate() const {
  for (const AgentBelief& agent : agents) {
    if (agent.intentions.empty()) throw std::invalid_argument("no intentions");
    double sum = 0.0;
    for (const Intention& it : agent.intentions) {
      if (!(it.probability >= 0.0)) throw std::invalid_argument("negative intention probability");
      sum += it.probability;
    }
    if (std::fabs(sum - 1.0) > 1e-9) {
      throw std::invalid_argument("intention probabilities of agent " +
                                  std::to_string(agent.agent_id) + " do not sum to 1");
    }
  }
}

std::vector<MacroAction> standard_actions(double duration) {
  std::vector<MacroAction> actions;
  actions.reserve(9);
  for (int path = 0; path < 3; ++path) {
    for (double nudge : {-1.0, 0.0, 1.0}) actions.push_back({path, nudge, duration});
  }
  return actions;
}

void RewardSpec::validate() const {
  if (!(collision_penalty < 0.0)) throw std::invalid_argument("collision penalty must be negative");
  if (!(progress_weight >= 0.0) || !(comfort_weight >= 0.0)) {
    throw std::invalid_argument("reward weights must be non-negative");
  }
  if (!(gamma >= 0.0 && gamma <= 1.0)) throw std::invalid_argument("discount must lie in [0, 1]");
}

double idm_acceleration(double speed, double gap, double lead_speed, const IdmParams& params) {
  return idm_law(speed, gap, lead_speed, params);
}

SteeringResult stanley_steering(const EgoState& ego, const ReferencePath& path,
                                const StanleyParams& params, double nudge) {
  const FrenetPoint fp = frenet_project({ego.x, ego.y}, path);
  const double heading_error = fmath::wrap_angle(fp.path_heading - ego.heading);
  return {stanley_law(heading_error, fp.d - nudge, ego.speed, params), fp.clamped};
}

bool mobil_feasible(const LaneChangeContext& ctx, const MobilParams& mobil, const IdmParams& idm) {
  auto accel = [&](double speed, const Neighbor& leader) {
    return leader.present ? idm_law(speed, leader.gap, leader.speed, idm)
                          : idm_law(speed, kInf, speed, idm);
  };
  auto joined = [&](const Neighbor& back, const Neighbor& front) {
    // Gap between two neighbors once the ego leaves (or before it enters).
    Neighbor n;
    n.present = front.present;
    n.gap = front.present ? back.gap + ctx.ego_length + front.gap : kInf;
    n.speed = front.speed;
    return n;
  };
  const Neighbor ego_as_leader{true, 0.0, ctx.ego_speed};

  const double ego_now = accel(ctx.ego_speed, ctx.current_leader);
  const double ego_after = accel(ctx.ego_speed, ctx.target_leader);

  double new_follower_now = 0.0;
  double new_follower_after = 0.0;
  if (ctx.target_follower.present) {
    Neighbor lead = ego_as_leader;
    lead.gap = ctx.target_follower.gap;
    new_follower_now = accel(ctx.target_follower.speed, joined(ctx.target_follower, ctx.target_leader));
    new_follower_after = accel(ctx.target_follower.speed, lead);
    if (new_follower_after < -mobil.safe_decel) return false;
  }

  double old_follower_now = 0.0;
  double old_follower_after = 0.0;
  if (ctx.current_follower.present) {
    Neighbor lead = ego_as_leader;
    lead.gap = ctx.current_follower.gap;
    old_follower_now = accel(ctx.current_follower.speed, lead);
    old_follower_after =
        accel(ctx.current_follower.speed, joined(ctx.current_follower, ctx.current_leader));
  }

  const double incentive = (ego_after - ego_now) +
                           mobil.politeness * ((new_follower_after - new_follower_now) +
                                               (old_follower_after - old_follower_now)) +
                           mobil.commanded_bias;
  return incentive > mobil.threshold;
}

StepResult step_ego(const EgoState& ego, const ReferencePath& path, double nudge,
                    const LeaderInfo& leader, const ModelParams& params) {
  const FrenetPoint fp = frenet_project({ego.x, ego.y}, path);
  const double heading_error = fmath::wrap_angle(fp.path_heading - ego.heading);
  const double steer = stanley_law(heading_error, fp.d - nudge, ego.speed, params.stanley);
  const double accel = idm_law(ego.speed, leader.gap, leader.speed, params.idm);

  StepResult out;
  out.next = ego;
  out.accel = accel;
  out.steering = steer;
  out.projection_clamped = fp.clamped;
  double s, c;
  fmath::sin_cos(ego.heading, s, c);
  bicycle_update(out.next.x, out.next.y, out.next.heading, out.next.speed, c, s, steer, accel,
                 params.vehicle.wheelbase, params.dt);
  return out;
}

StepResult step_ego(const EgoState& ego, const MacroAction& action,
                    std::span<const ReferencePath> paths, const LeaderInfo& leader,
                    const ModelParams& params) {
  if (action.path_id < 0 || static_cast<std::size_t>(action.path_id) >= paths.size()) {
    throw std::out_of_range("macro-action path id out of range");
  }
  return step_ego(ego, paths[static_cast<std::size_t>(action.path_id)], action.nudge, leader, params);
}

double step_reward(const EgoState&, bool collision, double progress_delta, double accel,
                   const RewardSpec& spec) {
  return reward_law(collision, progress_delta, accel, spec);
}

// ---------------------------------------------------------------------------

ReferencePath road_path(const RoadLayout& layout) {
  return ReferencePath::straight(layout.origin, layout.heading, layout.length);
}

std::vector<ReferencePath> candidate_paths(const RoadLayout& layout) {
  const double nx = -std::sin(layout.heading);
  const double ny = std::cos(layout.heading);
  std::vector<ReferencePath> paths;
  for (double off : layout.lane_offsets()) {
    paths.push_back(ReferencePath::straight({layout.origin.x + off * nx, layout.origin.y + off * ny},
                                            layout.heading, layout.length));
  }
  return paths;
}

int nearest_lane(double d, std::span<const double> offsets) {
  int best = 0;
  double best_dist = kInf;
  for (std::size_t i = 0; i < offsets.size(); ++i) {
    const double dist = std::fabs(d - offsets[i]);
    if (dist < best_dist) {
      best_dist = dist;
      best = static_cast<int>(i);
    }
  }
  return best;
}

LeaderInfo find_leader(const ScenarioFrames& frames, std::size_t frame, double ego_s, double center,
                       double half_lane, double ego_half_length) {
  LeaderInfo out;
  const std::size_t base = frames.index(frame, 0);
  for (std::size_t j = 0; j < frames.agent_count(); ++j) {
    const std::size_t i = base + j;
    const bool ahead = in_lane(frames.d[i], center, half_lane) && frames.s[i] >= ego_s;
    const double gap = gap_ahead(frames.s[i], frames.s_extent[i], ego_s, ego_half_length);
    if (ahead && gap < out.gap) {
      out.gap = gap;
      out.speed = frames.s_speed[i];
    }
  }
  return out;
}

LaneChangeContext lane_change_context(const ScenarioFrames& frames, std::size_t frame, double ego_s,
                                      double ego_speed, double current_center, double target_center,
                                      double half_lane, double ego_half_length) {
  LaneChangeContext ctx;
  ctx.ego_speed = ego_speed;
  ctx.ego_length = 2.0 * ego_half_length;
  const std::size_t base = frames.index(frame, 0);
  for (std::size_t j = 0; j < frames.agent_count(); ++j) {
    const std::size_t i = base + j;
    const double as = frames.s[i];
    const double ext = frames.s_extent[i];
    for (int lane = 0; lane < 2; ++lane) {
      if (!in_lane(frames.d[i], lane == 0 ? current_center : target_center, half_lane)) continue;
      Neighbor& lead = lane == 0 ? ctx.current_leader : ctx.target_leader;
      Neighbor& follow = lane == 0 ? ctx.current_follower : ctx.target_follower;
      if (as >= ego_s) {
        const double gap = gap_ahead(as, ext, ego_s, ego_half_length);
        if (gap < lead.gap) lead = {true, gap, frames.s_speed[i]};
      } else {
        const double gap = gap_behind(as, ext, ego_s, ego_half_length);
        if (gap < follow.gap) follow = {true, gap, frames.s_speed[i]};
      }
    }
  }
  return ctx;
}

// ---------------------------------------------------------------------------

ScenarioFrames::ScenarioFrames(std::size_t agents, std::size_t frames)
    : agents_(agents), frames_(frames) {
  const std::size_t n = agents * frames;
  for (auto* v : {&x, &y, &heading, &cos_h, &sin_h, &speed, &s, &d, &s_speed, &s_extent, &d_extent}) {
    v->assign(n, 0.0);
  }
  half_length.assign(agents, 0.0);
  half_width.assign(agents, 0.0);
}

void ScenarioFrames::set(std::size_t frame, std::size_t agent, const AgentState& a,
                         const ReferencePath& road) {
  const std::size_t i = index(frame, agent);
  x[i] = a.x;
  y[i] = a.y;
  heading[i] = a.heading;
  fmath::sin_cos(a.heading, sin_h[i], cos_h[i]);
  speed[i] = a.speed;
  const FrenetPoint fp = frenet_project({a.x, a.y}, road);
  s[i] = fp.s;
  d[i] = fp.d;
  const double rel = fmath::wrap_angle(a.heading - fp.path_heading);
  s_speed[i] = a.speed * std::cos(rel);
  frenet_extents(std::cos(rel), std::sin(rel), a.half_length, a.half_width, s_extent[i], d_extent[i]);
  half_length[agent] = a.half_length;
  half_width[agent] = a.half_width;
}

AgentState ScenarioFrames::state(std::size_t frame, std::size_t agent) const {
  const std::size_t i = index(frame, agent);
  return {x[i], y[i], heading[i], speed[i], half_length[agent], half_width[agent]};
}

Trajectory Scenario::trajectory(std::size_t agent) const {
  Trajectory t;
  t.states.reserve(frames.frame_count() - 1);
  for (std::size_t f = 1; f < frames.frame_count(); ++f) t.states.push_back(frames.state(f, agent));
  return t;
}

Trajectory generate_intention_trajectory(const AgentState& start, const Intention& intention,
                                         double dt, int steps) {
  constexpr double kAccel = 1.5;
  constexpr double kBrake = 3.0;
  const double ux = std::cos(start.heading);
  const double uy = std::sin(start.heading);
  auto lateral = [&](double t) {
    if (intention.lateral_shift == 0.0) return 0.0;
    const double u = std::clamp((t - intention.maneuver_start) / intention.maneuver_duration, 0.0, 1.0);
    return intention.lateral_shift * u * u * (3.0 - 2.0 * u);
  };

  Trajectory traj;
  traj.states.reserve(static_cast<std::size_t>(steps));
  double along = 0.0;
  double speed = start.speed;
  double prev_lat = 0.0;
  double heading = start.heading;
  for (int k = 1; k <= steps; ++k) {
    const double dv = std::clamp(intention.target_speed - speed, -kBrake * dt, kAccel * dt);
    const double prev_along = along;
    along += speed * dt + 0.5 * dv * dt;
    speed = std::max(0.0, speed + dv);
    const double t = k * dt;
    const double lat = lateral(t);
    const double ds = along - prev_along;
    const double dl = lat - prev_lat;
    if (ds > 1e-9 || std::fabs(dl) > 1e-9) heading = fmath::wrap_angle(start.heading + std::atan2(dl, ds));
    prev_lat = lat;
    AgentState s = start;
    s.x = start.x + along * ux - lat * uy;
    s.y = start.y + along * uy + lat * ux;
    s.heading = heading;
    s.speed = speed;
    traj.states.push_back(s);
  }
  return traj;
}

namespace {

void check_settings(const ScenarioSettings& settings) {
  if (settings.road == nullptr) throw std::invalid_argument("scenario settings need a road frame");
  if (settings.steps < 1 || !(settings.dt > 0.0)) throw std::invalid_argument("invalid horizon");
}

/// Per-(agent, intention) precomputed frame columns, gathered into scenarios.
struct IntentionFrames {
  std::vector<ScenarioFrames> per_agent;  // frames x intentions layout, agent-local
};

IntentionFrames precompute(const Belief& belief, const ScenarioSettings& settings) {
  IntentionFrames cache;
  const auto frames = static_cast<std::size_t>(settings.steps) + 1;
  cache.per_agent.reserve(belief.agents.size());
  for (const AgentBelief& agent : belief.agents) {
    // "Agents" of this local table are the intentions.
    ScenarioFrames table(agent.intentions.size(), frames);
    for (std::size_t i = 0; i < agent.intentions.size(); ++i) {
      table.set(0, i, agent.state, *settings.road);
      const Trajectory t = generate_intention_trajectory(agent.state, agent.intentions[i], settings.dt, settings.steps);
      for (std::size_t f = 1; f < frames; ++f) table.set(f, i, t.states[f - 1], *settings.road);
    }
    cache.per_agent.push_back(std::move(table));
  }
  return cache;
}

Scenario gather(const IntentionFrames& cache, const EgoState& ego, std::span<const std::size_t> choice,
                std::size_t id, std::size_t frames) {
  const std::size_t n = cache.per_agent.size();
  Scenario sc;
  sc.id = id;
  sc.ego = ego;
  sc.intention.assign(choice.begin(), choice.end());
  sc.frames = ScenarioFrames(n, frames);
  ScenarioFrames& out = sc.frames;
  for (std::size_t j = 0; j < n; ++j) {
    const ScenarioFrames& src = cache.per_agent[j];
    const std::size_t c = choice[j];
    out.half_length[j] = src.half_length[c];
    out.half_width[j] = src.half_width[c];
    for (std::size_t f = 0; f < frames; ++f) {
      const std::size_t si = src.index(f, c);
      const std::size_t di = out.index(f, j);
      out.x[di] = src.x[si];
      out.y[di] = src.y[si];
      out.heading[di] = src.heading[si];
      out.cos_h[di] = src.cos_h[si];
      out.sin_h[di] = src.sin_h[si];
      out.speed[di] = src.speed[si];
      out.s[di] = src.s[si];
      out.d[di] = src.d[si];
      out.s_speed[di] = src.s_speed[si];
      out.s_extent[di] = src.s_extent[si];
      out.d_extent[di] = src.d_extent[si];
    }
  }
  return sc;
}

}  // namespace

Scenario make_scenario(const Belief& belief, const EgoState& ego,
                       std::span<const std::size_t> intention_choice, std::size_t id,
                       const ScenarioSettings& settings) {
  check_settings(settings);
  belief.validate();
  if (intention_choice.size() != belief.agents.size()) {
    throw std::invalid_argument("one intention choice per agent required");
  }
  for (std::size_t j = 0; j < intention_choice.size(); ++j) {
    if (intention_choice[j] >= belief.agents[j].intentions.size()) {
      throw std::out_of_range("intention choice out of range");
    }
  }
  const IntentionFrames cache = precompute(belief, settings);
  return gather(cache, ego, intention_choice, id, static_cast<std::size_t>(settings.steps) + 1);
}

std::vector<std::size_t> draw_intentions(std::span<const std::vector<double>> distributions,
                                         std::uint64_t seed, std::uint64_t stream) {
  Rng rng(seed, stream);
  std::vector<std::size_t> out;
  out.reserve(distributions.size());
  for (const auto& probs : distributions) {
    const double u = rng.uniform();
    double acc = 0.0;
    // Rounding can leave u above the cumulative sum; fall back to the last
    // intention with positive mass.
    std::size_t pick = probs.size() - 1;
    while (pick > 0 && probs[pick] <= 0.0) --pick;
    for (std::size_t i = 0; i < probs.size(); ++i) {
      acc += probs[i];
      if (u < acc) {
        pick = i;
        break;
      }
    }
    out.push_back(pick);
  }
  return out;
}

std::vector<Scenario> sample_scenarios(const Belief& belief, const EgoState& ego, std::size_t count,
                                       std::uint64_t seed, const ScenarioSettings& settings) {
  std::vector<std::vector<double>> dists;
  dists.reserve(belief.agents.size());
  for (const AgentBelief& a : belief.agents) {
    std::vector<double> p;
    for (const Intention& it : a.intentions) p.push_back(it.probability);
    dists.push_back(std::move(p));
  }
  return sample_scenarios(belief, dists, ego, count, seed, settings);
}

std::vector<Scenario> sample_scenarios(const Belief& belief, std::span<const std::vector<double>> distributions,
                                       const EgoState& ego, std::size_t count, std::uint64_t seed,
                                       const ScenarioSettings& settings) {
  if (count == 0) throw std::invalid_argument("scenario count must be at least 1");
  belief.validate();
  check_settings(settings);
  if (distributions.size() != belief.agents.size()) {
    throw std::invalid_argument("one intention distribution per agent required");
  }
  for (std::size_t j = 0; j < distributions.size(); ++j) {
    if (distributions[j].size() != belief.agents[j].intentions.size()) {
      throw std::invalid_argument("distribution support differs from the belief");
    }
  }

  const IntentionFrames cache = precompute(belief, settings);
  const auto frames = static_cast<std::size_t>(settings.steps) + 1;
  std::vector<Scenario> out;
  out.reserve(count);
  for (std::size_t k = 0; k < count; ++k) {
    const auto choice = draw_intentions(distributions, seed, k);
    out.push_back(gather(cache, ego, choice, k, frames));
  }
  return out;
}

}  // namespace vecqmdp
