#include "vecqmdp/qmdp_search.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <map>
#include <stdexcept>
#include <thread>

namespace vecqmdp {

namespace {

double now_ms() {
  using clock = std::chrono::steady_clock;
  return std::chrono::duration<double, std::milli>(clock::now().time_since_epoch()).count();
}

}  // namespace

void PlanningProblem::validate() const {
  params.reward.validate();
  belief.validate();
  if (actions.empty()) throw std::invalid_argument("empty macro-action set");
  for (const MacroAction& a : actions) {
    if (a.path_id < 0 || a.path_id > 2) throw std::invalid_argument("macro-action path id outside {0,1,2}");
  }
  if (params.depth < 1) throw std::invalid_argument("planning depth must be at least 1");
  if (params.steps_per_action < 1 || !(params.dt > 0.0)) throw std::invalid_argument("invalid control timing");
  if (params.idm.exponent < 1 || params.idm.exponent > 15) throw std::invalid_argument("IDM exponent outside 1..15");
  if (!(params.aabb_margin >= 0.0)) throw std::invalid_argument("negative AABB margin");
}

void SearchConfig::validate() const {
  if (scenarios < 1 || workers < 1 || batch_width < 1) throw std::invalid_argument("counts must be at least 1");
  if (scenarios % static_cast<std::size_t>(batch_width) != 0) {
    throw std::invalid_argument("scenario count must be a multiple of the batch width");
  }
  if (!(ucb_c >= 0.0)) throw std::invalid_argument("ucb_c must be non-negative");
  if (!(lambda >= 0.0)) throw std::invalid_argument("lambda must be non-negative");
  if (convergence_window < 1) throw std::invalid_argument("convergence window must be at least 1");
}

// ---------------------------------------------------------------------------

PlanningWorld::PlanningWorld(const PlanningProblem& problem, std::vector<Scenario> scenarios)
    : params_(problem.params),
      actions_(problem.actions),
      road_(road_path(problem.road)),
      paths_(candidate_paths(problem.road)),
      lane_offsets_(problem.road.lane_offsets()),
      ego_(problem.ego),
      scenarios_(std::move(scenarios)) {
  problem.validate();
  if (scenarios_.empty()) throw std::invalid_argument("planning world needs at least one scenario");
  agents_ = scenarios_.front().agent_count();
  frames_ = static_cast<std::size_t>(params_.horizon_steps()) + 1;
  for (const Scenario& sc : scenarios_) {
    if (sc.agent_count() != agents_ || sc.frames.frame_count() != frames_) {
      throw std::invalid_argument("scenarios disagree with the horizon or agent count");
    }
  }

  const std::size_t total = scenarios_.size() * frames_ * agents_;
  for (auto* v : {&ax, &ay, &ac, &as, &a_s, &a_d, &a_s_speed, &a_s_ext}) v->resize(total);
  a_half_length.resize(agents_);
  a_half_width.resize(agents_);
  for (std::size_t j = 0; j < agents_; ++j) {
    a_half_length[j] = scenarios_.front().frames.half_length[j];
    a_half_width[j] = scenarios_.front().frames.half_width[j];
  }
  for (std::size_t k = 0; k < scenarios_.size(); ++k) {
    const ScenarioFrames& fr = scenarios_[k].frames;
    const std::size_t off = k * frames_ * agents_;
    std::copy(fr.x.begin(), fr.x.end(), ax.begin() + static_cast<std::ptrdiff_t>(off));
    std::copy(fr.y.begin(), fr.y.end(), ay.begin() + static_cast<std::ptrdiff_t>(off));
    std::copy(fr.cos_h.begin(), fr.cos_h.end(), ac.begin() + static_cast<std::ptrdiff_t>(off));
    std::copy(fr.sin_h.begin(), fr.sin_h.end(), as.begin() + static_cast<std::ptrdiff_t>(off));
    std::copy(fr.s.begin(), fr.s.end(), a_s.begin() + static_cast<std::ptrdiff_t>(off));
    std::copy(fr.d.begin(), fr.d.end(), a_d.begin() + static_cast<std::ptrdiff_t>(off));
    std::copy(fr.s_speed.begin(), fr.s_speed.end(), a_s_speed.begin() + static_cast<std::ptrdiff_t>(off));
    std::copy(fr.s_extent.begin(), fr.s_extent.end(), a_s_ext.begin() + static_cast<std::ptrdiff_t>(off));
  }

  // One broad-phase tree per (scenario, macro interval) over swept boxes.
  const int spa = params_.steps_per_action;
  trees_.reserve(scenarios_.size() * static_cast<std::size_t>(params_.depth));
  std::vector<BoxEntry> boxes(agents_);
  for (std::size_t k = 0; k < scenarios_.size(); ++k) {
    const ScenarioFrames& fr = scenarios_[k].frames;
    for (int i = 0; i < params_.depth; ++i) {
      for (std::size_t j = 0; j < agents_; ++j) {
        Aabb box = Aabb::empty();
        for (int f = i * spa; f <= (i + 1) * spa; ++f) {
          const std::size_t idx = fr.index(static_cast<std::size_t>(f), j);
          box.merge({fr.s[idx] - fr.s_extent[idx], fr.s[idx] + fr.s_extent[idx], fr.d[idx] - fr.d_extent[idx],
                     fr.d[idx] + fr.d_extent[idx]});
        }
        boxes[j] = {box.inflated(params_.aabb_margin), static_cast<int>(j)};
      }
      trees_.push_back(build_str_tree(boxes));
    }
  }
}

PlanningWorld PlanningWorld::sample(const PlanningProblem& problem, std::size_t count, std::uint64_t seed) {
  problem.validate();
  const ReferencePath road = road_path(problem.road);
  ScenarioSettings settings;
  settings.dt = problem.params.dt;
  settings.steps = problem.params.horizon_steps();
  settings.road = &road;
  return PlanningWorld(problem, sample_scenarios(problem.belief, problem.ego, count, seed, settings));
}

// ---------------------------------------------------------------------------

LockstepKernel::LockstepKernel(const PlanningWorld& world, int width) : world_(&world), width_(width) {
  if (width < 1) throw std::invalid_argument("kernel width must be at least 1");
  const auto w = static_cast<std::size_t>(width);
  for (auto* v : {&act_, &alive_, &collided_, &hit_, &x_, &y_, &h_, &v_, &ch_, &sh_, &pox_, &poy_, &pc_, &ps_,
                  &plen_, &phead_, &nudge_, &center_, &reward_, &es_, &ed_, &lead_gap_, &lead_speed_, &nx_,
                  &ny_, &nh_, &nv_, &nch_, &nsh_, &acc_, &prog_, &bmin_s_, &bmax_s_, &bmin_d_, &bmax_d_,
                  &part_}) {
    v->assign(w, 0.0);
  }
  base_.assign(w, 0);
  frame_.assign(w, 0);
  depth_.assign(w, 0);
  action_.assign(w, 0);
  scen_.assign(w, 0);
  clear();
}

void LockstepKernel::clear() {
  const ReferencePath& p = world_->paths()[0];
  for (std::size_t l = 0; l < static_cast<std::size_t>(width_); ++l) {
    act_[l] = alive_[l] = collided_[l] = hit_[l] = part_[l] = 0.0;
    x_[l] = y_[l] = h_[l] = v_[l] = 0.0;
    ch_[l] = 1.0;
    sh_[l] = 0.0;
    pox_[l] = p.vertex(0).x;
    poy_[l] = p.vertex(0).y;
    pc_[l] = p.segment_cos(0);
    ps_[l] = p.segment_sin(0);
    plen_[l] = p.segment_length(0);
    phead_[l] = p.segment_heading(0);
    nudge_[l] = center_[l] = reward_[l] = 0.0;
    base_[l] = 0;
    frame_[l] = 0;
    depth_[l] = world_->params().depth;
    action_[l] = 0;
    scen_[l] = 0;
  }
}

void LockstepKernel::load(int lane, std::size_t scenario, const EgoState& ego, int depth, int action) {
  const auto l = static_cast<std::size_t>(lane);
  const ModelParams& prm = world_->params();
  if (scenario >= world_->scenario_count()) throw std::out_of_range("scenario index out of range");
  if (action < 0 || static_cast<std::size_t>(action) >= world_->actions().size()) {
    throw std::out_of_range("action index out of range");
  }
  const int d = std::clamp(depth, 0, prm.depth);
  act_[l] = d < prm.depth ? 1.0 : 0.0;
  alive_[l] = 1.0;
  collided_[l] = 0.0;
  part_[l] = 0.0;
  reward_[l] = 0.0;
  x_[l] = ego.x;
  y_[l] = ego.y;
  h_[l] = ego.heading;
  v_[l] = ego.speed;
  fmath::sin_cos(ego.heading, sh_[l], ch_[l]);
  depth_[l] = d;
  frame_[l] = d * prm.steps_per_action;
  scen_[l] = scenario;
  base_[l] = static_cast<std::int64_t>(world_->frame_base(scenario, static_cast<std::size_t>(frame_[l])));
  action_[l] = action;
}

EgoState LockstepKernel::ego(int lane) const {
  const auto l = static_cast<std::size_t>(lane);
  return {x_[l], y_[l], h_[l], v_[l]};
}

bool LockstepKernel::any_active() const {
  for (double a : act_) {
    if (a != 0.0) return true;
  }
  return false;
}

void LockstepKernel::begin_macro(int lane) {
  const auto l = static_cast<std::size_t>(lane);
  const ModelParams& prm = world_->params();
  const MacroAction& a = world_->actions()[static_cast<std::size_t>(action_[l])];
  const ReferencePath& road = world_->road();
  double rs, rd;
  road_coords(x_[l], y_[l], road.vertex(0).x, road.vertex(0).y, road.segment_cos(0), road.segment_sin(0), rs, rd);
  const auto& offsets = world_->lane_offsets();
  const int current = nearest_lane(rd, offsets);
  int path = a.path_id;
  if (path != current) {
    // Only lanes commanding a change pay for the MOBIL check.
    const LaneChangeContext ctx = lane_change_context(
        world_->scenario(scen_[l]).frames, static_cast<std::size_t>(frame_[l]), rs, v_[l],
        offsets[static_cast<std::size_t>(current)], offsets[static_cast<std::size_t>(path)],
        0.5 * prm.lane_width, prm.vehicle.half_length);
    if (!mobil_feasible(ctx, prm.mobil, prm.idm)) path = current;
  }
  const ReferencePath& p = world_->paths()[static_cast<std::size_t>(path)];
  pox_[l] = p.vertex(0).x;
  poy_[l] = p.vertex(0).y;
  pc_[l] = p.segment_cos(0);
  ps_[l] = p.segment_sin(0);
  plen_[l] = p.segment_length(0);
  phead_[l] = p.segment_heading(0);
  nudge_[l] = a.nudge;
  center_[l] = offsets[static_cast<std::size_t>(path)];
}

int LockstepKernel::run_macro() {
  const ModelParams& prm = world_->params();
  int lanes = 0;
  for (int l = 0; l < width_; ++l) {
    const auto li = static_cast<std::size_t>(l);
    const bool go = act_[li] != 0.0 && depth_[li] < prm.depth;
    act_[li] = go ? 1.0 : 0.0;
    part_[li] = act_[li];
    reward_[li] = 0.0;
    if (go) {
      begin_macro(l);
      ++lanes;
    }
  }
  if (lanes == 0) return 0;
  for (int s = 0; s < prm.steps_per_action && any_active(); ++s) step();
  for (std::size_t l = 0; l < static_cast<std::size_t>(width_); ++l) {
    if (part_[l] != 0.0) ++depth_[l];
  }
  return lanes;
}

void LockstepKernel::step() {
  const PlanningWorld& w = *world_;
  const ModelParams& prm = w.params();
  const int W = width_;
  const std::size_t n = w.agent_count();
  const ReferencePath& road = w.road();
  const double rox = road.vertex(0).x;
  const double roy = road.vertex(0).y;
  const double rc = road.segment_cos(0);
  const double rsn = road.segment_sin(0);
  const double half_lane = 0.5 * prm.lane_width;
  const double ehl = prm.vehicle.half_length;
  const double ehw = prm.vehicle.half_width;
  const double wb = prm.vehicle.wheelbase;
  const double dt = prm.dt;
  const IdmParams idm = prm.idm;
  const StanleyParams stanley = prm.stanley;
  const RewardSpec rw = prm.reward;

  double* __restrict x = x_.data();
  double* __restrict y = y_.data();
  double* __restrict h = h_.data();
  double* __restrict v = v_.data();
  double* __restrict ch = ch_.data();
  double* __restrict sh = sh_.data();
  double* __restrict es = es_.data();
  double* __restrict ed = ed_.data();
  double* __restrict lg = lead_gap_.data();
  double* __restrict lsp = lead_speed_.data();
  const double* __restrict center = center_.data();
  const std::int64_t* __restrict base = base_.data();

  for (int l = 0; l < W; ++l) active_lane_steps_ += act_[static_cast<std::size_t>(l)] != 0.0 ? 1 : 0;

  // Phase B: lane-parallel leader search and control update.
#pragma omp simd
  for (int l = 0; l < W; ++l) {
    road_coords(x[l], y[l], rox, roy, rc, rsn, es[l], ed[l]);
    lg[l] = kInf;
    lsp[l] = 0.0;
  }
  const double* __restrict S = w.a_s.data();
  const double* __restrict D = w.a_d.data();
  const double* __restrict EXT = w.a_s_ext.data();
  const double* __restrict SP = w.a_s_speed.data();
  for (std::size_t j = 0; j < n; ++j) {
#pragma omp simd
    for (int l = 0; l < W; ++l) {
      const std::int64_t i = base[l] + static_cast<std::int64_t>(j);
      const double s_agent = S[i];
      const bool ahead = in_lane(D[i], center[l], half_lane) & (s_agent >= es[l]);
      const double gap = gap_ahead(s_agent, EXT[i], es[l], ehl);
      const bool upd = ahead & (gap < lg[l]);
      lg[l] = upd ? gap : lg[l];
      lsp[l] = upd ? SP[i] : lsp[l];
    }
  }

  const double* __restrict pox = pox_.data();
  const double* __restrict poy = poy_.data();
  const double* __restrict pc = pc_.data();
  const double* __restrict ps = ps_.data();
  const double* __restrict plen = plen_.data();
  const double* __restrict phead = phead_.data();
  const double* __restrict nudge = nudge_.data();
  double* __restrict nx = nx_.data();
  double* __restrict ny = ny_.data();
  double* __restrict nh = nh_.data();
  double* __restrict nv = nv_.data();
  double* __restrict nch = nch_.data();
  double* __restrict nsh = nsh_.data();
  double* __restrict acc = acc_.data();
  double* __restrict prog = prog_.data();
  double* __restrict bmin_s = bmin_s_.data();
  double* __restrict bmax_s = bmax_s_.data();
  double* __restrict bmin_d = bmin_d_.data();
  double* __restrict bmax_d = bmax_d_.data();
#pragma omp simd
  for (int l = 0; l < W; ++l) {
    // Projection onto the single-segment path, rounding exactly like
    // frenet_project.
    const double rx = x[l] - pox[l];
    const double ry = y[l] - poy[l];
    const double raw_t = rx * pc[l] + ry * ps[l];
    const double t = raw_t < 0.0 ? 0.0 : (plen[l] < raw_t ? plen[l] : raw_t);
    const double fx = rx - t * pc[l];
    const double fy = ry - t * ps[l];
    const double dist2 = fx * fx + fy * fy;
    const double cross = pc[l] * ry - ps[l] * rx;
    const bool clamped = (raw_t < 0.0) | (raw_t > plen[l]);
    const bool interior = (t > 0.0) & (t < plen[l]);
    const double lat = (interior | clamped) ? cross : std::copysign(std::sqrt(dist2), cross);

    const double herr = fmath::wrap_angle(phead[l] - h[l]);
    const double steer = stanley_law(herr, lat - nudge[l], v[l], stanley);
    const double a = idm_law(v[l], lg[l], lsp[l], idm);
    double px = x[l], py = y[l], ph = h[l], pv = v[l], pcos = ch[l], psin = sh[l];
    bicycle_update(px, py, ph, pv, pcos, psin, steer, a, wb, dt);
    nx[l] = px;
    ny[l] = py;
    nh[l] = ph;
    nv[l] = pv;
    nch[l] = pcos;
    nsh[l] = psin;
    acc[l] = a;
    prog[l] = (px - x[l]) * rc + (py - y[l]) * rsn;

    double s_new, d_new, s_ext, d_ext;
    road_coords(px, py, rox, roy, rc, rsn, s_new, d_new);
    frenet_extents(pcos * rc + psin * rsn, psin * rc - pcos * rsn, ehl, ehw, s_ext, d_ext);
    bmin_s[l] = s_new - s_ext;
    bmax_s[l] = s_new + s_ext;
    bmin_d[l] = d_new - d_ext;
    bmax_d[l] = d_new + d_ext;
  }

  // Phase C: per-lane broad phase, then narrow phase in SAT-width chunks.
  pair_lane_.clear();
  pair_agent_.clear();
  for (int l = 0; l < W; ++l) {
    const auto li = static_cast<std::size_t>(l);
    hit_[li] = 0.0;
    if (act_[li] == 0.0) continue;
    const int interval = frame_[li] / prm.steps_per_action;
    candidates_.clear();
    w.str_tree(scen_[li], interval).query({bmin_s[l], bmax_s[l], bmin_d[l], bmax_d[l]}, candidates_);
    for (int id : candidates_) {
      pair_lane_.push_back(l);
      pair_agent_.push_back(id);
    }
  }
  SatLanes sat;
  std::uint8_t flags[kSatWidth];
  for (std::size_t p0 = 0; p0 < pair_lane_.size(); p0 += kSatWidth) {
    sat.clear();
    const std::size_t m = std::min<std::size_t>(kSatWidth, pair_lane_.size() - p0);
    for (std::size_t q = 0; q < m; ++q) {
      const auto l = static_cast<std::size_t>(pair_lane_[p0 + q]);
      const auto j = static_cast<std::size_t>(pair_agent_[p0 + q]);
      const auto i = static_cast<std::size_t>(base[l]) + n + j;
      const int lane = static_cast<int>(q);
      sat.set_ego(lane, nx[l], ny[l], nch[l], nsh[l], ehl, ehw);
      sat.set_agent(lane, w.ax[i], w.ay[i], w.ac[i], w.as[i], w.a_half_length[j], w.a_half_width[j]);
      sat.active[q] = 1.0;
    }
    sat_kernel(sat, flags);
    for (std::size_t q = 0; q < m; ++q) {
      if (flags[q]) hit_[static_cast<std::size_t>(pair_lane_[p0 + q])] = 1.0;
    }
  }

  // Phase D: rewards, masking and commit.
  double* __restrict act = act_.data();
  double* __restrict alive = alive_.data();
  double* __restrict col = collided_.data();
  double* __restrict rew = reward_.data();
  const double* __restrict hit = hit_.data();
  std::int64_t* __restrict bs = base_.data();
  int* __restrict fr = frame_.data();
  const bool stop = stop_on_collision_;
  const auto stride = static_cast<std::int64_t>(n);
#pragma omp simd
  for (int l = 0; l < W; ++l) {
    const bool on = act[l] != 0.0;
    const bool live = on & (alive[l] != 0.0);
    const bool crash = hit[l] != 0.0;
    const double r = reward_law(crash, prog[l], acc[l], rw);
    rew[l] += live ? r : 0.0;
    const bool ends = live & crash;
    col[l] = ends ? 1.0 : col[l];
    alive[l] = ends ? 0.0 : alive[l];
    x[l] = on ? nx[l] : x[l];
    y[l] = on ? ny[l] : y[l];
    h[l] = on ? nh[l] : h[l];
    v[l] = on ? nv[l] : v[l];
    ch[l] = on ? nch[l] : ch[l];
    sh[l] = on ? nsh[l] : sh[l];
    bs[l] += on ? stride : 0;
    fr[l] += on ? 1 : 0;
    act[l] = (stop & ends) ? 0.0 : act[l];
  }

  ++steps_;
  for (int l = 0; l < W; ++l) {
    const auto li = static_cast<std::size_t>(l);
    if (part_[li] == 0.0) continue;
    if (record_ != nullptr) {
      record_->states[li].push_back({x[l], y[l], h[l], v[l]});
      record_->accel[li].push_back(acc[l]);
    }
  }
}

// ---------------------------------------------------------------------------

std::vector<MacroOutcome> vectorized_expansion(LockstepKernel& kernel, std::span<const ExpansionSlot> batch) {
  if (batch.size() > static_cast<std::size_t>(kernel.width())) throw std::invalid_argument("batch wider than kernel");
  kernel.clear();
  for (std::size_t l = 0; l < batch.size(); ++l) {
    if (batch[l].active) kernel.load(static_cast<int>(l), batch[l].scenario, batch[l].ego, batch[l].depth, batch[l].action);
  }
  kernel.run_macro();
  std::vector<MacroOutcome> out(batch.size());
  for (std::size_t l = 0; l < batch.size(); ++l) {
    const int li = static_cast<int>(l);
    if (!batch[l].active) {
      out[l] = {batch[l].ego, 0.0, false};
      continue;
    }
    out[l] = {kernel.ego(li), kernel.macro_reward(li), kernel.collided(li)};
  }
  return out;
}

std::vector<double> vectorized_rollout(LockstepKernel& kernel, std::span<const ExpansionSlot> batch) {
  if (batch.size() > static_cast<std::size_t>(kernel.width())) throw std::invalid_argument("batch wider than kernel");
  kernel.clear();
  for (std::size_t l = 0; l < batch.size(); ++l) {
    if (batch[l].active) kernel.load(static_cast<int>(l), batch[l].scenario, batch[l].ego, batch[l].depth, batch[l].action);
  }
  std::vector<double> ret(batch.size(), 0.0);
  std::vector<double> disc(batch.size(), 1.0);
  std::vector<int> depth_before(batch.size());
  const double gamma = kernel.world().params().reward.gamma;
  while (kernel.any_active()) {
    for (std::size_t l = 0; l < batch.size(); ++l) depth_before[l] = kernel.depth(static_cast<int>(l));
    if (kernel.run_macro() == 0) break;
    for (std::size_t l = 0; l < batch.size(); ++l) {
      const int li = static_cast<int>(l);
      if (kernel.depth(li) == depth_before[l]) continue;
      ret[l] += disc[l] * kernel.macro_reward(li);
      disc[l] *= gamma;
    }
  }
  return ret;
}

MacroOutcome reference_macro(const PlanningWorld& world, std::size_t scenario, const EgoState& ego, int depth,
                             int action) {
  const ModelParams& prm = world.params();
  MacroOutcome out{ego, 0.0, false};
  if (depth >= prm.depth) return out;
  const Scenario& sc = world.scenario(scenario);
  const ScenarioFrames& frames = sc.frames;
  const MacroAction& a = world.actions()[static_cast<std::size_t>(action)];
  const ReferencePath& road = world.road();
  const Vec2 o = road.vertex(0);
  const double rc = road.segment_cos(0);
  const double rsn = road.segment_sin(0);
  const auto& offsets = world.lane_offsets();
  const double half_lane = 0.5 * prm.lane_width;
  const double ehl = prm.vehicle.half_length;
  const double ehw = prm.vehicle.half_width;

  auto frame = static_cast<std::size_t>(depth * prm.steps_per_action);
  double rs, rd;
  road_coords(ego.x, ego.y, o.x, o.y, rc, rsn, rs, rd);
  const int current = nearest_lane(rd, offsets);
  int path = a.path_id;
  if (path != current) {
    const LaneChangeContext ctx =
        lane_change_context(frames, frame, rs, ego.speed, offsets[static_cast<std::size_t>(current)],
                            offsets[static_cast<std::size_t>(path)], half_lane, ehl);
    if (!mobil_feasible(ctx, prm.mobil, prm.idm)) path = current;
  }
  const double center = offsets[static_cast<std::size_t>(path)];

  EgoState cur = ego;
  for (int k = 0; k < prm.steps_per_action; ++k) {
    road_coords(cur.x, cur.y, o.x, o.y, rc, rsn, rs, rd);
    const LeaderInfo leader = find_leader(frames, frame, rs, center, half_lane, ehl);
    const StepResult st = step_ego(cur, world.paths()[static_cast<std::size_t>(path)], a.nudge, leader, prm);
    const double progress = (st.next.x - cur.x) * rc + (st.next.y - cur.y) * rsn;
    bool collision = false;
    const Obb ego_box{st.next.x, st.next.y, st.next.heading, ehl, ehw};
    for (std::size_t j = 0; j < frames.agent_count() && !collision; ++j) {
      const AgentState ag = frames.state(frame + 1, j);
      collision = obb_overlap(ego_box, {ag.x, ag.y, ag.heading, ag.half_length, ag.half_width});
    }
    out.reward += reward_law(collision, progress, st.accel, prm.reward);
    cur = st.next;
    ++frame;
    if (collision) {
      out.terminal = true;
      break;
    }
  }
  out.ego = cur;
  return out;
}

double reference_rollout(const PlanningWorld& world, std::size_t scenario, const EgoState& ego, int depth,
                         int action) {
  const double gamma = world.params().reward.gamma;
  double ret = 0.0;
  double disc = 1.0;
  EgoState cur = ego;
  for (int d = depth; d < world.params().depth; ++d) {
    const MacroOutcome o = reference_macro(world, scenario, cur, d, action);
    ret += disc * o.reward;
    disc *= gamma;
    cur = o.ego;
    if (o.terminal) break;
  }
  return ret;
}

// ---------------------------------------------------------------------------

double lb_ucb_score(double q, std::uint32_t n_parent, std::uint32_t n_action, double ucb_c, DepthRange range,
                    int d_ref, double lambda) {
  if (range.empty()) return -kInf;
  if (n_action == 0) return kInf;
  const double ucb = q + ucb_c * std::sqrt(std::log(static_cast<double>(n_parent)) / static_cast<double>(n_action));
  const int clamped = std::min(std::max(d_ref, static_cast<int>(range.lo)), static_cast<int>(range.hi));
  return ucb - lambda * std::abs(clamped - d_ref);
}

NodeIndex descend(const ScenarioTree& tree, double ucb_c, int d_ref, double lambda) {
  NodeIndex v = 0;
  if (tree.range(0).empty()) return kNoNode;
  const int b = tree.branching();
  while (!tree.is_frontier(v)) {
    const std::uint32_t n_parent = tree.node_visits(v);
    int best = -1;
    double best_score = -kInf;
    for (int a = 0; a < b; ++a) {
      const NodeIndex c = tree.child(v, a);
      const double score = lb_ucb_score(tree.q(v, a), n_parent, tree.visits(v, a), ucb_c, tree.range(c), d_ref, lambda);
      if (score == -kInf) continue;
      if (best < 0 || score > best_score) {
        best = a;
        best_score = score;
      }
    }
    if (best < 0) return kNoNode;
    v = tree.child(v, best);
  }
  return v;
}

int majority_depth(std::span<const int> depths) {
  if (depths.empty()) throw std::invalid_argument("majority vote over no depths");
  std::map<int, int> counts;
  for (int d : depths) ++counts[d];
  int best = counts.begin()->first;
  int best_count = 0;
  for (const auto& [d, c] : counts) {
    if (c > best_count) {
      best = d;
      best_count = c;
    }
  }
  return best;
}

Selection traverse_select(std::span<ScenarioTree* const> trees, double ucb_c, double lambda) {
  Selection sel;
  const std::size_t w = trees.size();
  sel.tentative.assign(w, kNoNode);
  sel.selected.assign(w, kNoNode);
  sel.tentative_depth.assign(w, -1);
  sel.selected_depth.assign(w, -1);
  std::vector<int> depths;
  for (std::size_t l = 0; l < w; ++l) {
    if (trees[l] == nullptr) continue;
    const NodeIndex v = descend(*trees[l], ucb_c, 0, 0.0);
    sel.tentative[l] = v;
    if (v != kNoNode) {
      sel.tentative_depth[l] = trees[l]->depth(v);
      depths.push_back(sel.tentative_depth[l]);
    }
  }
  if (depths.empty()) return sel;
  sel.any = true;
  sel.d_ref = majority_depth(depths);
  for (std::size_t l = 0; l < w; ++l) {
    if (sel.tentative[l] == kNoNode) continue;
    const NodeIndex v = descend(*trees[l], ucb_c, sel.d_ref, lambda);
    sel.selected[l] = v;
    sel.selected_depth[l] = trees[l]->depth(v);
  }
  return sel;
}

void backup(ScenarioTree& tree, NodeIndex leaf, double leaf_return, double gamma) {
  tree.update_depth_range(leaf);
  bool ranges_live = true;
  double g = leaf_return;
  NodeIndex u = leaf;
  while (u != 0) {
    const NodeIndex p = tree.parent(u);
    const int a = tree.action_of(u);
    g = tree.reward(u) + gamma * g;
    tree.record_visit(p, a, g);
    tree.refresh_value(p, gamma);
    if (ranges_live) ranges_live = tree.update_depth_range(p);
    u = p;
  }
}

int argmax_lowest(std::span<const double> values) {
  if (values.empty()) throw std::invalid_argument("argmax of an empty list");
  int best = 0;
  for (std::size_t i = 1; i < values.size(); ++i) {
    if (values[i] > values[static_cast<std::size_t>(best)]) best = static_cast<int>(i);
  }
  return best;
}

bool check_convergence(std::span<const std::vector<double>> history, double epsilon, int window) {
  if (history.empty()) throw std::invalid_argument("empty convergence history");
  if (window < 1) throw std::invalid_argument("convergence window must be at least 1");
  const auto w = static_cast<std::size_t>(window);
  if (history.size() < w) return false;
  const std::size_t first = history.size() - w;
  const int arg = argmax_lowest(history[first]);
  for (std::size_t i = first + 1; i < history.size(); ++i) {
    const auto& prev = history[i - 1];
    const auto& cur = history[i];
    if (cur.size() != prev.size()) return false;
    for (std::size_t a = 0; a < cur.size(); ++a) {
      if (!(std::fabs(cur[a] - prev[a]) < epsilon)) return false;
    }
    if (argmax_lowest(cur) != arg) return false;
  }
  return true;
}

double imbalance_metric(std::span<const std::vector<int>> depth_log) {
  if (depth_log.empty()) throw std::invalid_argument("empty expansion log");
  std::size_t misaligned = 0;
  for (const auto& depths : depth_log) {
    if (depths.empty()) continue;
    const auto [lo, hi] = std::minmax_element(depths.begin(), depths.end());
    if (*hi - *lo >= 1) ++misaligned;
  }
  return static_cast<double>(misaligned) / static_cast<double>(depth_log.size());
}

RootStatistics aggregate_root(std::span<const std::vector<double>> returns) {
  if (returns.empty() || returns.front().empty()) throw std::invalid_argument("incomplete forest: no returns");
  const std::size_t actions = returns.front().size();
  RootStatistics out;
  out.q.assign(actions, 0.0);
  for (const auto& row : returns) {
    if (row.size() != actions) throw std::invalid_argument("incomplete forest: ragged return table");
    for (std::size_t a = 0; a < actions; ++a) {
      if (std::isnan(row[a])) throw std::invalid_argument("incomplete forest: missing return");
      out.q[a] += row[a];
    }
  }
  const auto k = static_cast<double>(returns.size());
  for (double& q : out.q) q /= k;
  out.returns.assign(returns.begin(), returns.end());
  out.best_action = argmax_lowest(out.q);
  return out;
}

std::vector<int> extract_action_sequence(std::span<const ScenarioTree* const> trees, double gamma, int horizon) {
  std::vector<int> seq;
  if (trees.empty()) return seq;
  const int b = trees.front()->branching();
  NodeIndex v = 0;
  std::vector<double> sums(static_cast<std::size_t>(b));
  std::vector<std::size_t> counts(static_cast<std::size_t>(b));
  for (int level = 0; level < horizon; ++level) {
    std::fill(sums.begin(), sums.end(), 0.0);
    std::fill(counts.begin(), counts.end(), 0);
    for (const ScenarioTree* t : trees) {
      if (!t->expanded(v) || t->terminal(v)) continue;
      for (int a = 0; a < t->tried(v); ++a) {
        sums[static_cast<std::size_t>(a)] += t->best_q(v, a, gamma);
        ++counts[static_cast<std::size_t>(a)];
      }
    }
    int best = -1;
    double best_val = -kInf;
    for (int a = 0; a < b; ++a) {
      const auto ai = static_cast<std::size_t>(a);
      if (counts[ai] == 0) continue;
      const double val = sums[ai] / static_cast<double>(counts[ai]);
      if (best < 0 || val > best_val) {
        best = a;
        best_val = val;
      }
    }
    if (best < 0) break;
    seq.push_back(best);
    if (level + 1 < horizon) v = trees.front()->child(v, best);
  }
  const int fill = seq.empty() ? 0 : seq.back();
  while (static_cast<int>(seq.size()) < horizon) seq.push_back(fill);
  return seq;
}

// ---------------------------------------------------------------------------

namespace {

struct Minibatch {
  std::uint32_t index = 0;
  std::vector<std::size_t> tree_ids;
  LockstepKernel kernel;
  std::uint64_t round = 0;
  bool done = false;
  bool converged = false;
  std::vector<std::vector<double>> history;
  std::vector<ExpansionRecord> log;
  std::vector<DepthSample> depth_log;
  std::uint64_t edges = 0;
  std::uint64_t tree_iterations = 0;
  std::uint64_t misaligned = 0;
  std::uint64_t spread_sum = 0;
  std::uint64_t samples = 0;

  Minibatch(const PlanningWorld& world, int width) : kernel(world, width) {}
};

void run_iteration(Minibatch& mb, std::vector<ScenarioTree>& trees, const PlanningWorld& world,
                   const SearchConfig& cfg, bool rollouts) {
  const ModelParams& prm = world.params();
  const double gamma = prm.reward.gamma;
  const int horizon = prm.depth;
  const std::size_t w = mb.tree_ids.size();
  std::vector<ScenarioTree*> ptrs(w);
  for (std::size_t l = 0; l < w; ++l) ptrs[l] = &trees[mb.tree_ids[l]];

  const Selection sel = traverse_select(ptrs, cfg.ucb_c, cfg.lambda);
  if (!sel.any) {
    mb.done = true;
    return;
  }

  std::vector<ExpansionSlot> batch(w);
  for (std::size_t l = 0; l < w; ++l) {
    const NodeIndex v = sel.selected[l];
    if (v == kNoNode) continue;
    const ScenarioTree& t = *ptrs[l];
    batch[l] = {true, mb.tree_ids[l], v, t.tried(v), t.ego(v), t.depth(v)};
  }
  const std::vector<MacroOutcome> out = vectorized_expansion(mb.kernel, batch);

  std::vector<ExpansionSlot> roll(w);
  for (std::size_t l = 0; l < w; ++l) {
    if (!batch[l].active) continue;
    const int child_depth = batch[l].depth + 1;
    roll[l] = {rollouts && !out[l].terminal && child_depth < horizon, batch[l].scenario, 0, batch[l].action,
               out[l].ego, child_depth};
  }
  std::vector<double> ret(w, 0.0);
  if (rollouts) ret = vectorized_rollout(mb.kernel, roll);

  DepthSample sample;
  sample.minibatch = mb.index;
  for (std::size_t l = 0; l < w; ++l) {
    if (!batch[l].active) continue;
    ScenarioTree& t = *ptrs[l];
    const NodeIndex v = batch[l].node;
    const NodeIndex c = t.child(v, batch[l].action);
    t.expand_child(v, c, out[l].ego, out[l].reward, out[l].terminal, ret[l]);
    backup(t, c, ret[l], gamma);
    mb.edges += static_cast<std::uint64_t>(edge_contribution(batch[l].depth, horizon));
    ++mb.tree_iterations;
    if (cfg.record_log) {
      mb.log.push_back({mb.round, static_cast<std::uint32_t>(mb.tree_ids[l]), v, batch[l].depth, batch[l].action});
      sample.tentative.push_back(sel.tentative_depth[l]);
      sample.selected.push_back(sel.selected_depth[l]);
    }
  }
  {
    int tlo = horizon + 1, thi = -1, slo = horizon + 1, shi = -1;
    for (std::size_t l = 0; l < w; ++l) {
      if (!batch[l].active) continue;
      tlo = std::min(tlo, sel.tentative_depth[l]);
      thi = std::max(thi, sel.tentative_depth[l]);
      slo = std::min(slo, sel.selected_depth[l]);
      shi = std::max(shi, sel.selected_depth[l]);
    }
    if (thi - tlo >= 1) ++mb.misaligned;
    mb.spread_sum += static_cast<std::uint64_t>(shi - slo);
    ++mb.samples;
  }
  if (cfg.record_log) mb.depth_log.push_back(std::move(sample));
  ++mb.round;

  // The cap never cuts the forced root expansion short.
  if (cfg.max_iterations > 0 && mb.round >= std::max(cfg.max_iterations, world.actions().size())) mb.done = true;

  if (cfg.use_convergence && rollouts) {
    const std::size_t actions = world.actions().size();
    bool root_full = true;
    for (ScenarioTree* t : ptrs) root_full = root_full && t->tried(0) == static_cast<int>(actions);
    if (root_full) {
      std::vector<double> snap(actions, 0.0);
      for (ScenarioTree* t : ptrs) {
        for (std::size_t a = 0; a < actions; ++a) snap[a] += t->best_q(0, static_cast<int>(a), gamma);
      }
      for (double& q : snap) q /= static_cast<double>(w);
      mb.history.push_back(std::move(snap));
      if (check_convergence(mb.history, cfg.convergence_epsilon, cfg.convergence_window)) {
        mb.converged = true;
        mb.done = true;
      }
    }
  }
}

void run_worker(std::vector<Minibatch*> mine, std::vector<ScenarioTree>& trees, const PlanningWorld& world,
                const SearchConfig& cfg, double deadline_ms) {
  const std::size_t actions = world.actions().size();
  const bool zero_budget = !(cfg.time_budget_ms > 0.0);
  for (;;) {
    bool progressed = false;
    for (Minibatch* mb : mine) {
      if (mb->done) continue;
      const bool root_phase = mb->round < actions;
      if (zero_budget && !root_phase) {
        mb->done = true;
        continue;
      }
      if (!root_phase && now_ms() >= deadline_ms) {
        mb->done = true;
        continue;
      }
      run_iteration(*mb, trees, world, cfg, !zero_budget);
      progressed = true;
    }
    if (!progressed) break;
  }
}

}  // namespace

Planner::Planner(SearchConfig config) : config_(config) { config_.validate(); }

PlanResult Planner::plan(const PlanningProblem& problem) {
  const double t0 = now_ms();
  const PlanningWorld world = PlanningWorld::sample(problem, config_.scenarios, config_.seed);
  return search(world, t0);
}

PlanResult Planner::plan(const PlanningWorld& world) { return search(world, now_ms()); }

PlanResult Planner::search(const PlanningWorld& world, double started_ms) {
  const SearchConfig& cfg = config_;
  if (world.scenario_count() != cfg.scenarios) throw std::invalid_argument("world scenario count differs from K");
  const ModelParams& prm = world.params();
  const int horizon = prm.depth;
  const int branching = static_cast<int>(world.actions().size());
  const double gamma = prm.reward.gamma;

  // Trees persist across cycles and are reset lazily.
  if (trees_.size() != cfg.scenarios || trees_.front().max_depth() != horizon ||
      trees_.front().branching() != branching) {
    trees_.clear();
    trees_.reserve(cfg.scenarios);
    for (std::size_t k = 0; k < cfg.scenarios; ++k) trees_.emplace_back(horizon, branching);
  }
  for (ScenarioTree& t : trees_) t.init_root(world.ego());

  const int width = cfg.batch_width;
  const std::size_t batches = cfg.scenarios / static_cast<std::size_t>(width);
  std::vector<Minibatch> mbs;
  mbs.reserve(batches);
  for (std::size_t b = 0; b < batches; ++b) {
    mbs.emplace_back(world, width);
    mbs.back().index = static_cast<std::uint32_t>(b);
    for (int l = 0; l < width; ++l) mbs.back().tree_ids.push_back(b * static_cast<std::size_t>(width) + static_cast<std::size_t>(l));
  }

  const double deadline = started_ms + cfg.time_budget_ms;
  const std::size_t workers = std::min<std::size_t>(static_cast<std::size_t>(cfg.workers), batches);
  std::vector<std::vector<Minibatch*>> assignment(workers);
  for (std::size_t b = 0; b < batches; ++b) assignment[b % workers].push_back(&mbs[b]);
  if (workers == 1) {
    run_worker(assignment[0], trees_, world, cfg, deadline);
  } else {
    std::vector<std::jthread> threads;
    threads.reserve(workers);
    for (std::size_t m = 0; m < workers; ++m) {
      threads.emplace_back([&, m] { run_worker(assignment[m], trees_, world, cfg, deadline); });
    }
  }

  PlanResult result;
  std::vector<std::vector<double>> returns(cfg.scenarios, std::vector<double>(static_cast<std::size_t>(branching)));
  for (std::size_t k = 0; k < cfg.scenarios; ++k) {
    for (int a = 0; a < branching; ++a) {
      returns[k][static_cast<std::size_t>(a)] =
          trees_[k].tried(0) > a ? trees_[k].best_q(0, a, gamma) : std::numeric_limits<double>::quiet_NaN();
    }
  }
  result.root = aggregate_root(returns);
  std::vector<const ScenarioTree*> ptrs;
  for (const ScenarioTree& t : trees_) ptrs.push_back(&t);
  result.pi_star = extract_action_sequence(ptrs, gamma, horizon);

  SearchTelemetry& tel = result.telemetry;
  std::uint64_t misaligned = 0, spread = 0, samples = 0;
  for (Minibatch& mb : mbs) {
    tel.iterations += mb.round;
    tel.tree_iterations += mb.tree_iterations;
    tel.total_edges += mb.edges;
    tel.kernel_lane_steps += mb.kernel.steps() * static_cast<std::uint64_t>(width);
    tel.active_lane_steps += mb.kernel.active_lane_steps();
    tel.converged_minibatches += mb.converged ? 1 : 0;
    misaligned += mb.misaligned;
    spread += mb.spread_sum;
    samples += mb.samples;
    tel.log.insert(tel.log.end(), mb.log.begin(), mb.log.end());
    tel.depth_log.insert(tel.depth_log.end(), mb.depth_log.begin(), mb.depth_log.end());
  }
  std::stable_sort(tel.log.begin(), tel.log.end(), [](const ExpansionRecord& a, const ExpansionRecord& b) {
    return a.round != b.round ? a.round < b.round : a.tree < b.tree;
  });
  tel.imbalance = samples > 0 ? static_cast<double>(misaligned) / static_cast<double>(samples) : 0.0;
  tel.mean_depth_spread = samples > 0 ? static_cast<double>(spread) / static_cast<double>(samples) : 0.0;
  tel.q_qmdp = result.root.q;
  tel.wall_ms = now_ms() - started_ms;
  tel.edges_per_ms = tel.wall_ms > 0.0 ? static_cast<double>(tel.total_edges) / tel.wall_ms : 0.0;
  return result;
}

PlanResult plan(const PlanningProblem& problem, const SearchConfig& config) {
  Planner planner(config);
  return planner.plan(problem);
}

std::string telemetry_csv_header(std::size_t actions) {
  std::string h = "wall_ms,iterations,tree_iterations,total_edges,edges_per_ms,imbalance,mean_depth_spread";
  for (std::size_t a = 0; a < actions; ++a) h += ",q_" + std::to_string(a);
  return h;
}

std::string telemetry_csv_row(const SearchTelemetry& t) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%.6f,%llu,%llu,%llu,%.6f,%.6f,%.6f", t.wall_ms,
                static_cast<unsigned long long>(t.iterations), static_cast<unsigned long long>(t.tree_iterations),
                static_cast<unsigned long long>(t.total_edges), t.edges_per_ms, t.imbalance, t.mean_depth_spread);
  std::string row = buf;
  for (double q : t.q_qmdp) {
    std::snprintf(buf, sizeof buf, ",%.17g", q);
    row += buf;
  }
  return row;
}

}  // namespace vecqmdp
