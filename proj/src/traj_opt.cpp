#include "vecqmdp/traj_opt.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <ostream>
#include <stdexcept>
#include <thread>

namespace vecqmdp {

namespace {

double now_ms() {
  using clock = std::chrono::steady_clock;
  return std::chrono::duration<double, std::milli>(clock::now().time_since_epoch()).count();
}

}  // namespace

bool trajectory_is_hazardous(std::span<const AgentState> states, const ReferencePath& ego_path, double corridor) {
  double prev_d = 0.0;
  bool have_prev = false;
  for (const AgentState& a : states) {
    const FrenetPoint fp = frenet_project({a.x, a.y}, ego_path);
    if (std::fabs(fp.d) < corridor) return true;
    if (have_prev && (prev_d < 0.0) != (fp.d < 0.0)) return true;
    prev_d = fp.d;
    have_prev = true;
  }
  return false;
}

std::vector<std::size_t> identify_critical_agents(const Scenario& scenario, const ReferencePath& ego_path,
                                                  double corridor) {
  std::vector<std::size_t> out;
  const ScenarioFrames& fr = scenario.frames;
  std::vector<AgentState> states(fr.frame_count());
  for (std::size_t j = 0; j < fr.agent_count(); ++j) {
    for (std::size_t f = 0; f < fr.frame_count(); ++f) states[f] = fr.state(f, j);
    if (trajectory_is_hazardous(states, ego_path, corridor)) out.push_back(j);
  }
  return out;
}

std::vector<std::vector<std::uint8_t>> hazard_flags(const Belief& belief, const ReferencePath& ego_path, double dt,
                                                    int steps, double corridor) {
  std::vector<std::vector<std::uint8_t>> out;
  out.reserve(belief.agents.size());
  for (const AgentBelief& a : belief.agents) {
    std::vector<std::uint8_t> flags;
    for (const Intention& it : a.intentions) {
      std::vector<AgentState> states{a.state};
      const Trajectory t = generate_intention_trajectory(a.state, it, dt, steps);
      states.insert(states.end(), t.states.begin(), t.states.end());
      flags.push_back(trajectory_is_hazardous(states, ego_path, corridor) ? 1 : 0);
    }
    out.push_back(std::move(flags));
  }
  return out;
}

void ProposalDistribution::check_against(const Belief& belief) const {
  if (q.size() != belief.agents.size()) throw std::invalid_argument("proposal agent count differs from belief");
  for (std::size_t j = 0; j < q.size(); ++j) {
    const auto& its = belief.agents[j].intentions;
    if (q[j].size() != its.size()) throw std::invalid_argument("proposal support differs from belief");
    double sum = 0.0;
    for (std::size_t i = 0; i < its.size(); ++i) {
      if (!(q[j][i] >= 0.0)) throw std::invalid_argument("negative proposal probability");
      if (its[i].probability > 0.0 && !(q[j][i] > 0.0)) {
        throw std::invalid_argument("proposal is not absolutely continuous w.r.t. the belief");
      }
      sum += q[j][i];
    }
    if (std::fabs(sum - 1.0) > 1e-9) throw std::invalid_argument("proposal row does not sum to 1");
  }
}

ProposalDistribution build_proposal(const Belief& belief, std::span<const std::size_t> critical_agents,
                                    std::span<const std::vector<std::uint8_t>> hazardous, double tilt) {
  if (!(tilt >= 0.0 && tilt < 1.0)) throw std::invalid_argument("tilt must lie in [0, 1)");
  if (hazardous.size() != belief.agents.size()) throw std::invalid_argument("one hazard row per agent required");
  ProposalDistribution out;
  out.critical.assign(belief.agents.size(), 0);
  for (std::size_t j : critical_agents) {
    if (j >= belief.agents.size()) throw std::out_of_range("critical agent id out of range");
    out.critical[j] = 1;
  }
  out.hazardous.assign(hazardous.begin(), hazardous.end());
  for (std::size_t j = 0; j < belief.agents.size(); ++j) {
    const auto& its = belief.agents[j].intentions;
    if (hazardous[j].size() != its.size()) throw std::invalid_argument("hazard row size differs from belief");
    std::vector<double> b(its.size());
    double hazard_mass = 0.0;
    for (std::size_t i = 0; i < its.size(); ++i) {
      b[i] = its[i].probability;
      if (hazardous[j][i]) hazard_mass += b[i];
    }
    if (!out.critical[j] || tilt == 0.0 || !(hazard_mass > 0.0)) {
      out.q.push_back(std::move(b));
      continue;
    }
    std::vector<double> q(its.size());
    for (std::size_t i = 0; i < its.size(); ++i) {
      const double restricted = hazardous[j][i] ? b[i] / hazard_mass : 0.0;
      q[i] = (1.0 - tilt) * b[i] + tilt * restricted;
    }
    out.q.push_back(std::move(q));
  }
  return out;
}

double importance_weight(const Belief& belief, const ProposalDistribution& proposal,
                         std::span<const std::size_t> choice) {
  if (choice.size() != belief.agents.size()) throw std::invalid_argument("one intention choice per agent required");
  double w = 1.0;
  for (std::size_t j = 0; j < choice.size(); ++j) {
    const double b = belief.agents[j].intentions.at(choice[j]).probability;
    const double q = proposal.q.at(j).at(choice[j]);
    if (!(q > 0.0)) throw std::invalid_argument("proposal draws an intention it gives zero mass");
    w *= b / q;
  }
  return w;
}

std::vector<WeightedScenario> resample_with_proposal(const Belief& belief, const ProposalDistribution& proposal,
                                                     const EgoState& ego, std::size_t count, std::uint64_t seed,
                                                     const ScenarioSettings& settings) {
  proposal.check_against(belief);
  std::vector<Scenario> drawn = sample_scenarios(belief, proposal.q, ego, count, seed, settings);
  std::vector<WeightedScenario> out;
  out.reserve(drawn.size());
  for (Scenario& sc : drawn) {
    const double w = importance_weight(belief, proposal, sc.intention);
    out.push_back({std::move(sc), w});
  }
  return out;
}

// ---------------------------------------------------------------------------

namespace {

void check_pi(const PlanningWorld& world, std::span<const int> pi_star) {
  if (pi_star.empty()) throw std::invalid_argument("empty action sequence");
  if (static_cast<int>(pi_star.size()) < world.params().depth) {
    throw std::invalid_argument("action sequence shorter than the horizon");
  }
  for (int a : pi_star) {
    if (a < 0 || static_cast<std::size_t>(a) >= world.actions().size()) {
      throw std::out_of_range("action index out of range");
    }
  }
}

}  // namespace

std::vector<CandidateTrajectory> generate_candidates(const PlanningWorld& world, std::span<const int> pi_star,
                                                     std::span<const std::size_t> scenarios) {
  check_pi(world, pi_star);
  const ModelParams& prm = world.params();
  const double gamma = prm.reward.gamma;
  std::vector<CandidateTrajectory> out(scenarios.size());
  if (scenarios.empty()) return out;
  const int width = static_cast<int>(std::min<std::size_t>(scenarios.size(), kSatWidth));
  LockstepKernel kernel(world, width);
  kernel.set_stop_on_collision(false);
  TrajectoryRecord rec;
  kernel.set_record(&rec);
  for (std::size_t first = 0; first < scenarios.size(); first += static_cast<std::size_t>(width)) {
    const std::size_t n = std::min<std::size_t>(static_cast<std::size_t>(width), scenarios.size() - first);
    kernel.clear();
    rec.states.assign(static_cast<std::size_t>(width), {});
    rec.accel.assign(static_cast<std::size_t>(width), {});
    for (std::size_t l = 0; l < n; ++l) kernel.load(static_cast<int>(l), scenarios[first + l], world.ego(), 0, pi_star[0]);
    std::vector<double> ret(n, 0.0);
    double disc = 1.0;
    for (int d = 0; d < prm.depth; ++d) {
      for (std::size_t l = 0; l < n; ++l) kernel.set_action(static_cast<int>(l), pi_star[static_cast<std::size_t>(d)]);
      kernel.run_macro();
      for (std::size_t l = 0; l < n; ++l) ret[l] += disc * kernel.macro_reward(static_cast<int>(l));
      disc *= gamma;
    }
    for (std::size_t l = 0; l < n; ++l) {
      CandidateTrajectory& c = out[first + l];
      c.scenario = scenarios[first + l];
      c.start = world.ego();
      c.states = std::move(rec.states[l]);
      c.accel = std::move(rec.accel[l]);
      c.own_return = ret[l];
    }
  }
  return out;
}

CandidateTrajectory reference_candidate(const PlanningWorld& world, std::span<const int> pi_star,
                                        std::size_t scenario) {
  check_pi(world, pi_star);
  const ModelParams& prm = world.params();
  const ScenarioFrames& frames = world.scenario(scenario).frames;
  const ReferencePath& road = world.road();
  const Vec2 o = road.vertex(0);
  const double rc = road.segment_cos(0);
  const double rsn = road.segment_sin(0);
  const auto& offsets = world.lane_offsets();
  const double half_lane = 0.5 * prm.lane_width;
  const double ehl = prm.vehicle.half_length;
  const double ehw = prm.vehicle.half_width;

  CandidateTrajectory c;
  c.scenario = scenario;
  c.start = world.ego();
  EgoState cur = world.ego();
  bool alive = true;
  double disc = 1.0;
  std::size_t frame = 0;
  for (int depth = 0; depth < prm.depth; ++depth) {
    const MacroAction& a = world.actions()[static_cast<std::size_t>(pi_star[static_cast<std::size_t>(depth)])];
    double rs, rd;
    road_coords(cur.x, cur.y, o.x, o.y, rc, rsn, rs, rd);
    const int current = nearest_lane(rd, offsets);
    int path = a.path_id;
    if (path != current) {
      const LaneChangeContext ctx =
          lane_change_context(frames, frame, rs, cur.speed, offsets[static_cast<std::size_t>(current)],
                              offsets[static_cast<std::size_t>(path)], half_lane, ehl);
      if (!mobil_feasible(ctx, prm.mobil, prm.idm)) path = current;
    }
    const double center = offsets[static_cast<std::size_t>(path)];
    double macro = 0.0;
    for (int k = 0; k < prm.steps_per_action; ++k) {
      road_coords(cur.x, cur.y, o.x, o.y, rc, rsn, rs, rd);
      const LeaderInfo leader = find_leader(frames, frame, rs, center, half_lane, ehl);
      const StepResult st = step_ego(cur, world.paths()[static_cast<std::size_t>(path)], a.nudge, leader, prm);
      const double progress = (st.next.x - cur.x) * rc + (st.next.y - cur.y) * rsn;
      bool hit = false;
      const Obb ego_box{st.next.x, st.next.y, st.next.heading, ehl, ehw};
      for (std::size_t j = 0; j < frames.agent_count() && !hit; ++j) {
        const AgentState ag = frames.state(frame + 1, j);
        hit = obb_overlap(ego_box, {ag.x, ag.y, ag.heading, ag.half_length, ag.half_width});
      }
      if (alive) macro += reward_law(hit, progress, st.accel, prm.reward);
      if (hit) alive = false;
      c.states.push_back(st.next);
      c.accel.push_back(st.accel);
      cur = st.next;
      ++frame;
    }
    c.own_return += disc * macro;
    disc *= prm.reward.gamma;
  }
  return c;
}

EvaluationBlock cross_evaluate_block(const PlanningWorld& world, std::span<const CandidateTrajectory> candidates,
                                     std::span<const std::size_t> scenarios) {
  if (candidates.size() != scenarios.size()) throw std::invalid_argument("candidate and scenario counts differ");
  const ModelParams& prm = world.params();
  const std::size_t n = scenarios.size();
  const int steps = prm.horizon_steps();
  for (const CandidateTrajectory& c : candidates) {
    if (c.states.size() != static_cast<std::size_t>(steps) || c.accel.size() != c.states.size()) {
      throw std::invalid_argument("candidate length differs from the horizon");
    }
  }
  const ReferencePath& road = world.road();
  const double rox = road.vertex(0).x;
  const double roy = road.vertex(0).y;
  const double rc = road.segment_cos(0);
  const double rsn = road.segment_sin(0);
  const double ehl = prm.vehicle.half_length;
  const double ehw = prm.vehicle.half_width;

  EvaluationBlock block;
  block.scenarios.assign(scenarios.begin(), scenarios.end());
  block.values.assign(n * n, 0.0);

  std::vector<double> px(n), py(n), pcos(n), psin(n), prog(n), acc(n);
  std::vector<double> bmin_s(n), bmax_s(n), bmin_d(n), bmax_d(n);
  std::vector<double> macro(n), alive(n), disc(n), hit(n);
  std::vector<int> found;
  std::vector<std::size_t> pair_k, pair_j;
  SatLanes sat;
  std::uint8_t flags[kSatWidth];

  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t scen = scenarios[i];
    std::fill(macro.begin(), macro.end(), 0.0);
    std::fill(alive.begin(), alive.end(), 1.0);
    std::fill(disc.begin(), disc.end(), 1.0);
    for (int t = 0; t < steps; ++t) {
      const auto ts = static_cast<std::size_t>(t);
      // Every candidate's ego pose at this step is tested against scenario i.
      for (std::size_t k = 0; k < n; ++k) {
        const EgoState& prev = t == 0 ? candidates[k].start : candidates[k].states[ts - 1];
        const EgoState& cur = candidates[k].states[ts];
        px[k] = cur.x;
        py[k] = cur.y;
        fmath::sin_cos(cur.heading, psin[k], pcos[k]);
        prog[k] = (cur.x - prev.x) * rc + (cur.y - prev.y) * rsn;
        acc[k] = candidates[k].accel[ts];
      }
#pragma omp simd
      for (std::size_t k = 0; k < n; ++k) {
        double s_new, d_new, s_ext, d_ext;
        road_coords(px[k], py[k], rox, roy, rc, rsn, s_new, d_new);
        frenet_extents(pcos[k] * rc + psin[k] * rsn, psin[k] * rc - pcos[k] * rsn, ehl, ehw, s_ext, d_ext);
        bmin_s[k] = s_new - s_ext;
        bmax_s[k] = s_new + s_ext;
        bmin_d[k] = d_new - d_ext;
        bmax_d[k] = d_new + d_ext;
      }
      const StrTree& tree = world.str_tree(scen, t / prm.steps_per_action);
      pair_k.clear();
      pair_j.clear();
      for (std::size_t k = 0; k < n; ++k) {
        hit[k] = 0.0;
        found.clear();
        tree.query({bmin_s[k], bmax_s[k], bmin_d[k], bmax_d[k]}, found);
        for (int id : found) {
          pair_k.push_back(k);
          pair_j.push_back(static_cast<std::size_t>(id));
        }
      }
      const std::size_t base = world.frame_base(scen, ts + 1);
      for (std::size_t p0 = 0; p0 < pair_k.size(); p0 += kSatWidth) {
        sat.clear();
        const std::size_t m = std::min<std::size_t>(kSatWidth, pair_k.size() - p0);
        for (std::size_t q = 0; q < m; ++q) {
          const std::size_t k = pair_k[p0 + q];
          const std::size_t j = pair_j[p0 + q];
          const std::size_t a = base + j;
          sat.set_ego(static_cast<int>(q), px[k], py[k], pcos[k], psin[k], ehl, ehw);
          sat.set_agent(static_cast<int>(q), world.ax[a], world.ay[a], world.ac[a], world.as[a],
                        world.a_half_length[j], world.a_half_width[j]);
          sat.active[q] = 1.0;
        }
        sat_kernel(sat, flags);
        for (std::size_t q = 0; q < m; ++q) {
          if (flags[q]) hit[pair_k[p0 + q]] = 1.0;
        }
      }
      block.pairs += pair_k.size();
      for (std::size_t k = 0; k < n; ++k) {
        const bool crash = hit[k] != 0.0;
        if (alive[k] != 0.0) macro[k] += reward_law(crash, prog[k], acc[k], prm.reward);
        if (crash) alive[k] = 0.0;
      }
      if ((t + 1) % prm.steps_per_action == 0) {
        for (std::size_t k = 0; k < n; ++k) {
          block.values[k * n + i] += disc[k] * macro[k];
          disc[k] *= prm.reward.gamma;
          macro[k] = 0.0;
        }
      }
    }
  }
  return block;
}

double reference_trajectory_value(const PlanningWorld& world, const CandidateTrajectory& tau, std::size_t scenario) {
  const ModelParams& prm = world.params();
  const ScenarioFrames& frames = world.scenario(scenario).frames;
  const ReferencePath& road = world.road();
  const double rc = road.segment_cos(0);
  const double rsn = road.segment_sin(0);
  double value = 0.0;
  double disc = 1.0;
  double macro = 0.0;
  bool alive = true;
  for (std::size_t t = 0; t < tau.states.size(); ++t) {
    const EgoState& prev = t == 0 ? tau.start : tau.states[t - 1];
    const EgoState& cur = tau.states[t];
    bool hit = false;
    const Obb ego_box{cur.x, cur.y, cur.heading, prm.vehicle.half_length, prm.vehicle.half_width};
    for (std::size_t j = 0; j < frames.agent_count() && !hit; ++j) {
      const AgentState ag = frames.state(t + 1, j);
      hit = obb_overlap(ego_box, {ag.x, ag.y, ag.heading, ag.half_length, ag.half_width});
    }
    const double progress = (cur.x - prev.x) * rc + (cur.y - prev.y) * rsn;
    if (alive) macro += reward_law(hit, progress, tau.accel[t], prm.reward);
    if (hit) alive = false;
    if ((t + 1) % static_cast<std::size_t>(prm.steps_per_action) == 0) {
      value += disc * macro;
      disc *= prm.reward.gamma;
      macro = 0.0;
    }
  }
  return value;
}

double snis_value(std::span<const double> values, std::span<const double> weights) {
  if (values.size() != weights.size()) throw std::invalid_argument("values and weights differ in length");
  double num = 0.0;
  double den = 0.0;
  for (std::size_t i = 0; i < values.size(); ++i) {
    num += weights[i] * values[i];
    den += weights[i];
  }
  if (!(den > 0.0)) throw std::invalid_argument("importance weights sum to zero");
  return num / den;
}

TrajectoryChoice select_trajectory(std::span<const EvaluationBlock> blocks,
                                   std::span<const std::vector<double>> weights, std::vector<double>* scores) {
  if (blocks.size() != weights.size()) throw std::invalid_argument("one weight vector per block required");
  TrajectoryChoice best;
  bool have = false;
  std::vector<double> row;
  if (scores != nullptr) scores->clear();
  for (std::size_t b = 0; b < blocks.size(); ++b) {
    const EvaluationBlock& blk = blocks[b];
    const std::size_t n = blk.size();
    if (weights[b].size() != n) throw std::invalid_argument("weight vector size differs from block");
    for (std::size_t k = 0; k < n; ++k) {
      row.assign(blk.values.begin() + static_cast<std::ptrdiff_t>(k * n),
                 blk.values.begin() + static_cast<std::ptrdiff_t>((k + 1) * n));
      const double score = snis_value(row, weights[b]);
      if (scores != nullptr) scores->push_back(score);
      const std::size_t id = blk.scenarios[k];
      if (!have || score > best.score || (score == best.score && id < best.scenario)) {
        best = {b, k, id, score};
        have = true;
      }
    }
  }
  if (!have) throw std::invalid_argument("no candidate trajectories");
  return best;
}

TrajOptResult optimize_trajectory(const PlanningWorld& world, std::span<const double> weights,
                                  std::span<const int> pi_star, const TrajOptConfig& config) {
  const double t0 = now_ms();
  check_pi(world, pi_star);
  const std::size_t k_total = world.scenario_count();
  if (weights.size() != k_total) throw std::invalid_argument("one weight per scenario required");
  if (config.batch_width < 1 || config.workers < 1) throw std::invalid_argument("counts must be at least 1");
  const auto width = static_cast<std::size_t>(config.batch_width);
  const std::size_t nblocks = (k_total + width - 1) / width;

  TrajOptResult result;
  result.blocks.resize(nblocks);
  result.weights.resize(nblocks);
  std::vector<std::vector<CandidateTrajectory>> cands(nblocks);
  auto work = [&](std::size_t b) {
    std::vector<std::size_t> ids;
    for (std::size_t k = b * width; k < std::min(k_total, (b + 1) * width); ++k) ids.push_back(k);
    cands[b] = generate_candidates(world, pi_star, ids);
    result.blocks[b] = cross_evaluate_block(world, cands[b], ids);
    for (std::size_t k : ids) result.weights[b].push_back(weights[k]);
  };
  const std::size_t workers = std::min<std::size_t>(static_cast<std::size_t>(config.workers), nblocks);
  if (workers <= 1) {
    for (std::size_t b = 0; b < nblocks; ++b) work(b);
  } else {
    std::vector<std::jthread> threads;
    for (std::size_t m = 0; m < workers; ++m) {
      threads.emplace_back([&, m] {
        for (std::size_t b = m; b < nblocks; b += workers) work(b);
      });
    }
  }
  result.choice = select_trajectory(result.blocks, result.weights, &result.scores);
  for (auto& c : cands) {
    for (auto& t : c) result.candidates.push_back(std::move(t));
  }
  result.best = result.candidates[result.choice.block * width + result.choice.candidate];
  result.wall_ms = now_ms() - t0;
  return result;
}

TrajOptResult optimize_trajectory(const PlanningProblem& problem, std::span<const int> pi_star,
                                  std::size_t scenarios, const TrajOptConfig& config) {
  problem.validate();
  const ReferencePath road = road_path(problem.road);
  const std::vector<ReferencePath> paths = candidate_paths(problem.road);
  ScenarioSettings settings;
  settings.dt = problem.params.dt;
  settings.steps = problem.params.horizon_steps();
  settings.road = &road;
  const auto flags = hazard_flags(problem.belief, paths[0], settings.dt, settings.steps);
  std::vector<std::size_t> critical;
  for (std::size_t j = 0; j < flags.size(); ++j) {
    if (std::any_of(flags[j].begin(), flags[j].end(), [](std::uint8_t f) { return f != 0; })) critical.push_back(j);
  }
  const ProposalDistribution q = build_proposal(problem.belief, critical, flags, config.tilt);
  auto drawn = resample_with_proposal(problem.belief, q, problem.ego, scenarios, config.seed, settings);
  std::vector<Scenario> scs;
  std::vector<double> weights;
  for (auto& ws : drawn) {
    weights.push_back(ws.weight);
    scs.push_back(std::move(ws.scenario));
  }
  const PlanningWorld world(problem, std::move(scs));
  return optimize_trajectory(world, weights, pi_star, config);
}

void write_blocks_csv(std::ostream& os, const TrajOptResult& result) {
  os << "block,candidate_scenario,eval_scenario,weight,value\n";
  const auto prec = os.precision(17);
  for (std::size_t b = 0; b < result.blocks.size(); ++b) {
    const EvaluationBlock& blk = result.blocks[b];
    for (std::size_t k = 0; k < blk.size(); ++k) {
      for (std::size_t i = 0; i < blk.size(); ++i) {
        os << b << ',' << blk.scenarios[k] << ',' << blk.scenarios[i] << ',' << result.weights[b][i] << ','
           << blk.at(k, i) << '\n';
      }
    }
  }
  os.precision(prec);
}

}  // namespace vecqmdp
