#pragma once

// Trajectory optimization after the tree search: importance-sampled
// scenarios tilted toward hazardous intentions, one candidate per scenario
// under the planned action sequence, block-diagonal cross evaluation and a
// self-normalized estimate per candidate.

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <span>
#include <vector>

#include "vecqmdp/qmdp_search.hpp"

namespace vecqmdp {

/// Half-width of the lateral corridor around the ego path, m.
inline constexpr double kCriticalCorridor = 3.5;

/// Trajectory enters the corridor or crosses the path.
bool trajectory_is_hazardous(std::span<const AgentState> states, const ReferencePath& ego_path,
                             double corridor = kCriticalCorridor);

/// Agents of one scenario whose predicted motion enters the corridor around
/// `ego_path` or crosses it. Sorted ids (agent indices).
std::vector<std::size_t> identify_critical_agents(const Scenario& scenario, const ReferencePath& ego_path,
                                                  double corridor = kCriticalCorridor);

/// Per-intention hazard flags of every agent in the belief.
std::vector<std::vector<std::uint8_t>> hazard_flags(const Belief& belief, const ReferencePath& ego_path,
                                                    double dt, int steps, double corridor = kCriticalCorridor);

struct ProposalDistribution {
  std::vector<std::vector<double>> q;                 // [agent][intention]
  std::vector<std::uint8_t> critical;                 // per agent
  std::vector<std::vector<std::uint8_t>> hazardous;   // [agent][intention]

  /// Throws std::invalid_argument when q is zero where b is not, or a row
  /// does not sum to 1.
  void check_against(const Belief& belief) const;
};

/// q = (1 - tilt) b + tilt b|hazardous for critical agents with hazardous
/// mass; q = b elsewhere. tilt must lie in [0, 1).
ProposalDistribution build_proposal(const Belief& belief, std::span<const std::size_t> critical_agents,
                                    std::span<const std::vector<std::uint8_t>> hazardous, double tilt);

struct WeightedScenario {
  Scenario scenario;
  double weight = 1.0;
};

/// Product over agents of b / q for one intention assignment.
double importance_weight(const Belief& belief, const ProposalDistribution& proposal,
                         std::span<const std::size_t> choice);

/// K scenarios drawn from q with their importance weights.
std::vector<WeightedScenario> resample_with_proposal(const Belief& belief, const ProposalDistribution& proposal,
                                                     const EgoState& ego, std::size_t count, std::uint64_t seed,
                                                     const ScenarioSettings& settings);

struct CandidateTrajectory {
  std::size_t scenario = 0;
  EgoState start;
  std::vector<EgoState> states;  // after each control step
  std::vector<double> accel;     // per control step
  double own_return = 0.0;       // discounted return in its own scenario
};

/// Forward-simulates pi_star on each listed scenario with the batch kernel.
/// Lanes keep driving after a collision; reward stops at the first one.
std::vector<CandidateTrajectory> generate_candidates(const PlanningWorld& world, std::span<const int> pi_star,
                                                     std::span<const std::size_t> scenarios);

/// Scalar counterpart of generate_candidates for one scenario.
CandidateTrajectory reference_candidate(const PlanningWorld& world, std::span<const int> pi_star,
                                        std::size_t scenario);

struct EvaluationBlock {
  std::vector<std::size_t> scenarios;  // minibatch members, in order
  std::vector<double> values;          // row-major [candidate][scenario]
  std::uint64_t pairs = 0;

  std::size_t size() const { return scenarios.size(); }
  double at(std::size_t candidate, std::size_t scenario) const { return values[candidate * size() + scenario]; }
};

/// V(tau_k | phi_i) for every candidate k and scenario i of one minibatch.
EvaluationBlock cross_evaluate_block(const PlanningWorld& world, std::span<const CandidateTrajectory> candidates,
                                     std::span<const std::size_t> scenarios);

/// Discounted return of a fixed ego trajectory against one scenario.
double reference_trajectory_value(const PlanningWorld& world, const CandidateTrajectory& tau, std::size_t scenario);

/// sum(w v) / sum(w). Throws when the weights sum to zero.
double snis_value(std::span<const double> values, std::span<const double> weights);

struct TrajectoryChoice {
  std::size_t block = 0;
  std::size_t candidate = 0;  // index within the block
  std::size_t scenario = 0;
  double score = 0.0;
};

/// Scores every candidate with the SNIS estimate inside its own block and
/// returns the best; ties go to the lowest scenario id. `weights[b][i]`
/// belongs to block b's i-th scenario.
TrajectoryChoice select_trajectory(std::span<const EvaluationBlock> blocks,
                             std::span<const std::vector<double>> weights, std::vector<double>* scores = nullptr);

struct TrajOptConfig {
  int batch_width = 8;
  int workers = 8;
  double tilt = 0.5;
  std::uint64_t seed = 1;
};

struct TrajOptResult {
  CandidateTrajectory best;
  TrajectoryChoice choice;
  std::vector<EvaluationBlock> blocks;
  std::vector<std::vector<double>> weights;  // per block
  std::vector<double> scores;                // per candidate, block-major
  std::vector<CandidateTrajectory> candidates;
  double wall_ms = 0.0;
};

/// Full stage on an already weighted scenario world.
TrajOptResult optimize_trajectory(const PlanningWorld& world, std::span<const double> weights,
                                  std::span<const int> pi_star, const TrajOptConfig& config);

/// Resamples from the tilted proposal, then runs optimize_trajectory.
TrajOptResult optimize_trajectory(const PlanningProblem& problem, std::span<const int> pi_star,
                                  std::size_t scenarios, const TrajOptConfig& config);

/// CSV: block,candidate_scenario,eval_scenario,weight,value
void write_blocks_csv(std::ostream& os, const TrajOptResult& result);

}  // namespace vecqmdp
