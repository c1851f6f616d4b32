#pragma once

// Synthetic scenes, closed-loop episodes, the serial reference planner and
// the throughput benchmark.

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include <json.hpp>

#include "vecqmdp/qmdp_search.hpp"
#include "vecqmdp/traj_opt.hpp"

namespace vecqmdp {

inline constexpr int kSceneFormatVersion = 1;

enum class Layout { highway, crossing };

std::string to_string(Layout layout);
Layout layout_from_string(const std::string& name);

struct SceneSpec {
  int format_version = kSceneFormatVersion;
  Layout layout = Layout::highway;
  int lane_count = 3;
  RoadLayout road;
  bool has_crossing = false;
  double crossing_x = 60.0;  // crossing road center, world x
  EgoState ego{0.0, 0.0, 0.0, 10.0};
  double goal_s = 1000.0;  // road-frame arc length of the goal
  std::vector<AgentBelief> agents;
  std::uint64_t seed = 0;

  /// Throws std::invalid_argument on a bad version, lane layout or invalid
  /// intention distributions.
  void validate() const;
};

/// Deterministic scene with `density` agents placed collision-free, each
/// with 1 to 3 intentions. Throws std::runtime_error("scene too dense") when
/// placement fails.
SceneSpec generate_scene(int density, Layout layout, std::uint64_t seed);

nlohmann::json scene_to_json(const SceneSpec& scene);
SceneSpec scene_from_json(const nlohmann::json& doc);
SceneSpec load_scene(const std::string& path);
void save_scene(const SceneSpec& scene, const std::string& path);

/// Planning problem for the scene at its initial state.
PlanningProblem make_problem(const SceneSpec& scene, const ModelParams& params = {});

// ---------------------------------------------------------------------------

struct EpisodeConfig {
  SearchConfig search;
  TrajOptConfig traj;
  ModelParams params;
  double duration = 15.0;       // s of simulated time
  double replan_period = 0.5;   // s of simulated time
  std::uint64_t seed = 1;       // true-world intention draw
  bool optimize_trajectory = true;
};

struct CollisionEvent {
  int step = 0;  // control step after which the overlap was observed
  int agent = 0;

  friend bool operator==(const CollisionEvent&, const CollisionEvent&) = default;
};

struct EpisodeResult {
  std::vector<EgoState> states;  // initial state, then one per control step
  std::vector<CollisionEvent> collisions;
  double progress = 0.0;         // m along the road
  bool completed = false;        // ran the full duration without collision
  bool collided = false;
  std::vector<double> plan_ms;   // per cycle, search plus trajectory stage
  std::vector<std::size_t> true_intentions;
};

/// Non-reactive true world: agents follow one intention drawn from the scene
/// belief for the whole episode.
EpisodeResult run_episode(const SceneSpec& scene, const EpisodeConfig& config);

/// Along-road distance an unobstructed ego covers in `duration` tracking its
/// lane under the same controllers.
double free_flow_progress(const SceneSpec& scene, const ModelParams& params, double duration);

/// Re-checks every recorded step against the true-world agents with
/// brute-force SAT; returns the collision events it finds.
std::vector<CollisionEvent> recheck_collisions(const SceneSpec& scene, const EpisodeConfig& config,
                                               const EpisodeResult& result);

void write_episode_csv(std::ostream& os, const EpisodeResult& result);

// ---------------------------------------------------------------------------

/// Scalar, pointer-based, single-threaded search with the same selection,
/// expansion and backup rules as Planner, visiting trees round-robin. With
/// an iteration budget it reproduces plan(W=1, M=1) exactly.
PlanResult serial_reference_plan(const PlanningWorld& world, const SearchConfig& config);
PlanResult serial_reference_plan(const PlanningProblem& problem, const SearchConfig& config);

enum class Variant { serial, single_worker_vectorized, full, lambda0, unbatched };

std::string to_string(Variant v);
Variant variant_from_string(const std::string& name);

struct ThroughputRecord {
  int density = 0;
  Variant variant = Variant::full;
  int repetition = 0;
  std::size_t scenarios = 0;
  int workers = 0;
  int batch_width = 0;
  double lambda = 0.0;
  std::uint64_t total_edges = 0;
  double wall_ms = 0.0;
  double edges_per_ms = 0.0;
  double imbalance = 0.0;          // lambda = 0 probe on the same world
  double mean_depth_spread = 0.0;  // of this run
  double speedup_vs_serial = 0.0;
  std::uint64_t recounted_edges = 0;  // sum of H - d over the expansion log
};

struct BenchmarkConfig {
  SearchConfig search;            // K, W, M, lambda of the full variant
  ModelParams params;
  Layout layout = Layout::highway;
  std::size_t iterations = 200;   // per minibatch; time budget unlimited
};

std::vector<ThroughputRecord> run_benchmark(const std::vector<int>& densities, const std::vector<Variant>& variants,
                                            int repetitions, std::uint64_t seed, const BenchmarkConfig& config);

std::string throughput_csv_header();
std::string throughput_csv_row(const ThroughputRecord& r);

/// Search settings of one benchmark variant derived from the full settings.
SearchConfig variant_config(Variant v, const SearchConfig& full);

}  // namespace vecqmdp
