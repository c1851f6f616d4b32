// Command-line front end: plan, episode, bench, ablate.

#include <cstdio>
#include <exception>
#include <stdexcept>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "vecqmdp/sim_harness.hpp"

using namespace vecqmdp;

namespace {

struct CommonOptions {
  std::string scene;
  std::vector<int> density;
  std::string layout = "highway";
  std::uint64_t seed = 1;
  int workers = 8;
  int batch_width = 8;
  std::size_t scenarios = 64;
  double lambda = 0.5;
  double time_budget_ms = 100.0;
  std::size_t iterations = 0;
  std::string output;
};

void add_common(CLI::App* cmd, CommonOptions& o) {
  cmd->add_option("--scene", o.scene, "Scene file (JSON); overrides --density");
  cmd->add_option("--density", o.density, "Agent count(s) for generated scenes");
  cmd->add_option("--layout", o.layout, "highway | crossing")->check(CLI::IsMember({"highway", "crossing"}));
  cmd->add_option("--seed", o.seed, "Seed for scene generation and sampling");
  cmd->add_option("--workers", o.workers, "Worker threads M")->check(CLI::PositiveNumber);
  cmd->add_option("--batch-width", o.batch_width, "Trees per minibatch W")->check(CLI::PositiveNumber);
  cmd->add_option("--scenarios", o.scenarios, "Scenario count K")->check(CLI::PositiveNumber);
  cmd->add_option("--lambda", o.lambda, "Load-balancing penalty weight")->check(CLI::NonNegativeNumber);
  cmd->add_option("--time-budget-ms", o.time_budget_ms, "Wall-clock search budget; 0 = root only, inf = none");
  cmd->add_option("--iterations", o.iterations, "Per-minibatch iteration cap (0 = none)");
  cmd->add_option("--output", o.output, "Output file (stdout when omitted)");
}

SearchConfig search_config(const CommonOptions& o) {
  SearchConfig c;
  c.scenarios = o.scenarios;
  c.workers = o.workers;
  c.batch_width = o.batch_width;
  c.lambda = o.lambda;
  c.time_budget_ms = o.time_budget_ms;
  c.max_iterations = o.iterations;
  c.seed = o.seed;
  c.validate();
  return c;
}

SceneSpec scene_of(const CommonOptions& o) {
  if (!o.scene.empty()) return load_scene(o.scene);
  const int density = o.density.empty() ? 15 : o.density.front();
  return generate_scene(density, layout_from_string(o.layout), o.seed);
}

/// Runs `body` against the chosen output stream.
template <class F>
void with_output(const std::string& path, F&& body) {
  if (path.empty()) {
    body(std::cout);
    return;
  }
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot open " + path);
  body(os);
}

int cmd_plan(const CommonOptions& o, const std::string& save_to) {
  const SceneSpec scene = scene_of(o);
  if (!save_to.empty()) save_scene(scene, save_to);
  const PlanResult r = plan(make_problem(scene), search_config(o));
  std::printf("pi_star:");
  for (int a : r.pi_star) std::printf(" %d", a);
  std::printf("\nbest_action: %d\nq_qmdp:", r.root.best_action);
  for (double q : r.root.q) std::printf(" %.6f", q);
  const SearchTelemetry& t = r.telemetry;
  std::printf("\nedges: %llu  wall_ms: %.3f  edges_per_ms: %.2f  imbalance: %.3f  mean_depth_spread: %.3f\n",
              static_cast<unsigned long long>(t.total_edges), t.wall_ms, t.edges_per_ms, t.imbalance,
              t.mean_depth_spread);
  if (!o.output.empty()) {
    with_output(o.output, [&](std::ostream& os) {
      os << telemetry_csv_header(r.root.q.size()) << '\n' << telemetry_csv_row(t) << '\n';
    });
  }
  return 0;
}

int cmd_episode(const CommonOptions& o, double duration, bool no_traj) {
  const SceneSpec scene = scene_of(o);
  EpisodeConfig cfg;
  cfg.search = search_config(o);
  cfg.traj.workers = o.workers;
  cfg.traj.batch_width = o.batch_width;
  cfg.traj.seed = o.seed;
  cfg.duration = duration;
  cfg.seed = o.seed;
  cfg.optimize_trajectory = !no_traj;
  const EpisodeResult r = run_episode(scene, cfg);
  with_output(o.output, [&](std::ostream& os) { write_episode_csv(os, r); });
  double mean_ms = 0.0;
  for (double ms : r.plan_ms) mean_ms += ms;
  if (!r.plan_ms.empty()) mean_ms /= static_cast<double>(r.plan_ms.size());
  std::fprintf(stderr, "progress %.3f m, %s, %zu cycles, mean cycle %.2f ms\n", r.progress,
               r.collided ? "collided" : (r.completed ? "completed" : "stopped"), r.plan_ms.size(), mean_ms);
  return r.collided ? 2 : 0;
}

int run_sweep(const CommonOptions& o, const std::vector<Variant>& variants, int repetitions,
              std::size_t iterations) {
  BenchmarkConfig cfg;
  cfg.search = search_config(o);
  cfg.layout = layout_from_string(o.layout);
  cfg.iterations = iterations;
  const std::vector<int> densities = o.density.empty() ? std::vector<int>{5, 15, 30, 60} : o.density;
  const auto records = run_benchmark(densities, variants, repetitions, o.seed, cfg);
  with_output(o.output, [&](std::ostream& os) {
    os << throughput_csv_header() << '\n';
    for (const auto& r : records) os << throughput_csv_row(r) << '\n';
  });
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Vectorized QMDP belief-tree planner"};
  app.require_subcommand(1);

  CommonOptions plan_o, ep_o, bench_o, ablate_o;

  auto* plan_cmd = app.add_subcommand("plan", "One planning cycle; prints pi* and telemetry");
  add_common(plan_cmd, plan_o);
  std::string save_scene_path;
  plan_cmd->add_option("--save-scene", save_scene_path, "Write the planned scene as JSON");

  auto* ep_cmd = app.add_subcommand("episode", "Closed-loop episode; writes the ego trace CSV");
  add_common(ep_cmd, ep_o);
  double duration = 15.0;
  bool no_traj = false;
  ep_cmd->add_option("--duration", duration, "Simulated seconds")->check(CLI::PositiveNumber);
  ep_cmd->add_flag("--no-trajectory-opt", no_traj, "Execute scenario 0's candidate instead");

  auto* bench_cmd = app.add_subcommand("bench", "Density sweep; writes throughput CSV");
  add_common(bench_cmd, bench_o);
  int bench_reps = 3;
  std::size_t bench_iters = 200;
  std::vector<std::string> bench_variants{"serial", "full"};
  bench_cmd->add_option("--repetitions", bench_reps, "Runs per (density, variant)")->check(CLI::PositiveNumber);
  bench_cmd->add_option("--bench-iterations", bench_iters, "Iterations per minibatch")->check(CLI::PositiveNumber);
  bench_cmd->add_option("--variants", bench_variants, "serial | single-worker-vectorized | full | lambda0 | unbatched");

  auto* ablate_cmd = app.add_subcommand("ablate", "Serial, single-worker-vectorized, full and lambda=0 variants");
  add_common(ablate_cmd, ablate_o);
  int ablate_reps = 3;
  std::size_t ablate_iters = 200;
  ablate_cmd->add_option("--repetitions", ablate_reps, "Runs per (density, variant)")->check(CLI::PositiveNumber);
  ablate_cmd->add_option("--bench-iterations", ablate_iters, "Iterations per minibatch")->check(CLI::PositiveNumber);

  CLI11_PARSE(app, argc, argv);

  try {
    if (*plan_cmd) return cmd_plan(plan_o, save_scene_path);
    if (*ep_cmd) return cmd_episode(ep_o, duration, no_traj);
    if (*bench_cmd) {
      std::vector<Variant> vs;
      for (const auto& n : bench_variants) vs.push_back(variant_from_string(n));
      return run_sweep(bench_o, vs, bench_reps, bench_iters);
    }
    if (*ablate_cmd) {
      return run_sweep(ablate_o, {Variant::serial, Variant::single_worker_vectorized, Variant::full, Variant::lambda0},
                       ablate_reps, ablate_iters);
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
