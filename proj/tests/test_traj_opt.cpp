#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <numeric>
#include <sstream>

#include "search_fixtures.hpp"
#include "vecqmdp/traj_opt.hpp"

using namespace vecqmdp;
using fixture::random_problem;

namespace {

ScenarioSettings settings_for(const PlanningProblem& p, const ReferencePath& road) {
  ScenarioSettings s;
  s.dt = p.params.dt;
  s.steps = p.params.horizon_steps();
  s.road = &road;
  return s;
}

/// Straight road along +x: lateral offset is y, so the hazard test is a
/// plain threshold and sign-change scan.
bool straight_road_hazard(std::span<const AgentState> states, double corridor) {
  for (std::size_t f = 0; f < states.size(); ++f) {
    if (std::fabs(states[f].y) < corridor) return true;
    if (f > 0 && (states[f - 1].y < 0.0) != (states[f].y < 0.0)) return true;
  }
  return false;
}

std::vector<int> keep_plan(const PlanningProblem& p) {
  return std::vector<int>(static_cast<std::size_t>(p.params.depth), 1);
}

}  // namespace

TEST_CASE("tilted proposal") {
  Belief belief;
  AgentBelief a;
  a.intentions = {fixture::keep_at(8.0, 0.9), fixture::cut_in(8.0, -3.5, 0.0, 0.1)};
  belief.agents = {a};
  const std::vector<std::vector<std::uint8_t>> hazard{{0, 1}};
  const std::vector<std::size_t> critical{0};

  SUBCASE("reference example") {
    const ProposalDistribution q = build_proposal(belief, critical, hazard, 4.0 / 9.0);
    CHECK(q.q[0][0] == doctest::Approx(0.5).epsilon(1e-15));
    CHECK(q.q[0][1] == doctest::Approx(0.5).epsilon(1e-15));
    const std::vector<std::size_t> pick{1};
    CHECK(importance_weight(belief, q, pick) == doctest::Approx(0.2).epsilon(1e-14));
    CHECK_NOTHROW(q.check_against(belief));
  }
  SUBCASE("zero tilt keeps the belief") {
    const ProposalDistribution q = build_proposal(belief, critical, hazard, 0.0);
    CHECK(q.q[0] == std::vector<double>{0.9, 0.1});
  }
  SUBCASE("non-critical agents keep the belief") {
    const ProposalDistribution q = build_proposal(belief, std::vector<std::size_t>{}, hazard, 0.5);
    CHECK(q.q[0] == std::vector<double>{0.9, 0.1});
  }
  SUBCASE("zero-probability intentions stay at zero") {
    Belief z = belief;
    z.agents[0].intentions = {fixture::keep_at(8.0, 0.7), fixture::cut_in(8.0, -3.5, 0.0, 0.3), fixture::cut_in(8.0, -3.5, 1.0, 0.0)};
    const std::vector<std::vector<std::uint8_t>> hz{{0, 1, 1}};
    const ProposalDistribution q = build_proposal(z, critical, hz, 0.5);
    CHECK(q.q[0][2] == 0.0);
    CHECK(q.q[0][0] + q.q[0][1] == doctest::Approx(1.0).epsilon(1e-15));
    CHECK(q.q[0][1] == doctest::Approx(0.65).epsilon(1e-15));
  }
  SUBCASE("invalid inputs") {
    CHECK_THROWS_AS(build_proposal(belief, critical, hazard, 1.0), std::invalid_argument);
    CHECK_THROWS_AS(build_proposal(belief, critical, hazard, -0.1), std::invalid_argument);
    const std::vector<std::vector<std::uint8_t>> short_row{{0}};
    CHECK_THROWS_AS(build_proposal(belief, critical, short_row, 0.5), std::invalid_argument);
    ProposalDistribution bad;
    bad.q = {{1.0, 0.0}};
    CHECK_THROWS_AS(bad.check_against(belief), std::invalid_argument);
  }
}

TEST_CASE("importance weights") {
  Belief belief;
  AgentBelief a, b;
  a.intentions = {fixture::keep_at(5.0, 0.25), fixture::keep_at(6.0, 0.75)};
  b.intentions = {fixture::keep_at(5.0, 0.2), fixture::keep_at(6.0, 0.8)};
  belief.agents = {a, b};
  ProposalDistribution q;
  q.q = {{0.5, 0.5}, {0.5, 0.5}};
  const std::vector<std::size_t> both_first{0, 0};
  CHECK(importance_weight(belief, q, both_first) == doctest::Approx(0.2).epsilon(1e-15));
  ProposalDistribution same;
  same.q = {{0.25, 0.75}, {0.2, 0.8}};
  for (std::size_t i = 0; i < 2; ++i) {
    for (std::size_t j = 0; j < 2; ++j) {
      const std::vector<std::size_t> c{i, j};
      CHECK(importance_weight(belief, same, c) == 1.0);
    }
  }
  const std::vector<std::size_t> one{0};
  CHECK_THROWS_AS(importance_weight(belief, q, one), std::invalid_argument);
}

TEST_CASE("critical agents") {
  PlanningProblem p;
  const ReferencePath road = road_path(p.road);
  const std::vector<ReferencePath> paths = candidate_paths(p.road);
  const ScenarioSettings s = settings_for(p, road);
  Belief belief;
  AgentBelief far;
  far.state = AgentState{20.0, 7.0, 0.0, 8.0, 2.4, 1.0};
  far.intentions = {fixture::keep_at(8.0, 1.0)};
  AgentBelief crossing;
  crossing.state = AgentState{30.0, -12.0, std::numbers::pi / 2, 6.0, 2.4, 1.0};
  crossing.intentions = {fixture::keep_at(6.0, 1.0)};
  AgentBelief ahead;
  ahead.state = AgentState{15.0, 0.0, 0.0, 8.0, 2.4, 1.0};
  ahead.intentions = {fixture::keep_at(8.0, 1.0)};
  belief.agents = {far, crossing, ahead};
  const std::vector<std::size_t> choice{0, 0, 0};
  const Scenario sc = make_scenario(belief, EgoState{}, choice, 0, s);
  CHECK(identify_critical_agents(sc, paths[0]) == std::vector<std::size_t>{1, 2});

  const auto flags = hazard_flags(belief, paths[0], s.dt, s.steps);
  CHECK(flags == std::vector<std::vector<std::uint8_t>>{{0}, {1}, {1}});

  for (std::uint64_t seed = 0; seed < 40; ++seed) {
    PlanningProblem rp = random_problem(seed, 12);
    Rng rng(seed, 0xc);
    for (AgentBelief& ab : rp.belief.agents) ab.state.y += rng.uniform(-2.0, 2.0);
    const auto scs = sample_scenarios(rp.belief, rp.ego, 4, seed, s);
    for (const Scenario& scn : scs) {
      std::vector<std::size_t> expect;
      for (std::size_t j = 0; j < scn.agent_count(); ++j) {
        std::vector<AgentState> st;
        for (std::size_t f = 0; f < scn.frames.frame_count(); ++f) st.push_back(scn.frames.state(f, j));
        if (straight_road_hazard(st, kCriticalCorridor)) expect.push_back(j);
      }
      REQUIRE(identify_critical_agents(scn, paths[0]) == expect);
    }
  }
}

TEST_CASE("candidates match the scalar reference") {
  for (std::uint64_t seed = 0; seed < 6; ++seed) {
    const PlanningProblem p = random_problem(seed, 15);
    const PlanningWorld w = PlanningWorld::sample(p, 11, seed);
    Rng rng(seed, 0xd);
    std::vector<int> pi;
    for (int d = 0; d < p.params.depth; ++d) pi.push_back(static_cast<int>(rng.below(9)));
    std::vector<std::size_t> ids(11);
    std::iota(ids.begin(), ids.end(), 0);
    const auto cands = generate_candidates(w, pi, ids);
    REQUIRE(cands.size() == 11);
    for (std::size_t k = 0; k < ids.size(); ++k) {
      const CandidateTrajectory ref = reference_candidate(w, pi, k);
      REQUIRE(cands[k].scenario == k);
      REQUIRE(cands[k].start == ref.start);
      REQUIRE(cands[k].states == ref.states);
      REQUIRE(cands[k].accel == ref.accel);
      REQUIRE(cands[k].own_return == ref.own_return);
      REQUIRE(cands[k].states.size() == static_cast<std::size_t>(p.params.horizon_steps()));
    }
  }
  const PlanningProblem p = random_problem(1, 3);
  const PlanningWorld w = PlanningWorld::sample(p, 2, 1);
  const std::vector<std::size_t> ids{0, 1};
  CHECK_THROWS_AS(generate_candidates(w, std::vector<int>{}, ids), std::invalid_argument);
  CHECK_THROWS_AS(generate_candidates(w, std::vector<int>{1}, ids), std::invalid_argument);
  CHECK_THROWS_AS(generate_candidates(w, std::vector<int>(4, 9), ids), std::out_of_range);
}

TEST_CASE("cross evaluation matches the scalar reference") {
  for (std::uint64_t seed = 0; seed < 6; ++seed) {
    const PlanningProblem p = seed % 2 ? fixture::merge_problem() : random_problem(seed, 25, 80.0);
    const PlanningWorld w = PlanningWorld::sample(p, 8, seed);
    std::vector<std::size_t> ids(8);
    std::iota(ids.begin(), ids.end(), 0);
    const auto cands = generate_candidates(w, keep_plan(p), ids);
    const EvaluationBlock blk = cross_evaluate_block(w, cands, ids);
    REQUIRE(blk.size() == 8);
    for (std::size_t k = 0; k < 8; ++k) {
      for (std::size_t i = 0; i < 8; ++i) REQUIRE(blk.at(k, i) == reference_trajectory_value(w, cands[k], i));
      // A candidate evaluated in its own scenario reproduces its own return.
      REQUIRE(blk.at(k, k) == doctest::Approx(cands[k].own_return).epsilon(1e-12));
    }
  }
  SUBCASE("single-member block") {
    const PlanningProblem p = fixture::merge_problem();
    const PlanningWorld w = PlanningWorld::sample(p, 3, 2);
    const std::vector<std::size_t> ids{2};
    const auto cands = generate_candidates(w, keep_plan(p), ids);
    const EvaluationBlock blk = cross_evaluate_block(w, cands, ids);
    CHECK(blk.values.size() == 1);
    CHECK(blk.at(0, 0) == reference_trajectory_value(w, cands[0], 2));
  }
  SUBCASE("identical scenarios give identical columns") {
    PlanningProblem p = fixture::merge_problem();
    for (AgentBelief& a : p.belief.agents) a.intentions = {a.intentions[1]};
    for (AgentBelief& a : p.belief.agents) a.intentions[0].probability = 1.0;
    const PlanningWorld w = PlanningWorld::sample(p, 4, 3);
    std::vector<std::size_t> ids{0, 1, 2, 3};
    const auto cands = generate_candidates(w, keep_plan(p), ids);
    const EvaluationBlock blk = cross_evaluate_block(w, cands, ids);
    for (std::size_t k = 0; k < 4; ++k) {
      for (std::size_t i = 0; i < 4; ++i) CHECK(blk.at(k, i) == blk.at(0, 0));
    }
  }
  SUBCASE("size mismatch") {
    const PlanningProblem p = fixture::merge_problem();
    const PlanningWorld w = PlanningWorld::sample(p, 2, 2);
    const std::vector<std::size_t> ids{0, 1};
    const auto cands = generate_candidates(w, keep_plan(p), ids);
    const std::vector<std::size_t> one{0};
    CHECK_THROWS_AS(cross_evaluate_block(w, cands, one), std::invalid_argument);
  }
}

TEST_CASE("self-normalized estimate") {
  CHECK(snis_value(std::vector<double>{2.0, 1.0, 1.0}, std::vector<double>{1.0, 0.0, 0.0}) == 2.0);
  CHECK(snis_value(std::vector<double>{2.0, 1.0, 1.0}, std::vector<double>{1.0, 1.0, 2.0}) == 1.25);
  CHECK(snis_value(std::vector<double>{3.0, 5.0}, std::vector<double>{0.5, 0.5}) == 4.0);
  CHECK_THROWS_AS(snis_value(std::vector<double>{1.0}, std::vector<double>{0.0}), std::invalid_argument);
  CHECK_THROWS_AS(snis_value(std::vector<double>{1.0}, std::vector<double>{1.0, 1.0}), std::invalid_argument);
  Rng rng(8, 8);
  for (int rep = 0; rep < 200; ++rep) {
    std::vector<double> v(16), w(16);
    long double num = 0, den = 0;
    for (std::size_t i = 0; i < 16; ++i) {
      v[i] = rng.uniform(-500.0, 100.0);
      w[i] = rng.uniform(0.0, 3.0);
      num += static_cast<long double>(v[i]) * w[i];
      den += w[i];
    }
    const double s = snis_value(v, w);
    REQUIRE(s == doctest::Approx(static_cast<double>(num / den)).epsilon(1e-12));
    // Scale invariance of the weights.
    for (double& x : w) x *= 7.0;
    REQUIRE(snis_value(v, w) == doctest::Approx(s).epsilon(1e-12));
  }
}

TEST_CASE("trajectory selection") {
  EvaluationBlock a;
  a.scenarios = {0, 1};
  a.values = {1.0, 3.0, 2.0, 2.0};  // candidate 0: (1, 3); candidate 1: (2, 2)
  EvaluationBlock b;
  b.scenarios = {2};
  b.values = {1.5};
  const std::vector<EvaluationBlock> blocks{a, b};

  SUBCASE("uniform weights tie at the lowest scenario") {
    const std::vector<std::vector<double>> w{{1.0, 1.0}, {1.0}};
    std::vector<double> scores;
    const TrajectoryChoice c = select_trajectory(blocks, w, &scores);
    CHECK(scores == std::vector<double>{2.0, 2.0, 1.5});
    CHECK(c.scenario == 0);
    CHECK(c.block == 0);
    CHECK(c.candidate == 0);
  }
  SUBCASE("weights shift the choice") {
    const std::vector<std::vector<double>> w{{3.0, 1.0}, {1.0}};
    const TrajectoryChoice c = select_trajectory(blocks, w);
    CHECK(c.scenario == 1);
    CHECK(c.score == 2.0);
  }
  SUBCASE("errors") {
    const std::vector<std::vector<double>> w{{1.0}};
    CHECK_THROWS_AS(select_trajectory(blocks, w), std::invalid_argument);
    const std::vector<std::vector<double>> bad{{1.0}, {1.0}};
    CHECK_THROWS_AS(select_trajectory(blocks, bad), std::invalid_argument);
    CHECK_THROWS_AS(select_trajectory(std::vector<EvaluationBlock>{}, std::vector<std::vector<double>>{}),
                    std::invalid_argument);
  }
}

TEST_CASE("full stage") {
  const PlanningProblem p = fixture::merge_problem();
  const PlanningWorld w = PlanningWorld::sample(p, 20, 5);
  std::vector<double> weights(20);
  Rng rng(5, 5);
  for (double& x : weights) x = rng.uniform(0.1, 2.0);
  TrajOptConfig cfg;
  cfg.batch_width = 8;
  cfg.workers = 1;
  const TrajOptResult one = optimize_trajectory(w, weights, keep_plan(p), cfg);
  cfg.workers = 3;
  const TrajOptResult three = optimize_trajectory(w, weights, keep_plan(p), cfg);

  REQUIRE(one.blocks.size() == 3);
  CHECK(one.blocks[2].size() == 4);
  CHECK(one.scores == three.scores);
  CHECK(one.choice.scenario == three.choice.scenario);
  CHECK(one.candidates.size() == 20);
  CHECK(one.best.states == reference_candidate(w, keep_plan(p), one.choice.scenario).states);
  std::size_t idx = 0;
  double best = -kInf;
  for (std::size_t b = 0; b < one.blocks.size(); ++b) {
    const EvaluationBlock& blk = one.blocks[b];
    for (std::size_t k = 0; k < blk.size(); ++k, ++idx) {
      std::vector<double> vals, ws;
      for (std::size_t i = 0; i < blk.size(); ++i) {
        vals.push_back(reference_trajectory_value(w, one.candidates[idx], blk.scenarios[i]));
        ws.push_back(weights[blk.scenarios[i]]);
      }
      REQUIRE(one.scores[idx] == doctest::Approx(snis_value(vals, ws)).epsilon(1e-12));
      best = std::max(best, one.scores[idx]);
    }
  }
  CHECK(one.choice.score == best);

  std::ostringstream csv;
  write_blocks_csv(csv, one);
  const std::string text = csv.str();
  CHECK(std::count(text.begin(), text.end(), '\n') == 1 + 64 + 64 + 16);

  CHECK_THROWS_AS(optimize_trajectory(w, std::vector<double>(3, 1.0), keep_plan(p), cfg), std::invalid_argument);
}

TEST_CASE("tilted estimate agrees with the exact belief expectation") {
  const PlanningProblem p = fixture::merge_problem();
  const ReferencePath road = road_path(p.road);
  const ReferencePath ego_path = candidate_paths(p.road)[0];
  const ScenarioSettings s = settings_for(p, road);

  // All four intention combinations with their belief probabilities.
  std::vector<Scenario> all;
  std::vector<double> prob;
  for (std::size_t i = 0; i < 2; ++i) {
    for (std::size_t j = 0; j < 2; ++j) {
      const std::vector<std::size_t> c{i, j};
      all.push_back(make_scenario(p.belief, p.ego, c, all.size(), s));
      prob.push_back(p.belief.agents[0].intentions[i].probability * p.belief.agents[1].intentions[j].probability);
    }
  }
  const PlanningWorld exact_world(p, all);
  const CandidateTrajectory tau = reference_candidate(exact_world, keep_plan(p), 0);
  double exact = 0.0;
  std::vector<double> v;
  for (std::size_t k = 0; k < 4; ++k) {
    v.push_back(reference_trajectory_value(exact_world, tau, k));
    exact += prob[k] * v[k];
  }
  REQUIRE(*std::min_element(v.begin(), v.end()) < *std::max_element(v.begin(), v.end()));

  const auto flags = hazard_flags(p.belief, ego_path, s.dt, s.steps);
  std::vector<std::size_t> critical;
  for (std::size_t j = 0; j < flags.size(); ++j) {
    if (std::any_of(flags[j].begin(), flags[j].end(), [](std::uint8_t f) { return f != 0; })) critical.push_back(j);
  }
  REQUIRE(critical == std::vector<std::size_t>{0, 1});
  const ProposalDistribution q = build_proposal(p.belief, critical, flags, 0.5);

  std::vector<double> estimates;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    auto drawn = resample_with_proposal(p.belief, q, p.ego, 64, seed, s);
    std::vector<double> vals, ws;
    for (const WeightedScenario& d : drawn) {
      const std::size_t k = d.scenario.intention[0] * 2 + d.scenario.intention[1];
      vals.push_back(v[k]);
      ws.push_back(d.weight);
      REQUIRE(d.weight == doctest::Approx(prob[k] / (q.q[0][d.scenario.intention[0]] *
                                                     q.q[1][d.scenario.intention[1]])).epsilon(1e-12));
    }
    estimates.push_back(snis_value(vals, ws));
  }
  const double mean = std::accumulate(estimates.begin(), estimates.end(), 0.0) / 100.0;
  double var = 0.0;
  for (double e : estimates) var += (e - mean) * (e - mean);
  const double se = std::sqrt(var / 99.0) / 10.0;
  INFO("exact " << exact << " mean " << mean << " se " << se);
  CHECK(std::fabs(mean - exact) <= 3.0 * se);
}
