#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <chrono>
#include <cmath>
#include <cstring>

#include "doctest.h"
#include "prodet/theory.hpp"

using namespace prodet;
using namespace prodet::theory;

TEST_CASE("step schedule follows base over k") {
  auto s = make_step_schedule(1.0, 3);
  REQUIRE(s.size() == 3);
  CHECK(s[0] == 1.0);
  CHECK(s[1] == 0.5);
  CHECK(s[2] == doctest::Approx(1.0 / 3.0).epsilon(1e-15));

  auto one = make_step_schedule(0.5, 1);
  REQUIRE(one.size() == 1);
  CHECK(one[0] == 0.5);
}

TEST_CASE("step schedule is strictly decreasing and square summable") {
  auto s = make_step_schedule(1.0, 1000000);
  for (std::size_t i = 1; i < 1000; ++i) CHECK(s[i] < s[i - 1]);
  double ssq = 0.0;
  for (double v : s) ssq += v * v;
  const double basel = 1.6449340668482264;  // pi^2 / 6
  CHECK(std::abs(ssq - basel) < 1e-4);
  CHECK(ssq < basel);
}

TEST_CASE("step schedule rejects nonpositive base") {
  CHECK_THROWS_AS(make_step_schedule(0.0, 5), std::invalid_argument);
  CHECK_THROWS_AS(make_step_schedule(-1.0, 5), std::invalid_argument);
}

TEST_CASE("noiseless trial stays at the optimum") {
  RegressionConfig cfg;
  cfg.sigma = 0.0;
  cfg.max_steps = 5000;
  cfg.seed = 21;
  auto res = simulate_sgd_trial(cfg, 0, false);
  CHECK(res.distance_to_optimal < 1e-3);
  // distance 0 exactly iff final weight equals the optimum
  if (res.distance_to_optimal == 0.0) {
    auto res2 = simulate_sgd_trial(cfg, 0, true);
    CHECK(res2.distance_to_optimal == 0.0);
  }
}

TEST_CASE("identity template gives bitwise identical trajectories") {
  RegressionConfig cfg;
  cfg.template_scalar = 1.0;
  cfg.max_steps = 500;
  cfg.seed = 33;
  for (std::uint64_t t = 0; t < 5; ++t) {
    auto a = simulate_sgd_trial(cfg, t, false);
    auto b = simulate_sgd_trial(cfg, t, true);
    REQUIRE(a.final_weight.size() == b.final_weight.size());
    CHECK(std::memcmp(a.final_weight.data(), b.final_weight.data(),
                      a.final_weight.size() * sizeof(double)) == 0);
    CHECK(a.distance_to_optimal == b.distance_to_optimal);
    CHECK(a.gradient_variance_estimate == b.gradient_variance_estimate);
  }
}

TEST_CASE("trial is deterministic in seed and trial index") {
  RegressionConfig cfg;
  cfg.max_steps = 300;
  cfg.seed = 9;
  auto a = simulate_sgd_trial(cfg, 3, true);
  auto b = simulate_sgd_trial(cfg, 3, true);
  CHECK(std::memcmp(a.final_weight.data(), b.final_weight.data(),
                    a.final_weight.size() * sizeof(double)) == 0);
  auto c = simulate_sgd_trial(cfg, 4, true);
  CHECK(a.distance_to_optimal != c.distance_to_optimal);
}

TEST_CASE("proactive gradient noise variance respects the damped bound") {
  // Per-trial bound at 3e4 samples for every trial, s < 1, sigma > 0.
  for (double s : {0.3, 0.5, 0.8}) {
    RegressionConfig cfg;
    cfg.template_scalar = s;
    cfg.max_steps = 30000;
    cfg.trials = 60;
    cfg.seed = 17;
    const double bound = s * s * s * s * cfg.sigma * cfg.sigma * 1.1;
    for (std::uint64_t t = 0; t < 60; ++t) {
      auto res = simulate_sgd_trial(cfg, t, true);
      CHECK(res.gradient_variance_estimate <= bound);
    }
  }
}

TEST_CASE("lemma comparison separates the arms on the pinned config") {
  RegressionConfig cfg;  // dim 8, sigma 1, s 0.5, 0.5/k
  cfg.max_steps = 1000;
  cfg.trials = 600;
  cfg.seed = 7;
  auto rep = lemma1_compare(cfg);
  CHECK(rep.verdict == Verdict::LemmaHolds);
  CHECK(rep.proactive_mean_distance < rep.passive_mean_distance);
  CHECK(rep.p_value < 0.01);
  // at least 5% improvement
  CHECK(rep.proactive_mean_distance <= 0.95 * rep.passive_mean_distance);
  CHECK(rep.passive_variance_bound == 1.0);
  CHECK(rep.proactive_variance_bound == doctest::Approx(0.0625));
}

TEST_CASE("zero noise yields an inconclusive verdict") {
  RegressionConfig cfg;
  cfg.sigma = 0.0;
  cfg.max_steps = 400;
  cfg.trials = 40;
  auto rep = lemma1_compare(cfg);
  CHECK(rep.verdict == Verdict::Inconclusive);
  CHECK(rep.passive_mean_distance < 1e-3);
  CHECK(rep.proactive_mean_distance < 1e-3);
}

TEST_CASE("identity template yields an inconclusive verdict") {
  RegressionConfig cfg;
  cfg.template_scalar = 1.0;
  cfg.max_steps = 400;
  cfg.trials = 40;
  auto rep = lemma1_compare(cfg);
  CHECK(rep.verdict == Verdict::Inconclusive);
  CHECK(rep.passive_mean_distance == rep.proactive_mean_distance);
}

TEST_CASE("lemma comparison rejects too few trials") {
  RegressionConfig cfg;
  cfg.trials = 10;
  CHECK_THROWS_AS(lemma1_compare(cfg), std::invalid_argument);
}

TEST_CASE("config validation rejects bad fields") {
  RegressionConfig cfg;
  cfg.template_scalar = 0.0;
  CHECK_THROWS_AS(validate(cfg), std::invalid_argument);
  cfg.template_scalar = 1.5;
  CHECK_THROWS_AS(validate(cfg), std::invalid_argument);
  cfg = RegressionConfig{};
  cfg.step_base = -0.1;
  CHECK_THROWS_AS(validate(cfg), std::invalid_argument);
  cfg = RegressionConfig{};
  cfg.sigma = -1.0;
  CHECK_THROWS_AS(validate(cfg), std::invalid_argument);
}

TEST_CASE("mean distance is non-increasing in training horizon") {
  RegressionConfig cfg;
  cfg.seed = 5;
  const std::size_t horizons[] = {5, 10, 50, 100, 500, 1000};
  const std::size_t trials = 500;
  std::vector<std::vector<double>> dists;
  for (std::size_t h : horizons) {
    cfg.max_steps = h;
    std::vector<double> d(trials);
    for (std::uint64_t t = 0; t < trials; ++t)
      d[t] = simulate_sgd_trial(cfg, t, false).distance_to_optimal;
    dists.push_back(std::move(d));
  }
  for (std::size_t i = 0; i + 1 < dists.size(); ++i) {
    // paired differences; tolerance one standard error
    double mean = 0.0;
    for (std::size_t t = 0; t < trials; ++t)
      mean += dists[i + 1][t] - dists[i][t];
    mean /= double(trials);
    double ss = 0.0;
    for (std::size_t t = 0; t < trials; ++t) {
      const double d = dists[i + 1][t] - dists[i][t] - mean;
      ss += d * d;
    }
    const double se = std::sqrt(ss / double(trials - 1) / double(trials));
    CHECK(mean <= se);
  }
}

TEST_CASE("report serialization is deterministic") {
  RegressionConfig cfg;
  cfg.max_steps = 200;
  cfg.trials = 50;
  auto r1 = lemma1_compare(cfg);
  auto r2 = lemma1_compare(cfg);
  CHECK(report_to_json(r1, cfg) == report_to_json(r2, cfg));
  CHECK(report_to_csv(r1) == report_to_csv(r2));
  // csv has header plus one row per trial
  const std::string csv = report_to_csv(r1);
  std::size_t lines = 0;
  for (char c : csv)
    if (c == '\n') ++lines;
  CHECK(lines == 51);
}

TEST_CASE("box regression: noiseless arms are both perfect") {
  RegressionConfig cfg;
  cfg.sigma = 0.0;
  cfg.max_steps = 200;
  cfg.seed = 3;
  BoxTaskSpec task;
  task.test_boxes = 100;
  auto rep = theorem1_check(cfg, task);
  CHECK(rep.ap50_passive == 1.0);
  CHECK(rep.ap50_proactive == 1.0);
  CHECK(rep.ap75_passive == 1.0);
  CHECK(rep.ap75_proactive == 1.0);
  CHECK(rep.ap_dominates);
}

TEST_CASE("box regression: zero training steps gives equal arms") {
  RegressionConfig cfg;
  cfg.max_steps = 0;
  cfg.seed = 3;
  BoxTaskSpec task;
  task.test_boxes = 100;
  auto rep = theorem1_check(cfg, task);
  CHECK(rep.ap50_passive == rep.ap50_proactive);
  CHECK(rep.ap75_passive == rep.ap75_proactive);
  CHECK(rep.mean_ap_passive == rep.mean_ap_proactive);
}

TEST_CASE("box regression: noisy training favors the proactive arm") {
  RegressionConfig cfg;  // sigma 1 -> 12px label noise at coord_scale 12
  cfg.max_steps = 1000;
  cfg.seed = 3;
  BoxTaskSpec task;  // 500 test boxes
  auto rep = theorem1_check(cfg, task);
  CHECK(rep.ap_dominates);
  CHECK(rep.ap50_proactive >= rep.ap50_passive);
  CHECK(rep.ap75_proactive >= rep.ap75_passive);
  // the proactive arm should be close to perfect at 0.5
  CHECK(rep.ap50_proactive > 0.9);
}

TEST_CASE("lemma comparison runtime stays within budget") {
  RegressionConfig cfg;  // the pinned acceptance configuration
  cfg.max_steps = 1000;
  cfg.trials = 2000;
  const auto t0 = std::chrono::steady_clock::now();
  auto rep = lemma1_compare(cfg);
  const auto t1 = std::chrono::steady_clock::now();
  const double secs = std::chrono::duration<double>(t1 - t0).count();
  CHECK(rep.verdict == Verdict::LemmaHolds);
  CHECK(secs < 60.0);
  MESSAGE("lemma1_compare(2000 trials x 1000 steps) took ", secs, " s");
}
