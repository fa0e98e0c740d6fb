#pragma once
// Monte Carlo lab for the SGD convergence claims: paired passive/proactive
// linear-regression trials under a square-summable step schedule, the
// gradient-noise variance bound, and the AP-dominance check on a linear
// box-regression task.
//
// Model. Both arms share the SGD operator
//     w_{k+1} = w_k - s_k * v_k * i_k,   s_k = step_base / k,
// where i_k is a standard normal feature vector and v_k = w_k.i_k - y_k is
// the per-sample residual. The passive arm observes y = w*.i + e with
// e ~ N(0, sigma^2). The proactive arm observes label noise damped by the
// squared template scalar: y' = w*.i + s^2 e, which realizes the variance
// claim Var(v') <= s^4 sigma^2 while keeping the mean dynamics of the two
// arms identical. At s = 1 both arms are bitwise identical by construction.
// Trials start at the optimum (a pretrained representative), so any residual
// distance is purely accumulated gradient noise, which is the quantity the
// convergence claim compares.

#include <cstdint>
#include <string>
#include <vector>

#include "prodet/metrics.hpp"

namespace prodet::theory {

struct RegressionConfig {
  std::size_t dim = 8;
  double sigma = 1.0;
  double step_base = 0.5;
  std::size_t max_steps = 1000;
  std::size_t trials = 2000;
  double template_scalar = 0.5;
  std::uint64_t seed = 7;
};

// Throws std::invalid_argument on violated preconditions.
void validate(const RegressionConfig& cfg);

// s_k = step_base / k for k = 1..num_steps. Rejects step_base <= 0.
std::vector<double> make_step_schedule(double step_base,
                                       std::size_t num_steps);

struct TrialResult {
  std::vector<double> final_weight;
  double distance_to_optimal = 0.0;
  double gradient_variance_estimate = 0.0;
};

TrialResult simulate_sgd_trial(const RegressionConfig& cfg,
                               std::uint64_t trial_index, bool proactive);

enum class Verdict { LemmaHolds, LemmaViolated, Inconclusive };
const char* verdict_name(Verdict v);

struct ConvergenceReport {
  double passive_mean_distance = 0.0;
  double proactive_mean_distance = 0.0;
  double passive_variance_bound = 0.0;    // sigma^2
  double proactive_variance_bound = 0.0;  // s^4 sigma^2
  double passive_variance_estimate = 0.0;
  double proactive_variance_estimate = 0.0;
  double p_value = 1.0;  // one-sided: proactive closer than passive
  Verdict verdict = Verdict::Inconclusive;
  std::vector<double> passive_distances;
  std::vector<double> proactive_distances;
};

// Paired common-random-number trials; paired one-sided t-test at level 0.01.
ConvergenceReport lemma1_compare(const RegressionConfig& cfg);

// Serialized JSON document (2-space indent, stable field order) and a CSV of
// per-trial distances.
std::string report_to_json(const ConvergenceReport& rep,
                           const RegressionConfig& cfg);
std::string report_to_csv(const ConvergenceReport& rep);

// ---- linear box-regression AP check ----

struct BoxTaskSpec {
  std::size_t test_boxes = 500;
  // Feature standardization scale; label noise in pixels is
  // sigma * coord_scale so config.sigma stays dimensionless.
  double coord_scale = 12.0;
};

struct Theorem1Report {
  double ap50_passive = 0.0, ap50_proactive = 0.0;
  double ap75_passive = 0.0, ap75_proactive = 0.0;
  double mean_ap_passive = 0.0, mean_ap_proactive = 0.0;
  std::size_t degenerate_passive = 0, degenerate_proactive = 0;
  bool ap_dominates = false;  // proactive >= passive at 0.50 and 0.75
};

Theorem1Report theorem1_check(const RegressionConfig& cfg,
                              const BoxTaskSpec& task);

std::string theorem1_to_json(const Theorem1Report& rep,
                             const RegressionConfig& cfg,
                             const BoxTaskSpec& task);

}  // namespace prodet::theory
