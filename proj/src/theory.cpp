#include "prodet/theory.hpp"

#include <boost/math/distributions/students_t.hpp>
#include <cmath>
#include <cstdio>
#include <stdexcept>

#include "json.hpp"
#include "prodet/rng.hpp"

namespace prodet::theory {

namespace {

// Substream ids within a theory run.
constexpr std::uint64_t kStreamMaster = 0;
constexpr std::uint64_t kStreamTrial = 1;
constexpr std::uint64_t kStreamBoxTrain = 2;
constexpr std::uint64_t kStreamBoxEval = 3;

constexpr double kAlpha = 0.01;

std::vector<double> draw_wstar(const RegressionConfig& cfg) {
  Rng master = Rng::substream(cfg.seed, kStreamMaster, 0);
  std::vector<double> w(cfg.dim);
  for (auto& v : w) v = master.normal();
  return w;
}

double dot(const std::vector<double>& a, const std::vector<double>& b) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace

void validate(const RegressionConfig& cfg) {
  if (cfg.dim < 1) throw std::invalid_argument("theory: dim must be >= 1");
  if (cfg.sigma < 0) throw std::invalid_argument("theory: sigma must be >= 0");
  if (cfg.step_base <= 0)
    throw std::invalid_argument("theory: step_base must be > 0");
  if (cfg.template_scalar <= 0 || cfg.template_scalar > 1)
    throw std::invalid_argument(
        "theory: template_scalar must be in (0, 1]");
  if (cfg.trials < 1) throw std::invalid_argument("theory: trials must be >= 1");
}

std::vector<double> make_step_schedule(double step_base,
                                       std::size_t num_steps) {
  if (step_base <= 0)
    throw std::invalid_argument("make_step_schedule: step_base must be > 0");
  if (num_steps < 1)
    throw std::invalid_argument("make_step_schedule: num_steps must be >= 1");
  std::vector<double> s(num_steps);
  for (std::size_t k = 0; k < num_steps; ++k)
    s[k] = step_base / double(k + 1);
  return s;
}

TrialResult simulate_sgd_trial(const RegressionConfig& cfg,
                               std::uint64_t trial_index, bool proactive) {
  validate(cfg);
  const std::vector<double> wstar = draw_wstar(cfg);
  const double s = cfg.template_scalar;
  const double noise_scale = proactive ? s * s : 1.0;

  Rng rng = Rng::substream(cfg.seed, kStreamTrial, trial_index);
  std::vector<double> w = wstar;  // start at the pretrained optimum
  std::vector<double> i(cfg.dim);

  // Welford accumulation of the residual stream.
  double mean = 0.0, m2 = 0.0;
  std::size_t n = 0;
  for (std::size_t k = 1; k <= cfg.max_steps; ++k) {
    for (auto& v : i) v = rng.normal();
    const double e = rng.normal() * cfg.sigma;
    const double y = dot(wstar, i) + noise_scale * e;
    const double u = dot(w, i) - y;
    ++n;
    const double delta = u - mean;
    mean += delta / double(n);
    m2 += delta * (u - mean);
    const double step = cfg.step_base / double(k);
    for (std::size_t j = 0; j < cfg.dim; ++j) w[j] -= step * u * i[j];
  }

  TrialResult res;
  res.final_weight = w;
  double d2 = 0.0;
  for (std::size_t j = 0; j < cfg.dim; ++j) {
    const double d = w[j] - wstar[j];
    d2 += d * d;
  }
  res.distance_to_optimal = std::sqrt(d2);
  res.gradient_variance_estimate = n > 1 ? m2 / double(n - 1) : 0.0;
  return res;
}

const char* verdict_name(Verdict v) {
  switch (v) {
    case Verdict::LemmaHolds:
      return "LemmaHolds";
    case Verdict::LemmaViolated:
      return "LemmaViolated";
    default:
      return "Inconclusive";
  }
}

ConvergenceReport lemma1_compare(const RegressionConfig& cfg) {
  validate(cfg);
  if (cfg.trials < 30)
    throw std::invalid_argument("lemma1_compare: trials must be >= 30");

  ConvergenceReport rep;
  rep.passive_variance_bound = cfg.sigma * cfg.sigma;
  const double s2 = cfg.template_scalar * cfg.template_scalar;
  rep.proactive_variance_bound = s2 * s2 * cfg.sigma * cfg.sigma;

  double var_p = 0.0, var_q = 0.0;
  rep.passive_distances.reserve(cfg.trials);
  rep.proactive_distances.reserve(cfg.trials);
  for (std::uint64_t t = 0; t < cfg.trials; ++t) {
    const TrialResult p = simulate_sgd_trial(cfg, t, false);
    const TrialResult q = simulate_sgd_trial(cfg, t, true);
    rep.passive_distances.push_back(p.distance_to_optimal);
    rep.proactive_distances.push_back(q.distance_to_optimal);
    var_p += p.gradient_variance_estimate;
    var_q += q.gradient_variance_estimate;
  }
  const double n = double(cfg.trials);
  rep.passive_variance_estimate = var_p / n;
  rep.proactive_variance_estimate = var_q / n;

  double mp = 0.0, mq = 0.0;
  for (double v : rep.passive_distances) mp += v;
  for (double v : rep.proactive_distances) mq += v;
  mp /= n;
  mq /= n;
  rep.passive_mean_distance = mp;
  rep.proactive_mean_distance = mq;

  // Paired one-sided t-test on d = passive - proactive (common random
  // numbers make the pairing exact).
  double mean_d = 0.0;
  for (std::size_t t = 0; t < cfg.trials; ++t)
    mean_d += rep.passive_distances[t] - rep.proactive_distances[t];
  mean_d /= n;
  double ss = 0.0;
  for (std::size_t t = 0; t < cfg.trials; ++t) {
    const double d =
        rep.passive_distances[t] - rep.proactive_distances[t] - mean_d;
    ss += d * d;
  }
  const double sd = std::sqrt(ss / (n - 1.0));

  double p_hold, p_viol;
  if (sd == 0.0) {
    if (mean_d > 0.0) {
      p_hold = 0.0;
      p_viol = 1.0;
    } else if (mean_d < 0.0) {
      p_hold = 1.0;
      p_viol = 0.0;
    } else {
      p_hold = 1.0;
      p_viol = 1.0;
    }
  } else {
    const double tstat = mean_d / (sd / std::sqrt(n));
    boost::math::students_t_distribution<double> dist(n - 1.0);
    p_hold = boost::math::cdf(boost::math::complement(dist, tstat));
    p_viol = boost::math::cdf(dist, tstat);
  }
  rep.p_value = p_hold;
  if (p_hold < kAlpha && mq < mp)
    rep.verdict = Verdict::LemmaHolds;
  else if (p_viol < kAlpha && mp < mq)
    rep.verdict = Verdict::LemmaViolated;
  else
    rep.verdict = Verdict::Inconclusive;
  return rep;
}

std::string report_to_json(const ConvergenceReport& rep,
                           const RegressionConfig& cfg) {
  nlohmann::ordered_json j;
  j["config"] = {{"dim", cfg.dim},
                 {"sigma", cfg.sigma},
                 {"step_base", cfg.step_base},
                 {"max_steps", cfg.max_steps},
                 {"trials", cfg.trials},
                 {"template_scalar", cfg.template_scalar},
                 {"seed", cfg.seed}};
  j["report"] = {
      {"passive_mean_distance", rep.passive_mean_distance},
      {"proactive_mean_distance", rep.proactive_mean_distance},
      {"passive_variance_bound", rep.passive_variance_bound},
      {"proactive_variance_bound", rep.proactive_variance_bound},
      {"passive_variance_estimate", rep.passive_variance_estimate},
      {"proactive_variance_estimate", rep.proactive_variance_estimate},
      {"p_value", rep.p_value},
      {"verdict", verdict_name(rep.verdict)}};
  return j.dump(2) + "\n";
}

std::string report_to_csv(const ConvergenceReport& rep) {
  std::string out = "trial,passive_distance,proactive_distance\n";
  for (std::size_t t = 0; t < rep.passive_distances.size(); ++t) {
    out += std::to_string(t);
    out += ',';
    out += fmt_double(rep.passive_distances[t]);
    out += ',';
    out += fmt_double(rep.proactive_distances[t]);
    out += '\n';
  }
  return out;
}

// ---- linear box-regression AP check ----

namespace {

struct BoxTaskModel {
  // W* maps [standardized coords, bias, 3 nuisance] -> pixel coords.
  std::vector<double> wstar;  // 4 x dim row-major
  std::vector<double> mean{20.0, 20.0, 36.0, 36.0};
  std::size_t dim;
  double coord_scale;

  BoxTaskModel(std::size_t d, double cs) : dim(d), coord_scale(cs) {
    if (d < 5) throw std::invalid_argument("theorem1_check: dim must be >= 5");
    wstar.assign(4 * d, 0.0);
    for (std::size_t c = 0; c < 4; ++c) {
      wstar[c * d + c] = coord_scale;
      wstar[c * d + 4] = mean[c];
    }
  }

  BBox sample_box(Rng& r) const {
    BBox b;
    b.x1 = r.uniform(4.0, 36.0);
    b.y1 = r.uniform(4.0, 36.0);
    b.x2 = b.x1 + r.uniform(8.0, 24.0);
    b.y2 = b.y1 + r.uniform(8.0, 24.0);
    return b;
  }

  std::vector<double> features(const BBox& b, Rng& r) const {
    std::vector<double> f(dim, 0.0);
    f[0] = (b.x1 - mean[0]) / coord_scale;
    f[1] = (b.y1 - mean[1]) / coord_scale;
    f[2] = (b.x2 - mean[2]) / coord_scale;
    f[3] = (b.y2 - mean[3]) / coord_scale;
    f[4] = 1.0;
    for (std::size_t j = 5; j < dim; ++j) f[j] = r.normal();
    return f;
  }
};

struct ArmEval {
  double ap50, ap75, mean_ap;
  std::size_t degenerate;
};

ArmEval run_arm(const RegressionConfig& cfg, const BoxTaskSpec& task,
                const BoxTaskModel& model, double noise_scale) {
  std::vector<double> w = model.wstar;  // start at the pretrained optimum
  const double sigma_px = cfg.sigma * task.coord_scale;

  Rng train = Rng::substream(cfg.seed, kStreamBoxTrain, 0);
  for (std::size_t k = 1; k <= cfg.max_steps; ++k) {
    const BBox b = model.sample_box(train);
    const std::vector<double> f = model.features(b, train);
    const double step = cfg.step_base / double(k);
    double u[4];
    for (std::size_t c = 0; c < 4; ++c) {
      const double e = train.normal() * sigma_px;
      double pred = 0.0, truth = 0.0;
      for (std::size_t j = 0; j < model.dim; ++j) {
        pred += w[c * model.dim + j] * f[j];
        truth += model.wstar[c * model.dim + j] * f[j];
      }
      u[c] = pred - (truth + noise_scale * e);
    }
    for (std::size_t c = 0; c < 4; ++c)
      for (std::size_t j = 0; j < model.dim; ++j)
        w[c * model.dim + j] -= step * u[c] * f[j];
  }

  Rng eval = Rng::substream(cfg.seed, kStreamBoxEval, 0);
  std::vector<Detection> dets;
  std::vector<GroundTruth> gts;
  std::size_t degenerate = 0;
  for (std::size_t t = 0; t < task.test_boxes; ++t) {
    const BBox b = model.sample_box(eval);
    const std::vector<double> f = model.features(b, eval);
    BBox p;
    double coords[4];
    for (std::size_t c = 0; c < 4; ++c) {
      double v = 0.0;
      for (std::size_t j = 0; j < model.dim; ++j)
        v += w[c * model.dim + j] * f[j];
      coords[c] = v;
    }
    p.x1 = coords[0];
    p.y1 = coords[1];
    p.x2 = coords[2];
    p.y2 = coords[3];
    if (p.x2 <= p.x1 || p.y2 <= p.y1) {
      // clamp to zero area; scores IoU 0 against everything
      p.x2 = p.x1;
      p.y2 = p.y1;
      ++degenerate;
    }
    dets.push_back({p, 0, 1.0, int(t)});
    gts.push_back({b, 0, int(t)});
  }
  ArmEval out;
  out.ap50 = average_precision(dets, gts, 0.50);
  out.ap75 = average_precision(dets, gts, 0.75);
  out.mean_ap = mean_ap(dets, gts).ap;
  out.degenerate = degenerate;
  return out;
}

}  // namespace

Theorem1Report theorem1_check(const RegressionConfig& cfg,
                              const BoxTaskSpec& task) {
  validate(cfg);
  if (task.test_boxes < 1)
    throw std::invalid_argument("theorem1_check: test_boxes must be >= 1");
  BoxTaskModel model(cfg.dim, task.coord_scale);
  const double s2 = cfg.template_scalar * cfg.template_scalar;

  const ArmEval pas = run_arm(cfg, task, model, 1.0);
  const ArmEval pro = run_arm(cfg, task, model, s2);

  Theorem1Report rep;
  rep.ap50_passive = pas.ap50;
  rep.ap75_passive = pas.ap75;
  rep.mean_ap_passive = pas.mean_ap;
  rep.degenerate_passive = pas.degenerate;
  rep.ap50_proactive = pro.ap50;
  rep.ap75_proactive = pro.ap75;
  rep.mean_ap_proactive = pro.mean_ap;
  rep.degenerate_proactive = pro.degenerate;
  rep.ap_dominates = rep.ap50_proactive >= rep.ap50_passive &&
                     rep.ap75_proactive >= rep.ap75_passive;
  return rep;
}

std::string theorem1_to_json(const Theorem1Report& rep,
                             const RegressionConfig& cfg,
                             const BoxTaskSpec& task) {
  nlohmann::ordered_json j;
  j["config"] = {{"dim", cfg.dim},
                 {"sigma", cfg.sigma},
                 {"step_base", cfg.step_base},
                 {"max_steps", cfg.max_steps},
                 {"template_scalar", cfg.template_scalar},
                 {"seed", cfg.seed},
                 {"test_boxes", task.test_boxes},
                 {"coord_scale", task.coord_scale}};
  j["report"] = {{"ap50_passive", rep.ap50_passive},
                 {"ap50_proactive", rep.ap50_proactive},
                 {"ap75_passive", rep.ap75_passive},
                 {"ap75_proactive", rep.ap75_proactive},
                 {"mean_ap_passive", rep.mean_ap_passive},
                 {"mean_ap_proactive", rep.mean_ap_proactive},
                 {"degenerate_passive", rep.degenerate_passive},
                 {"degenerate_proactive", rep.degenerate_proactive},
                 {"ap_dominates", rep.ap_dominates}};
  return j.dump(2) + "\n";
}

}  // namespace prodet::theory
