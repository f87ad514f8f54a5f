#include "unsafespot/calibrate.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <set>
#include <sstream>

#include <boost/math/special_functions/beta.hpp>

#include "unsafespot/error.hpp"
#include "unsafespot/random.hpp"

namespace unsafespot {

double binomial_cdf(std::uint64_t k, std::uint64_t m, double theta) {
  if (k > m) throw Error("calibrate.DomainError", "k > m in binomial_cdf");
  if (!(theta >= 0.0 && theta <= 1.0)) {
    throw Error("calibrate.DomainError", "theta outside [0, 1] in binomial_cdf");
  }
  if (k == m || theta == 0.0) return 1.0;
  if (theta == 1.0) return 0.0;
  // P[X <= k] = I_{1-θ}(m-k, k+1) = 1 - I_θ(k+1, m-k).
  return boost::math::ibetac(static_cast<double>(k + 1), static_cast<double>(m - k), theta);
}

double cp_upper(std::uint64_t k, std::uint64_t m, double delta) {
  if (m == 0 || k > m) throw Error("calibrate.DomainError", "need 0 <= k <= m and m >= 1");
  if (!(delta > 0.0 && delta < 1.0)) throw Error("calibrate.DomainError", "delta must lie in (0, 1)");
  if (k == m) return 1.0;
  // F(k; m, θ) falls strictly from 1 at θ = 0 to 0 at θ = 1.
  double lo = 0.0;
  double hi = 1.0;
  while (hi - lo > 1e-12) {
    const double mid = 0.5 * (lo + hi);
    if (binomial_cdf(k, m, mid) <= delta) {
      hi = mid;
    } else {
      lo = mid;
    }
  }
  return hi;
}

std::string CalibrationReport::guarantee() const {
  std::ostringstream out;
  out.precision(17);
  if (!feasible) {
    out << "infeasible: even zero misses among " << calibration_size
        << " calibration functions cannot certify recall " << 1.0 - epsilon
        << " at confidence " << 1.0 - delta << "; threshold 0 accepts every function";
    return out.str();
  }
  out << "P[unsafeness >= " << tau << " | unsafe] >= " << 1.0 - epsilon
      << " with probability >= " << 1.0 - delta << " over " << calibration_size
      << " calibration functions";
  return out.str();
}

CalibrationReport pac_threshold(std::span<const double> unsafe_scores, double epsilon,
                                double delta) {
  if (unsafe_scores.empty()) {
    throw Error("calibrate.EmptyCalibrationSet", "no unsafe functions to calibrate on");
  }
  if (!(epsilon > 0.0 && epsilon <= 1.0)) throw Error("calibrate.DomainError", "epsilon must lie in (0, 1]");
  if (!(delta > 0.0 && delta < 1.0)) throw Error("calibrate.DomainError", "delta must lie in (0, 1)");

  std::vector<double> sorted(unsafe_scores.begin(), unsafe_scores.end());
  for (double s : sorted) {
    if (!std::isfinite(s)) throw Error("calibrate.DomainError", "non-finite unsafeness score");
  }
  std::sort(sorted.begin(), sorted.end());

  std::vector<double> grid = {0.0};
  for (double s : sorted) {
    if (s > grid.back()) grid.push_back(s);
  }
  grid.push_back(std::nextafter(std::max(1.0, sorted.back()), std::numeric_limits<double>::infinity()));

  CalibrationReport report;
  report.epsilon = epsilon;
  report.delta = delta;
  report.calibration_size = sorted.size();
  report.tau = 0.0;

  const std::uint64_t m = sorted.size();
  std::uint64_t cached_k = std::numeric_limits<std::uint64_t>::max();
  double cached_bound = 0.0;
  for (double tau : grid) {
    // Strict misses: unsafeness < τ.
    const auto k = static_cast<std::uint64_t>(
        std::lower_bound(sorted.begin(), sorted.end(), tau) - sorted.begin());
    if (k != cached_k) {
      cached_k = k;
      cached_bound = cp_upper(k, m, delta);
    }
    const bool accepted = cached_bound <= epsilon;
    report.rows.push_back({tau, k, cached_bound, accepted});
    if (!accepted) break;
    report.tau = std::max(report.tau, tau);
  }
  report.feasible = report.rows.front().accepted;
  return report;
}

namespace {

std::vector<std::string> group_keys(const Corpus& corpus) {
  std::set<std::string> keys;
  for (const auto& lf : corpus.functions) {
    if (!lf.function.package.empty()) keys.insert("package:" + lf.function.package);
    if (!lf.function.report_id.empty()) keys.insert("report-id:" + lf.function.report_id);
  }
  return {keys.begin(), keys.end()};
}

}  // namespace

CalibrationReport calibrate_model(const ScoreModel& model, const Corpus& cal, double epsilon,
                                  double delta) {
  const FunctionIndex index(std::span<const LabeledFunction>(cal.functions));
  std::vector<LabeledFunction> unsafe;
  for (const auto& lf : cal.functions) {
    if (!lf.labels.is_safe()) unsafe.push_back(lf);
  }
  const auto scores = score_all(model, unsafe, index);
  std::vector<double> values;
  values.reserve(scores.size());
  for (const auto& s : scores) values.push_back(unsafeness(s));
  CalibrationReport report = pac_threshold(values, epsilon, delta);
  report.model_kind = std::string(model_kind_name(model.kind));
  report.vocab_hash = model.vocab_hash();
  report.groups = group_keys(cal);
  return report;
}

json to_json(const CalibrationReport& r) {
  json rows = json::array();
  for (const auto& row : r.rows) {
    rows.push_back({{"tau", row.tau}, {"misses", row.misses},
                    {"bound", row.bound}, {"accepted", row.accepted}});
  }
  return {{"tau", r.tau},
          {"epsilon", r.epsilon},
          {"delta", r.delta},
          {"calibration_size", r.calibration_size},
          {"feasible", r.feasible},
          {"rows", rows},
          {"model_kind", r.model_kind},
          {"vocab_hash", r.vocab_hash},
          {"groups", r.groups},
          {"guarantee", r.guarantee()}};
}

CalibrationReport calibration_from_json(const json& j) {
  try {
    CalibrationReport r;
    r.tau = j.at("tau").get<double>();
    r.epsilon = j.at("epsilon").get<double>();
    r.delta = j.at("delta").get<double>();
    r.calibration_size = j.at("calibration_size").get<std::size_t>();
    r.feasible = j.at("feasible").get<bool>();
    for (const auto& row : j.at("rows")) {
      r.rows.push_back({row.at("tau").get<double>(), row.at("misses").get<std::uint64_t>(),
                        row.at("bound").get<double>(), row.at("accepted").get<bool>()});
    }
    r.model_kind = j.at("model_kind").get<std::string>();
    r.vocab_hash = j.at("vocab_hash").get<std::string>();
    r.groups = j.at("groups").get<std::vector<std::string>>();
    return r;
  } catch (const json::exception& e) {
    throw Error("calibrate.CorruptFile", e.what());
  }
}

// ---------------------------------------------------------------------------
// Simulation

double ScoreLaw::sample(double uniform) const { return std::pow(uniform, 1.0 / exponent); }

double ScoreLaw::recall_at(double tau) const {
  if (tau <= 0.0) return 1.0;
  if (tau >= 1.0) return 0.0;
  return 1.0 - std::pow(tau, exponent);
}

namespace {

struct TrialResult {
  double tau = 0.0;
  double recall = 0.0;
};

TrialResult run_trial(const ScoreLaw& law, std::size_t n_cal, double epsilon, double delta,
                      std::uint64_t seed, std::size_t trial) {
  std::mt19937_64 rng(mix_seed(seed, trial));
  std::vector<double> scores(n_cal);
  for (double& s : scores) s = law.sample(unit_interval(rng()));
  const auto report = pac_threshold(scores, epsilon, delta);
  return {report.tau, law.recall_at(report.tau)};
}

void check_simulation(std::size_t n_cal, std::size_t trials, const ScoreLaw& law) {
  if (n_cal == 0) throw Error("calibrate.DomainError", "n_cal must be positive");
  if (trials < 1000) throw Error("calibrate.DomainError", "verify_guarantee needs at least 1000 trials");
  if (!(law.exponent > 0.0)) throw Error("calibrate.DomainError", "law exponent must be positive");
}

GuaranteeResult summarize(std::span<const TrialResult> results, double epsilon, double delta) {
  GuaranteeResult out;
  out.trials = results.size();
  double recall_sum = 0.0;
  double tau_sum = 0.0;
  for (const auto& r : results) {
    if (r.recall < 1.0 - epsilon) ++out.violations;
    recall_sum += r.recall;
    tau_sum += r.tau;
  }
  const double n = static_cast<double>(out.trials);
  out.violation_rate = static_cast<double>(out.violations) / n;
  out.mean_recall = recall_sum / n;
  out.mean_tau = tau_sum / n;
  out.sigma = std::sqrt(delta * (1.0 - delta) / n);
  return out;
}

}  // namespace

GuaranteeResult verify_guarantee(const ScoreLaw& law, std::size_t n_cal, double epsilon,
                                 double delta, std::size_t trials, std::uint64_t seed) {
  check_simulation(n_cal, trials, law);
  pac_threshold(std::vector<double>{0.5}, epsilon, delta);  // validates ε, δ before the parallel region
  std::vector<TrialResult> results(trials);
  const auto n = static_cast<std::int64_t>(trials);
#pragma omp parallel for schedule(dynamic, 16)
  for (std::int64_t t = 0; t < n; ++t) {
    results[t] = run_trial(law, n_cal, epsilon, delta, seed, static_cast<std::size_t>(t));
  }
  return summarize(results, epsilon, delta);
}

namespace serial {

GuaranteeResult verify_guarantee(const ScoreLaw& law, std::size_t n_cal, double epsilon,
                                 double delta, std::size_t trials, std::uint64_t seed) {
  check_simulation(n_cal, trials, law);
  std::vector<TrialResult> results;
  results.reserve(trials);
  for (std::size_t t = 0; t < trials; ++t) {
    results.push_back(run_trial(law, n_cal, epsilon, delta, seed, t));
  }
  return summarize(results, epsilon, delta);
}

}  // namespace serial

json to_json(const GuaranteeResult& r) {
  return {{"trials", r.trials},           {"violations", r.violations},
          {"violation_rate", r.violation_rate}, {"mean_recall", r.mean_recall},
          {"mean_tau", r.mean_tau},       {"sigma", r.sigma}};
}

}  // namespace unsafespot
