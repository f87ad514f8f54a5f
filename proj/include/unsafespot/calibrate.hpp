#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "unsafespot/corpus.hpp"
#include "unsafespot/model.hpp"

namespace unsafespot {

/// P[X <= k] for X ~ Binomial(m, theta).
double binomial_cdf(std::uint64_t k, std::uint64_t m, double theta);

/// Upper Clopper-Pearson bound: inf{θ ∈ [0,1] : F(k; m, θ) <= δ} ∪ {1},
/// found by bisection to 1e-12 in θ.
double cp_upper(std::uint64_t k, std::uint64_t m, double delta);

struct CandidateRow {
  double tau = 0.0;
  std::uint64_t misses = 0;
  double bound = 0.0;
  bool accepted = false;

  bool operator==(const CandidateRow&) const = default;
};

struct CalibrationReport {
  double tau = 0.0;
  double epsilon = 0.1;
  double delta = 1e-3;
  std::size_t calibration_size = 0;
  bool feasible = true;
  std::vector<CandidateRow> rows;  // scanned candidates, including the first rejection
  // Set by calibrate_model().
  std::string model_kind;
  std::string vocab_hash;
  std::vector<std::string> groups;  // grouping keys present in the calibration split

  std::string guarantee() const;
};

/// Largest τ on the candidate grid {0} ∪ scores ∪ {1 + ulp} whose miss count
/// k(τ) = #{s < τ} satisfies cp_upper(k, m, δ) <= ε. The ascending scan stops
/// at the first violation. When even τ = 0 fails, returns τ = 0 with
/// feasible = false.
CalibrationReport pac_threshold(std::span<const double> unsafe_scores,
                                double epsilon, double delta);

/// Scores the unsafe functions of `cal` and runs pac_threshold on them.
CalibrationReport calibrate_model(const ScoreModel& model, const Corpus& cal,
                                  double epsilon, double delta);

json to_json(const CalibrationReport& report);
CalibrationReport calibration_from_json(const json& j);

/// Known unsafeness law for simulation: P[U <= t] = t^exponent on [0, 1]
/// (exponent 1 is Uniform(0,1)).
struct ScoreLaw {
  double exponent = 1.0;

  double sample(double uniform) const;
  /// P[U >= tau].
  double recall_at(double tau) const;
};

struct GuaranteeResult {
  std::size_t trials = 0;
  std::size_t violations = 0;
  double violation_rate = 0.0;
  double mean_recall = 0.0;
  double mean_tau = 0.0;
  /// sqrt(δ(1-δ)/trials), the binomial standard error at rate δ.
  double sigma = 0.0;
};

/// Draws `trials` calibration sets of size n_cal, thresholds each, and
/// measures the true recall of the resulting τ̂ under `law`. Trial t uses a
/// generator seeded from (seed, t), so results do not depend on threading.
GuaranteeResult verify_guarantee(const ScoreLaw& law, std::size_t n_cal,
                                 double epsilon, double delta, std::size_t trials,
                                 std::uint64_t seed);

namespace serial {
GuaranteeResult verify_guarantee(const ScoreLaw& law, std::size_t n_cal,
                                 double epsilon, double delta, std::size_t trials,
                                 std::uint64_t seed);
}  // namespace serial

json to_json(const GuaranteeResult& result);

}  // namespace unsafespot
