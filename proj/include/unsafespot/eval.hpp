#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "unsafespot/calibrate.hpp"
#include "unsafespot/corpus.hpp"
#include "unsafespot/model.hpp"

namespace unsafespot {

/// Which labels count as positives and which score ranks them:
/// unsafe-overall and bug rank by unsafeness, type j ranks by ŝ(x, j).
struct LabelView {
  enum class Kind { UnsafeOverall, UnsafeType, Bug };
  Kind kind = Kind::UnsafeOverall;
  int type = 0;

  static LabelView unsafe() { return {}; }
  static LabelView unsafe_type(int j);
  static LabelView bug() { return {Kind::Bug, 0}; }
  /// "unsafe", "type:<j>", "bug".
  static LabelView parse(std::string_view text);
  std::string name() const;

  bool operator==(const LabelView&) const = default;
};

struct ScoredItem {
  double score = 0.0;
  bool positive = false;
  std::uint64_t size = 0;  // deep size S(x)
};

struct CurvePoint {
  double threshold = 0.0;
  double precision = 1.0;
  double recall = 0.0;
  double coverage = 0.0;
  std::uint64_t tp = 0;
  std::uint64_t fp = 0;
  std::uint64_t fn = 0;
  std::uint64_t predicted = 0;
  std::uint64_t positives = 0;
  std::uint64_t total_size = 0;
  std::uint64_t covered_size = 0;
  bool no_predictions = false;  // precision reported as 1
  bool no_positives = false;    // recall reported as 0

  bool operator==(const CurvePoint&) const = default;
};

/// Metrics of the classifier score >= tau.
CurvePoint point_at(std::span<const ScoredItem> items, double tau);

/// One point per distinct score, thresholds descending.
std::vector<CurvePoint> pr_curve(std::span<const ScoredItem> items);

/// Step-rule area: Σ (r_i - r_{i-1}) · p_i over points in increasing recall.
double auprc(std::span<const CurvePoint> curve);

/// Smallest coverage among points reaching recall >= r; nullopt if none.
std::optional<double> coverage_at_recall(std::span<const CurvePoint> curve, double r);

std::vector<ScoredItem> scored_items(const Corpus& corpus, const ScoreModel& model,
                                     const LabelView& view);

CurvePoint precision_recall(const Corpus& test, const ScoreModel& model, double tau,
                            const LabelView& view);
std::vector<CurvePoint> curve(const Corpus& test, const ScoreModel& model,
                              const LabelView& view);

struct ThresholdPoint {
  CurvePoint point;
  double epsilon = 0.0;
  double delta = 0.0;
  bool split_overlap = false;  // calibration and test share grouping keys
};

ThresholdPoint threshold_point(const Corpus& test, const ScoreModel& model,
                               const CalibrationReport& calibration,
                               const LabelView& view = LabelView::bug());

struct EvalReport {
  std::string model_kind;
  std::vector<CurvePoint> overall;
  std::optional<double> overall_auprc;
  std::vector<std::vector<CurvePoint>> per_type;  // index j-1 for type j
  std::vector<std::optional<double>> per_type_auprc;
  std::vector<CurvePoint> bug_curve;  // empty without bug labels
  std::optional<ThresholdPoint> unsafe_at_threshold;
  std::optional<ThresholdPoint> bug_at_threshold;
};

EvalReport evaluate(const Corpus& test, const ScoreModel& model,
                    const std::optional<CalibrationReport>& calibration);

json to_json(const CurvePoint& point);
json to_json(const EvalReport& report);
/// threshold,precision,recall,coverage,tp,fp,fn,predicted,covered_size,total_size
std::string curve_csv(std::span<const CurvePoint> curve);

}  // namespace unsafespot
