#include "unsafespot/eval.hpp"

#include <algorithm>
#include <charconv>
#include <numeric>
#include <set>
#include <sstream>

#include "unsafespot/error.hpp"

namespace unsafespot {

LabelView LabelView::unsafe_type(int j) {
  if (j < 1 || j > kNumUnsafeTypes) throw Error("eval.InvalidView", "unsafe type must be 1..14");
  return {Kind::UnsafeType, j};
}

LabelView LabelView::parse(std::string_view text) {
  if (text == "unsafe") return unsafe();
  if (text == "bug") return bug();
  if (text.starts_with("type:")) {
    int j = 0;
    const auto digits = text.substr(5);
    auto [ptr, ec] = std::from_chars(digits.data(), digits.data() + digits.size(), j);
    if (ec == std::errc() && ptr == digits.data() + digits.size()) return unsafe_type(j);
  }
  throw Error("eval.InvalidView", "expected unsafe, type:<j> or bug, got " + std::string(text));
}

std::string LabelView::name() const {
  switch (kind) {
    case Kind::UnsafeOverall: return "unsafe";
    case Kind::UnsafeType: return "type:" + std::to_string(type);
    case Kind::Bug: return "bug";
  }
  return "unsafe";
}

namespace {

CurvePoint make_point(double tau, std::uint64_t tp, std::uint64_t predicted,
                      std::uint64_t positives, std::uint64_t covered, std::uint64_t total) {
  CurvePoint p;
  p.threshold = tau;
  p.tp = tp;
  p.predicted = predicted;
  p.fp = predicted - tp;
  p.positives = positives;
  p.fn = positives - tp;
  p.covered_size = covered;
  p.total_size = total;
  p.no_predictions = predicted == 0;
  p.no_positives = positives == 0;
  p.precision = predicted == 0 ? 1.0 : static_cast<double>(tp) / static_cast<double>(predicted);
  p.recall = positives == 0 ? 0.0 : static_cast<double>(tp) / static_cast<double>(positives);
  p.coverage = total == 0 ? 0.0 : static_cast<double>(covered) / static_cast<double>(total);
  return p;
}

}  // namespace

CurvePoint point_at(std::span<const ScoredItem> items, double tau) {
  std::uint64_t tp = 0, predicted = 0, positives = 0, covered = 0, total = 0;
  for (const auto& it : items) {
    const bool on = it.score >= tau;
    positives += it.positive;
    total += it.size;
    if (on) {
      ++predicted;
      tp += it.positive;
      covered += it.size;
    }
  }
  return make_point(tau, tp, predicted, positives, covered, total);
}

std::vector<CurvePoint> pr_curve(std::span<const ScoredItem> items) {
  std::vector<std::size_t> order(items.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return items[a].score > items[b].score; });
  std::uint64_t positives = 0, total = 0;
  for (const auto& it : items) {
    positives += it.positive;
    total += it.size;
  }
  std::vector<CurvePoint> curve;
  std::uint64_t tp = 0, predicted = 0, covered = 0;
  for (std::size_t i = 0; i < order.size();) {
    const double tau = items[order[i]].score;
    for (; i < order.size() && items[order[i]].score == tau; ++i) {
      const auto& it = items[order[i]];
      ++predicted;
      tp += it.positive;
      covered += it.size;
    }
    curve.push_back(make_point(tau, tp, predicted, positives, covered, total));
  }
  return curve;
}

double auprc(std::span<const CurvePoint> curve) {
  if (curve.empty() || curve.front().positives == 0) {
    throw Error("eval.NoPositives", "AUPRC needs at least one positive");
  }
  std::vector<CurvePoint> points(curve.begin(), curve.end());
  std::stable_sort(points.begin(), points.end(),
                   [](const CurvePoint& a, const CurvePoint& b) { return a.recall < b.recall; });
  double area = 0.0;
  double previous_recall = 0.0;
  for (const auto& p : points) {
    area += (p.recall - previous_recall) * p.precision;
    previous_recall = p.recall;
  }
  return area;
}

std::optional<double> coverage_at_recall(std::span<const CurvePoint> curve, double r) {
  std::optional<double> best;
  for (const auto& p : curve) {
    if (p.recall + 1e-12 >= r && (!best || p.coverage < *best)) best = p.coverage;
  }
  return best;
}

std::vector<ScoredItem> scored_items(const Corpus& corpus, const ScoreModel& model,
                                     const LabelView& view) {
  if (view.kind == LabelView::Kind::Bug) {
    for (const auto& lf : corpus.functions) {
      if (!lf.bug) throw Error("eval.MissingBugLabels", lf.function.function_id + " has no bug flag");
    }
  }
  const std::span<const LabeledFunction> functions(corpus.functions);
  const FunctionIndex index(functions);
  const auto scores = score_all(model, functions, index);
  const auto sizes = deep_sizes(function_refs(functions), index, model.features);
  std::vector<ScoredItem> items(functions.size());
  for (std::size_t i = 0; i < items.size(); ++i) {
    const auto& lf = functions[i];
    ScoredItem& it = items[i];
    it.size = sizes[i].deep;
    switch (view.kind) {
      case LabelView::Kind::UnsafeOverall:
        it.score = unsafeness(scores[i]);
        it.positive = !lf.labels.is_safe();
        break;
      case LabelView::Kind::UnsafeType:
        it.score = scores[i][view.type];
        it.positive = lf.labels.contains(view.type);
        break;
      case LabelView::Kind::Bug:
        it.score = unsafeness(scores[i]);
        it.positive = *lf.bug;
        break;
    }
  }
  return items;
}

CurvePoint precision_recall(const Corpus& test, const ScoreModel& model, double tau,
                            const LabelView& view) {
  if (test.functions.empty()) throw Error("eval.EmptyCorpus", "nothing to evaluate");
  return point_at(scored_items(test, model, view), tau);
}

std::vector<CurvePoint> curve(const Corpus& test, const ScoreModel& model, const LabelView& view) {
  if (test.functions.empty()) throw Error("eval.EmptyCorpus", "nothing to evaluate");
  return pr_curve(scored_items(test, model, view));
}

namespace {

std::set<std::string> group_keys(const Corpus& corpus) {
  std::set<std::string> keys;
  for (const auto& lf : corpus.functions) {
    if (!lf.function.package.empty()) keys.insert("package:" + lf.function.package);
    if (!lf.function.report_id.empty()) keys.insert("report-id:" + lf.function.report_id);
  }
  return keys;
}

}  // namespace

ThresholdPoint threshold_point(const Corpus& test, const ScoreModel& model,
                               const CalibrationReport& calibration, const LabelView& view) {
  if (calibration.vocab_hash != model.vocab_hash() ||
      calibration.model_kind != model_kind_name(model.kind)) {
    throw Error("eval.ConfigMismatch", "calibration report was computed for a different model");
  }
  ThresholdPoint out;
  out.point = precision_recall(test, model, calibration.tau, view);
  out.epsilon = calibration.epsilon;
  out.delta = calibration.delta;
  const auto test_groups = group_keys(test);
  out.split_overlap = std::any_of(calibration.groups.begin(), calibration.groups.end(),
                                  [&](const std::string& g) { return test_groups.contains(g); });
  return out;
}

EvalReport evaluate(const Corpus& test, const ScoreModel& model,
                    const std::optional<CalibrationReport>& calibration) {
  if (test.functions.empty()) throw Error("eval.EmptyCorpus", "nothing to evaluate");
  EvalReport report;
  report.model_kind = std::string(model_kind_name(model.kind));

  const std::span<const LabeledFunction> functions(test.functions);
  const FunctionIndex index(functions);
  const auto scores = score_all(model, functions, index);
  const auto sizes = deep_sizes(function_refs(functions), index, model.features);
  const bool bug_known = std::all_of(functions.begin(), functions.end(),
                                     [](const LabeledFunction& f) { return f.bug.has_value(); });

  auto items_for = [&](auto score_of, auto positive_of) {
    std::vector<ScoredItem> items(functions.size());
    for (std::size_t i = 0; i < items.size(); ++i) {
      items[i] = {score_of(scores[i]), positive_of(functions[i]), sizes[i].deep};
    }
    return items;
  };
  auto area = [](const std::vector<CurvePoint>& c) -> std::optional<double> {
    if (c.empty() || c.front().positives == 0) return std::nullopt;
    return auprc(c);
  };

  const auto overall_items = items_for([](const Scores& s) { return unsafeness(s); },
                                       [](const LabeledFunction& f) { return !f.labels.is_safe(); });
  report.overall = pr_curve(overall_items);
  report.overall_auprc = area(report.overall);
  for (int j = 1; j <= kNumUnsafeTypes; ++j) {
    auto c = pr_curve(items_for([j](const Scores& s) { return s[j]; },
                                [j](const LabeledFunction& f) { return f.labels.contains(j); }));
    report.per_type_auprc.push_back(area(c));
    report.per_type.push_back(std::move(c));
  }
  std::vector<ScoredItem> bug_items;
  if (bug_known) {
    bug_items = items_for([](const Scores& s) { return unsafeness(s); },
                          [](const LabeledFunction& f) { return *f.bug; });
    report.bug_curve = pr_curve(bug_items);
  }
  if (calibration) {
    if (calibration->vocab_hash != model.vocab_hash() ||
        calibration->model_kind != model_kind_name(model.kind)) {
      throw Error("eval.ConfigMismatch", "calibration report was computed for a different model");
    }
    const auto test_groups = group_keys(test);
    const bool overlap = std::any_of(calibration->groups.begin(), calibration->groups.end(),
                                     [&](const std::string& g) { return test_groups.contains(g); });
    report.unsafe_at_threshold = ThresholdPoint{point_at(overall_items, calibration->tau),
                                                calibration->epsilon, calibration->delta, overlap};
    if (bug_known) {
      report.bug_at_threshold = ThresholdPoint{point_at(bug_items, calibration->tau),
                                               calibration->epsilon, calibration->delta, overlap};
    }
  }
  return report;
}

json to_json(const CurvePoint& p) {
  return {{"threshold", p.threshold},
          {"precision", p.precision},
          {"recall", p.recall},
          {"coverage", p.coverage},
          {"tp", p.tp},
          {"fp", p.fp},
          {"fn", p.fn},
          {"predicted", p.predicted},
          {"positives", p.positives},
          {"covered_size", p.covered_size},
          {"total_size", p.total_size},
          {"no_predictions", p.no_predictions},
          {"no_positives", p.no_positives}};
}

namespace {

json curve_json(const std::vector<CurvePoint>& c, const std::optional<double>& area) {
  json points = json::array();
  for (const auto& p : c) points.push_back(to_json(p));
  return {{"auprc", area ? json(*area) : json(nullptr)}, {"curve", points}};
}

json threshold_json(const ThresholdPoint& t) {
  return {{"point", to_json(t.point)}, {"epsilon", t.epsilon},
          {"delta", t.delta},          {"split_overlap", t.split_overlap}};
}

}  // namespace

json to_json(const EvalReport& r) {
  json per_type = json::object();
  for (int j = 1; j <= kNumUnsafeTypes; ++j) {
    json entry = curve_json(r.per_type[j - 1], r.per_type_auprc[j - 1]);
    entry["name"] = kLabelNames[j];
    per_type[std::to_string(j)] = std::move(entry);
  }
  json out = {{"model_kind", r.model_kind},
              {"overall", curve_json(r.overall, r.overall_auprc)},
              {"per_type", per_type}};
  if (!r.bug_curve.empty()) {
    json points = json::array();
    for (const auto& p : r.bug_curve) points.push_back(to_json(p));
    out["bug"] = {{"curve", points}};
  }
  json thresholds = json::object();
  if (r.unsafe_at_threshold) thresholds["unsafe"] = threshold_json(*r.unsafe_at_threshold);
  if (r.bug_at_threshold) thresholds["bug"] = threshold_json(*r.bug_at_threshold);
  out["threshold"] = thresholds;
  return out;
}

std::string curve_csv(std::span<const CurvePoint> curve) {
  std::ostringstream out;
  out.precision(17);
  out << "threshold,precision,recall,coverage,tp,fp,fn,predicted,covered_size,total_size\n";
  for (const auto& p : curve) {
    out << p.threshold << ',' << p.precision << ',' << p.recall << ',' << p.coverage << ','
        << p.tp << ',' << p.fp << ',' << p.fn << ',' << p.predicted << ',' << p.covered_size
        << ',' << p.total_size << '\n';
  }
  return out.str();
}

}  // namespace unsafespot
