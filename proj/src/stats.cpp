#include "unsafespot/stats.hpp"

#include <cmath>

#include "unsafespot/error.hpp"

namespace unsafespot {

void Log2Histogram::add(double value) {
  if (!(value >= 1.0)) {
    ++below_one;
    return;
  }
  const auto bin = static_cast<std::size_t>(std::floor(std::log2(value)));
  if (bins.size() <= bin) bins.resize(bin + 1, 0);
  ++bins[bin];
}

std::uint64_t Log2Histogram::total() const {
  std::uint64_t n = below_one;
  for (auto b : bins) n += b;
  return n;
}

double CorpusStats::safe_fraction() const {
  return functions == 0 ? 0.0 : static_cast<double>(safe) / static_cast<double>(functions);
}

double CorpusStats::unsafe_fraction() const {
  return functions == 0 ? 0.0 : static_cast<double>(unsafe) / static_cast<double>(functions);
}

double CorpusStats::bug_fraction() const {
  return functions == 0 ? 0.0 : static_cast<double>(bug) / static_cast<double>(functions);
}

CorpusStats corpus_stats(const Corpus& corpus, const FeatureConfig& config) {
  if (corpus.functions.empty()) throw Error("corpus.EmptyCorpus", "corpus has no functions");
  const FunctionIndex index(std::span<const LabeledFunction>(corpus.functions));
  const auto sizes = deep_sizes(function_refs(std::span<const LabeledFunction>(corpus.functions)),
                                index, config);
  CorpusStats s;
  s.functions = corpus.functions.size();
  for (std::size_t i = 0; i < corpus.functions.size(); ++i) {
    const auto& lf = corpus.functions[i];
    if (lf.labels.is_safe()) {
      ++s.safe;
    } else {
      ++s.unsafe;
    }
    if (lf.bug) {
      ++s.bug_known;
      if (*lf.bug) ++s.bug;
    }
    const auto labels = lf.labels.values();
    for (int a : labels) {
      ++s.per_type[a];
      for (int b : labels) ++s.cooccurrence[a][b];
    }
    s.deep_size.add(static_cast<double>(sizes[i].deep));
    s.semantic_size.add(sizes[i].semantic());
  }
  return s;
}

namespace {

json histogram_json(const Log2Histogram& h) {
  return {{"below_one", h.below_one}, {"bins", h.bins}, {"total", h.total()}};
}

}  // namespace

json to_json(const CorpusStats& s) {
  json per_type = json::object();
  for (int j = 0; j < kNumLabels; ++j) per_type[std::to_string(j)] = s.per_type[j];
  json cooc = json::array();
  for (const auto& row : s.cooccurrence) cooc.push_back(row);
  return {{"functions", s.functions},
          {"safe", s.safe},
          {"unsafe", s.unsafe},
          {"bug", s.bug},
          {"bug_known", s.bug_known},
          {"safe_fraction", s.safe_fraction()},
          {"unsafe_fraction", s.unsafe_fraction()},
          {"bug_fraction", s.bug_fraction()},
          {"per_type", per_type},
          {"cooccurrence", cooc},
          {"deep_size", histogram_json(s.deep_size)},
          {"semantic_size", histogram_json(s.semantic_size)}};
}

}  // namespace unsafespot
