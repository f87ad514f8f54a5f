#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "unsafespot/corpus.hpp"
#include "unsafespot/features.hpp"

namespace unsafespot {

/// Power-of-two histogram: bin b counts values in [2^b, 2^(b+1)); values
/// below 1 go to `below_one`.
struct Log2Histogram {
  std::vector<std::uint64_t> bins;
  std::uint64_t below_one = 0;

  void add(double value);
  std::uint64_t total() const;
};

struct CorpusStats {
  std::size_t functions = 0;
  std::size_t safe = 0;
  std::size_t unsafe = 0;
  std::size_t bug = 0;
  std::size_t bug_known = 0;  // functions carrying a bug flag
  std::array<std::size_t, kNumLabels> per_type{};  // index 0 = safe
  std::array<std::array<std::size_t, kNumLabels>, kNumLabels> cooccurrence{};
  Log2Histogram deep_size;
  Log2Histogram semantic_size;

  double safe_fraction() const;
  double unsafe_fraction() const;
  /// Bug fraction relative to all functions.
  double bug_fraction() const;
};

CorpusStats corpus_stats(const Corpus& corpus, const FeatureConfig& config);
json to_json(const CorpusStats& stats);

}  // namespace unsafespot
