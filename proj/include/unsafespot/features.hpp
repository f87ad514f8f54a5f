#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "unsafespot/corpus.hpp"

namespace unsafespot {

/// Prefix added once per call-depth level to inlined callee tokens.
inline constexpr std::string_view kCalleePrefix = "|<C>|";

struct FeatureConfig {
  std::size_t max_depth = 2;
  std::size_t max_tokens = 4096;

  bool operator==(const FeatureConfig&) const = default;
};

json to_json(const FeatureConfig& config);
FeatureConfig feature_config_from_json(const json& j);

/// Resolves (binary_id, function_id) to a record. Holds pointers into the
/// collection it was built from.
class FunctionIndex {
public:
  FunctionIndex() = default;
  explicit FunctionIndex(std::span<const FunctionRecord> functions);
  explicit FunctionIndex(std::span<const LabeledFunction> functions);

  const FunctionRecord* find(std::string_view binary_id,
                             std::string_view function_id) const;

private:
  void add(const FunctionRecord& f);
  std::unordered_map<std::string, const FunctionRecord*> by_key_;
};

using FunctionRefs = std::vector<const FunctionRecord*>;
FunctionRefs function_refs(std::span<const FunctionRecord> functions);
FunctionRefs function_refs(std::span<const LabeledFunction> functions);

struct TokenSequence {
  std::vector<std::string> tokens;
  bool truncated = false;
  bool depth_max_reached = false;
};

/// `mnemonic,op1,op2`; calls to external code render as `call,externalcall`.
std::string render_instruction(const Instruction& insn);

/// Renders a function and inlines internal callees at their call sites, each
/// callee token carrying one prefix per depth level. A callee already on the
/// current expansion path is not expanded again.
TokenSequence tokenize(const FunctionRecord& function, const FunctionIndex& index,
                       const FeatureConfig& config);

struct SizeMetrics {
  std::uint64_t shallow = 0;
  std::uint64_t deep = 0;

  /// deep / shallow; 1 for an empty function.
  double semantic() const {
    return shallow == 0 ? 1.0
                        : static_cast<double>(deep) / static_cast<double>(shallow);
  }
  bool operator==(const SizeMetrics&) const = default;
};

/// Instruction count of the untruncated expansion produced by tokenize().
SizeMetrics deep_size(const FunctionRecord& function, const FunctionIndex& index,
                      const FeatureConfig& config);

std::vector<SizeMetrics> deep_sizes(const FunctionRefs& functions,
                                    const FunctionIndex& index,
                                    const FeatureConfig& config);

class Vocabulary {
public:
  Vocabulary() = default;
  /// Tokens are indexed in lexicographic order; duplicates are dropped.
  explicit Vocabulary(std::vector<std::string> tokens);

  static Vocabulary build(std::span<const TokenSequence> sequences);

  std::size_t size() const noexcept { return tokens_.size(); }
  const std::vector<std::string>& tokens() const noexcept { return tokens_; }
  /// Index of token or -1.
  std::int64_t find(std::string_view token) const;
  /// FNV-1a 64 over the ordered token list, as 16 hex digits.
  std::string hash() const;

  json to_json() const;
  static Vocabulary from_json(const json& j);

private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, std::uint32_t> index_;
};

struct SparseCounts {
  std::vector<std::pair<std::uint32_t, std::uint32_t>> counts;  // sorted by index
  std::uint32_t oov = 0;

  bool operator==(const SparseCounts&) const = default;
};

SparseCounts vectorize(const TokenSequence& tokens, const Vocabulary& vocabulary);

/// One features.jsonl row.
json feature_row(const FunctionRecord& function, const SparseCounts& counts,
                 const SizeMetrics& size);

namespace serial {
std::vector<SizeMetrics> deep_sizes(const FunctionRefs& functions,
                                    const FunctionIndex& index,
                                    const FeatureConfig& config);
}  // namespace serial

}  // namespace unsafespot
