#include "unsafespot/features.hpp"

#include <algorithm>
#include <cstdio>
#include <map>
#include <set>

#include "unsafespot/error.hpp"
#include "unsafespot/random.hpp"

namespace unsafespot {

json to_json(const FeatureConfig& config) {
  return {{"max_depth", config.max_depth}, {"max_tokens", config.max_tokens}};
}

FeatureConfig feature_config_from_json(const json& j) {
  return {j.at("max_depth").get<std::size_t>(), j.at("max_tokens").get<std::size_t>()};
}

// ---------------------------------------------------------------------------
// FunctionIndex

namespace {

std::string index_key(std::string_view binary_id, std::string_view function_id) {
  std::string key;
  key.reserve(binary_id.size() + function_id.size() + 1);
  key.append(binary_id);
  key.push_back('\x1f');
  key.append(function_id);
  return key;
}

}  // namespace

FunctionIndex::FunctionIndex(std::span<const FunctionRecord> functions) {
  by_key_.reserve(functions.size());
  for (const auto& f : functions) add(f);
}

FunctionIndex::FunctionIndex(std::span<const LabeledFunction> functions) {
  by_key_.reserve(functions.size());
  for (const auto& f : functions) add(f.function);
}

void FunctionIndex::add(const FunctionRecord& f) {
  by_key_.emplace(index_key(f.binary_id, f.function_id), &f);
}

const FunctionRecord* FunctionIndex::find(std::string_view binary_id,
                                          std::string_view function_id) const {
  auto it = by_key_.find(index_key(binary_id, function_id));
  return it == by_key_.end() ? nullptr : it->second;
}

FunctionRefs function_refs(std::span<const FunctionRecord> functions) {
  FunctionRefs refs;
  refs.reserve(functions.size());
  for (const auto& f : functions) refs.push_back(&f);
  return refs;
}

FunctionRefs function_refs(std::span<const LabeledFunction> functions) {
  FunctionRefs refs;
  refs.reserve(functions.size());
  for (const auto& f : functions) refs.push_back(&f.function);
  return refs;
}

// ---------------------------------------------------------------------------
// Expansion

std::string render_instruction(const Instruction& insn) {
  if (insn.call_target && insn.call_target->external) {
    return insn.mnemonic + "," + std::string(kExternalCall);
  }
  std::string out = insn.mnemonic;
  for (const auto& op : insn.operands) {
    out += ',';
    out += op;
  }
  return out;
}

namespace {

/// Depth-first inline expansion shared by tokenize() and deep_size().
/// `visit(insn, depth)` returns false to stop the walk.
template <class Visit>
class Expander {
public:
  Expander(const FunctionIndex& index, const FeatureConfig& config, Visit visit)
      : index_(index), config_(config), visit_(std::move(visit)) {}

  bool depth_max_reached = false;

  bool expand(const FunctionRecord& f, std::size_t depth) {
    path_.push_back(&f);
    bool keep_going = true;
    for (const auto& insn : f.instructions) {
      if (!visit_(insn, depth)) {
        keep_going = false;
        break;
      }
      if (!insn.call_target || insn.call_target->external) continue;
      const FunctionRecord* callee = index_.find(f.binary_id, insn.call_target->function_id);
      if (callee == nullptr || on_path(callee)) continue;
      if (depth >= config_.max_depth) {
        depth_max_reached = true;
        continue;
      }
      if (!expand(*callee, depth + 1)) {
        keep_going = false;
        break;
      }
    }
    path_.pop_back();
    return keep_going;
  }

private:
  bool on_path(const FunctionRecord* f) const {
    return std::find(path_.begin(), path_.end(), f) != path_.end();
  }

  const FunctionIndex& index_;
  const FeatureConfig& config_;
  Visit visit_;
  std::vector<const FunctionRecord*> path_;
};

}  // namespace

TokenSequence tokenize(const FunctionRecord& function, const FunctionIndex& index,
                       const FeatureConfig& config) {
  TokenSequence out;
  auto visit = [&](const Instruction& insn, std::size_t depth) {
    if (out.tokens.size() >= config.max_tokens) {
      out.truncated = true;
      return false;
    }
    std::string token;
    token.reserve(depth * kCalleePrefix.size() + 32);
    for (std::size_t d = 0; d < depth; ++d) token += kCalleePrefix;
    token += render_instruction(insn);
    out.tokens.push_back(std::move(token));
    return true;
  };
  Expander expander(index, config, visit);
  expander.expand(function, 0);
  out.depth_max_reached = expander.depth_max_reached;
  return out;
}

SizeMetrics deep_size(const FunctionRecord& function, const FunctionIndex& index,
                      const FeatureConfig& config) {
  std::uint64_t deep = 0;
  Expander expander(index, config, [&](const Instruction&, std::size_t) {
    ++deep;
    return true;
  });
  expander.expand(function, 0);
  return {function.instructions.size(), deep};
}

std::vector<SizeMetrics> deep_sizes(const FunctionRefs& functions, const FunctionIndex& index,
                                    const FeatureConfig& config) {
  std::vector<SizeMetrics> out(functions.size());
  const auto n = static_cast<std::int64_t>(functions.size());
#pragma omp parallel for schedule(dynamic, 32)
  for (std::int64_t i = 0; i < n; ++i) out[i] = deep_size(*functions[i], index, config);
  return out;
}

namespace serial {

std::vector<SizeMetrics> deep_sizes(const FunctionRefs& functions, const FunctionIndex& index,
                                    const FeatureConfig& config) {
  std::vector<SizeMetrics> out;
  out.reserve(functions.size());
  for (const auto* f : functions) out.push_back(deep_size(*f, index, config));
  return out;
}

}  // namespace serial

// ---------------------------------------------------------------------------
// Vocabulary

Vocabulary::Vocabulary(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
  std::sort(tokens_.begin(), tokens_.end());
  tokens_.erase(std::unique(tokens_.begin(), tokens_.end()), tokens_.end());
  index_.reserve(tokens_.size());
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    index_.emplace(tokens_[i], static_cast<std::uint32_t>(i));
  }
}

Vocabulary Vocabulary::build(std::span<const TokenSequence> sequences) {
  std::set<std::string> unique;
  for (const auto& seq : sequences) unique.insert(seq.tokens.begin(), seq.tokens.end());
  return Vocabulary(std::vector<std::string>(unique.begin(), unique.end()));
}

std::int64_t Vocabulary::find(std::string_view token) const {
  auto it = index_.find(std::string(token));
  return it == index_.end() ? -1 : static_cast<std::int64_t>(it->second);
}

std::string Vocabulary::hash() const {
  std::uint64_t h = fnv1a64("vocab");
  for (const auto& t : tokens_) {
    h = fnv1a64(t, h);
    h = fnv1a64("\n", h);
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

json Vocabulary::to_json() const {
  json out = json::object();
  for (std::size_t i = 0; i < tokens_.size(); ++i) out[tokens_[i]] = i;
  return out;
}

Vocabulary Vocabulary::from_json(const json& j) {
  if (j.is_array()) return Vocabulary(j.get<std::vector<std::string>>());
  std::vector<std::pair<std::size_t, std::string>> pairs;
  for (auto it = j.begin(); it != j.end(); ++it) pairs.emplace_back(it.value().get<std::size_t>(), it.key());
  std::sort(pairs.begin(), pairs.end());
  std::vector<std::string> tokens;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    if (pairs[i].first != i) throw Error("features.CorruptVocabulary", "indices are not 0..n-1");
    tokens.push_back(pairs[i].second);
  }
  Vocabulary v(tokens);
  if (v.tokens() != tokens) throw Error("features.CorruptVocabulary", "indices are not in token order");
  return v;
}

SparseCounts vectorize(const TokenSequence& tokens, const Vocabulary& vocabulary) {
  std::map<std::uint32_t, std::uint32_t> counts;
  SparseCounts out;
  for (const auto& t : tokens.tokens) {
    const auto idx = vocabulary.find(t);
    if (idx < 0) {
      ++out.oov;
    } else {
      ++counts[static_cast<std::uint32_t>(idx)];
    }
  }
  out.counts.assign(counts.begin(), counts.end());
  return out;
}

json feature_row(const FunctionRecord& function, const SparseCounts& counts,
                 const SizeMetrics& size) {
  json c = json::object();
  for (const auto& [idx, n] : counts.counts) c[std::to_string(idx)] = n;
  return {{"function_id", function.function_id},
          {"binary_id", function.binary_id},
          {"counts", c},
          {"oov", counts.oov},
          {"deep", size.deep},
          {"shallow", size.shallow}};
}

}  // namespace unsafespot
