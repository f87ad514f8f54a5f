#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "unsafespot/corpus.hpp"

namespace unsafespot {

/// Parameters for a generated corpus whose ground truth is known by
/// construction. Each binary is its own package with its own address range.
struct SynthConfig {
  std::size_t binaries = 20;
  std::size_t functions_per_binary = 40;
  std::size_t min_instructions = 4;
  std::size_t max_instructions = 24;
  double unsafe_rate = 0.25;
  double bug_rate = 0.2;  // among unsafe functions
  /// Comma-joined instruction planted in unsafe functions.
  std::string marker = "mov,rax,qword ptr [rdi]";
  double marker_rate = 1.0;       // P(marker | unsafe)
  double safe_marker_rate = 0.0;  // P(marker | safe)
  /// Comma-joined instruction planted in safe functions at `decoy_rate`.
  std::string decoy = "xor,eax,eax";
  double decoy_rate = 0.0;
  double internal_call_rate = 0.3;
  double external_call_rate = 0.2;
  std::string package_prefix = "pkg";
  std::uint64_t seed = 0;
};

struct SynthCorpus {
  std::vector<FunctionRecord> functions;
  DebugLineMap lines;
  std::vector<SourceSpan> spans;
};

SynthCorpus make_synthetic(const SynthConfig& config);

}  // namespace unsafespot
