#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "unsafespot/calibrate.hpp"
#include "unsafespot/corpus.hpp"
#include "unsafespot/model.hpp"

namespace unsafespot {

struct Proposal {
  std::string function_id;
  double unsafeness = 0.0;

  bool operator==(const Proposal&) const = default;
};

struct ProposalSet {
  std::string binary_id;
  std::vector<Proposal> members;  // unsafeness descending, ties by function_id
  double tau = 0.0;
  double epsilon = 0.0;
  double delta = 0.0;
  std::size_t functions = 0;
  double coverage = 0.0;  // deep-size share of the binary that is proposed

  bool skip() const noexcept { return members.empty(); }
};

/// û(x) = 1 iff unsafeness >= τ̂, grouped per binary (sorted by binary_id).
/// Labels are only consulted by the oracle model.
std::vector<ProposalSet> classify(const ScoreModel& model,
                                  const CalibrationReport& calibration,
                                  std::span<const LabeledFunction> functions);

/// True for ids synthesized from an address ("fn_<hex>"), which no linker
/// symbol carries.
bool is_synthesized_id(std::string_view function_id);

/// Focus-function list: one symbol per line in rank order, empty iff skip.
std::string focus_list(const ProposalSet& proposals);

/// Writes focus/<binary_id>.txt for every set, then campaign.json.
json write_campaign(std::span<const ProposalSet> proposals,
                    const std::filesystem::path& out_dir);

json to_json(const ProposalSet& proposals);

// ---------------------------------------------------------------------------
// Fuzz campaign outcomes

enum class FuzzArm { Treatment, Baseline };

struct FuzzOutcome {
  std::string target;
  FuzzArm arm = FuzzArm::Treatment;
  std::map<std::string, std::uint64_t> errors;
  double seconds = 0.0;
  std::optional<std::uint64_t> hits_treatment;
  std::optional<std::uint64_t> hits_baseline;
};

std::vector<FuzzOutcome> read_fuzz_outcomes(std::istream& in);

/// (hits_treatment + 1) / (hits_baseline + 1).
double normalized_hits(std::uint64_t hits_treatment, std::uint64_t hits_baseline);

struct TargetSummary {
  std::string target;
  double normalized_hits = 1.0;
  double seconds_treatment = 0.0;
  double seconds_baseline = 0.0;
};

struct FuzzSummary {
  std::map<std::string, std::uint64_t> errors_treatment;
  std::map<std::string, std::uint64_t> errors_baseline;
  std::uint64_t total_errors_treatment = 0;
  std::uint64_t total_errors_baseline = 0;
  double seconds_treatment = 0.0;
  double seconds_baseline = 0.0;
  double time_saved = 0.0;  // 1 - t_treatment / t_baseline
  double normalized_hit_sum = 0.0;
  std::vector<TargetSummary> targets;
};

FuzzSummary analyze_fuzz(std::span<const FuzzOutcome> outcomes);
json to_json(const FuzzSummary& summary);

}  // namespace unsafespot
