#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

namespace unsafespot {

using json = nlohmann::json;

/// Unsafe types 1..14; label 0 means "safe".
inline constexpr int kNumUnsafeTypes = 14;
inline constexpr int kNumLabels = kNumUnsafeTypes + 1;

inline constexpr std::string_view kExternalCall = "externalcall";

inline constexpr std::array<std::string_view, kNumLabels> kLabelNames = {
    "Safe",
    "CallToUnsafeFunction(internal)",
    "CallToUnsafeFunction(external)",
    "UseOfInlineAssembly",
    "InitializingTypeWith",
    "CastOfPointerToInt",
    "UseOfMutableStatic",
    "UseOfExternStatic",
    "DerefOfRawPointer",
    "AssignToDroppingUnionField",
    "AccessToUnionField",
    "MutationOfLayoutConstrainedField",
    "BorrowOfLayoutConstrainedField",
    "CallToFunctionWith",
    "UnsafeFunction",
};

struct CallTarget {
  bool external = false;
  std::string function_id;  // empty when external

  bool operator==(const CallTarget&) const = default;
};

struct Instruction {
  std::uint64_t address = 0;
  std::string mnemonic;
  std::vector<std::string> operands;
  std::optional<CallTarget> call_target;

  bool operator==(const Instruction&) const = default;
};

/// "call", "callq", "calll" ... Only call-class instructions may carry a target.
bool is_call_mnemonic(std::string_view mnemonic);

struct FunctionRecord {
  std::string function_id;
  std::string binary_id;
  std::uint64_t start = 0;
  std::uint64_t end = 0;  // exclusive
  std::vector<Instruction> instructions;
  std::vector<std::string> callees;
  // Grouping keys used by split_corpus; empty when unknown.
  std::string package;
  std::string report_id;

  bool operator==(const FunctionRecord&) const = default;
};

/// Subset of {0..14} with the invariant that {0} excludes every unsafe type.
class LabelSet {
public:
  LabelSet() = default;  // {0}

  static LabelSet from_values(std::span<const int> values);

  /// Adds unsafe type 1..14; drops the safe marker.
  void add(int type);
  void merge(const LabelSet& other);

  bool is_safe() const noexcept { return bits_ == 1u; }
  bool contains(int label) const noexcept {
    return label >= 0 && label < kNumLabels && (bits_ >> label) & 1u;
  }
  std::vector<int> values() const;
  std::uint16_t bits() const noexcept { return bits_; }

  bool operator==(const LabelSet&) const = default;

private:
  std::uint16_t bits_ = 1u;
};

struct LabeledFunction {
  FunctionRecord function;
  LabelSet labels;
  std::optional<bool> bug;

  bool operator==(const LabeledFunction&) const = default;
};

enum class Split { Train, Val, Test };
std::string_view split_name(Split split);

struct Corpus {
  std::string name;
  Split split = Split::Train;
  std::vector<LabeledFunction> functions;
  json provenance = json::object();
};

// ---------------------------------------------------------------------------
// Debug-line map

struct LineEntry {
  std::uint64_t address = 0;
  std::string file;
  std::uint32_t line = 0;
  // Exclusive end of the address range this row describes.
  std::uint64_t end = UINT64_MAX;

  bool operator==(const LineEntry&) const = default;
};

/// Address -> (file, line) table. Entries are sorted and non-overlapping.
struct DebugLineMap {
  std::vector<LineEntry> entries;

  const LineEntry* lookup(std::uint64_t address) const;
};

/// Parses the `<hex-addr> <file> <line>` text format. Blank lines and lines
/// starting with '#' are ignored. A row covers addresses up to the next row.
DebugLineMap ingest_debug_lines_text(std::istream& in);

/// Reads either an ELF file (decoding its .debug_line section) or the text
/// format, chosen by the file's magic bytes.
DebugLineMap ingest_debug_lines(const std::filesystem::path& path);

/// True when both names denote the same source file: equal, or one is a
/// '/'-delimited suffix of the other ("src/lib.rs" vs "/build/x/src/lib.rs").
bool same_source_file(std::string_view a, std::string_view b);

// ---------------------------------------------------------------------------
// Source spans

struct SourceSpan {
  static constexpr int kBug = -1;

  std::string file;
  std::uint32_t line_start = 1;
  std::uint32_t line_end = 1;  // inclusive
  int kind = kBug;             // 1..14 or kBug

  bool is_bug() const noexcept { return kind == kBug; }
  bool operator==(const SourceSpan&) const = default;
};

std::vector<SourceSpan> read_spans(std::istream& in);
json spans_to_json(std::span<const SourceSpan> spans);

// ---------------------------------------------------------------------------
// Ingestion and serialization

FunctionRecord function_from_json(const json& j);
json function_to_json(const FunctionRecord& f);

/// Reads functions.jsonl. Errors carry the 1-based line number.
std::vector<FunctionRecord> ingest_disassembly(std::istream& in);
void write_functions(std::ostream& out, std::span<const FunctionRecord> functions);

LabeledFunction labeled_from_json(const json& j);
json labeled_to_json(const LabeledFunction& f);
std::vector<LabeledFunction> read_labeled(std::istream& in);
void write_labeled(std::ostream& out, std::span<const LabeledFunction> functions);

// ---------------------------------------------------------------------------
// Label projection

struct LabelProjection {
  std::vector<LabeledFunction> functions;
  std::size_t instructions = 0;
  std::size_t unmapped_instructions = 0;  // no debug-line entry
  bool bug_labels = false;                // at least one bug span was given

  json provenance() const;
};

/// Projects source spans onto instructions through the line map. A function
/// takes the union of its instructions' unsafe types; bug flags are set only
/// when the span list contains at least one bug span.
LabelProjection project_labels(std::span<const FunctionRecord> functions,
                               const DebugLineMap& lines,
                               std::span<const SourceSpan> spans);

namespace serial {
LabelProjection project_labels(std::span<const FunctionRecord> functions,
                               const DebugLineMap& lines,
                               std::span<const SourceSpan> spans);
}  // namespace serial

// ---------------------------------------------------------------------------
// Splitting

enum class GroupingKey { Package, ReportId };
GroupingKey parse_grouping_key(std::string_view text);
const std::string& group_of(const FunctionRecord& f, GroupingKey key);

struct SplitFractions {
  double train = 0.5;
  double val = 0.25;
  double test = 0.25;
};

/// Seeded group-atomic split. Groups are sorted, shuffled with a Fisher-Yates
/// pass driven by mt19937_64(seed), and assigned in shuffled order to the
/// split whose cumulative fraction contains the group's first function.
std::array<Corpus, 3> split_corpus(std::span<const LabeledFunction> functions,
                                   GroupingKey key, SplitFractions fractions,
                                   std::uint64_t seed);

}  // namespace unsafespot
