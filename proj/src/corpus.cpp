#include "unsafespot/corpus.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <istream>
#include <iterator>
#include <map>
#include <ostream>
#include <random>
#include <set>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

#include "unsafespot/dwarf.hpp"
#include "unsafespot/error.hpp"
#include "unsafespot/random.hpp"

namespace unsafespot {

bool is_call_mnemonic(std::string_view mnemonic) {
  return mnemonic.starts_with("call");
}

// ---------------------------------------------------------------------------
// LabelSet

LabelSet LabelSet::from_values(std::span<const int> values) {
  LabelSet set;
  bool saw_safe = false;
  for (int v : values) {
    if (v == 0) {
      saw_safe = true;
    } else {
      set.add(v);
    }
  }
  if (values.empty() || (saw_safe && !set.is_safe())) {
    throw Error("corpus.InvalidLabels",
                "label set must be {0} or a non-empty subset of 1..14");
  }
  return set;
}

void LabelSet::add(int type) {
  if (type < 1 || type > kNumUnsafeTypes) {
    throw Error("corpus.InvalidLabels", "unsafe type out of range: " + std::to_string(type));
  }
  bits_ = static_cast<std::uint16_t>((bits_ & ~1u) | (1u << type));
}

void LabelSet::merge(const LabelSet& other) {
  for (int j = 1; j <= kNumUnsafeTypes; ++j) {
    if (other.contains(j)) add(j);
  }
}

std::vector<int> LabelSet::values() const {
  std::vector<int> out;
  for (int j = 0; j < kNumLabels; ++j) {
    if (contains(j)) out.push_back(j);
  }
  return out;
}

std::string_view split_name(Split split) {
  switch (split) {
    case Split::Train: return "train";
    case Split::Val: return "val";
    case Split::Test: return "test";
  }
  return "train";
}

// ---------------------------------------------------------------------------
// Debug-line map

const LineEntry* DebugLineMap::lookup(std::uint64_t address) const {
  auto it = std::upper_bound(entries.begin(), entries.end(), address,
                             [](std::uint64_t a, const LineEntry& e) { return a < e.address; });
  if (it == entries.begin()) return nullptr;
  --it;
  return address < it->end ? &*it : nullptr;
}

namespace {

std::uint64_t parse_hex(std::string_view text, std::string_view code) {
  if (text.starts_with("0x") || text.starts_with("0X")) text.remove_prefix(2);
  std::uint64_t value = 0;
  auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), value, 16);
  if (text.empty() || ec != std::errc() || ptr != text.data() + text.size()) {
    throw Error(std::string(code), "bad hex address '" + std::string(text) + "'");
  }
  return value;
}

}  // namespace

DebugLineMap ingest_debug_lines_text(std::istream& in) {
  DebugLineMap map;
  std::string raw;
  std::size_t lineno = 0;
  while (std::getline(in, raw)) {
    ++lineno;
    std::istringstream fields(raw);
    std::vector<std::string> tokens{std::istream_iterator<std::string>(fields),
                                    std::istream_iterator<std::string>()};
    if (tokens.empty() || tokens.front().starts_with('#')) continue;
    if (tokens.size() < 3) {
      throw Error("corpus.DecodeError", "line " + std::to_string(lineno) +
                                            ": expected '<hex-addr> <file> <line>'");
    }
    LineEntry entry;
    entry.address = parse_hex(tokens.front(), "corpus.DecodeError");
    for (std::size_t i = 1; i + 1 < tokens.size(); ++i) {
      if (i > 1) entry.file += ' ';
      entry.file += tokens[i];
    }
    const std::string& line_text = tokens.back();
    auto [ptr, ec] = std::from_chars(line_text.data(), line_text.data() + line_text.size(),
                                     entry.line);
    if (ec != std::errc() || ptr != line_text.data() + line_text.size() || entry.line == 0) {
      throw Error("corpus.DecodeError",
                  "line " + std::to_string(lineno) + ": line number must be a positive integer");
    }
    if (!map.entries.empty()) {
      LineEntry& last = map.entries.back();
      if (entry.address < last.address) {
        throw Error("corpus.NonMonotoneAddresses",
                    "line " + std::to_string(lineno) + ": address decreases");
      }
      if (entry.address == last.address) {
        last = std::move(entry);
        continue;
      }
      last.end = entry.address;
    }
    map.entries.push_back(std::move(entry));
  }
  return map;
}

DebugLineMap ingest_debug_lines(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("corpus.IOError", "cannot open " + path.string(), ErrorKind::Runtime);
  std::vector<std::uint8_t> bytes{std::istreambuf_iterator<char>(in),
                                  std::istreambuf_iterator<char>()};
  if (dwarf::ElfImage::has_elf_magic(bytes)) {
    return dwarf::read_elf_line_map(std::move(bytes));
  }
  std::istringstream text(std::string(bytes.begin(), bytes.end()));
  return ingest_debug_lines_text(text);
}

bool same_source_file(std::string_view a, std::string_view b) {
  if (a == b) return true;
  if (a.size() < b.size()) std::swap(a, b);
  return !b.empty() && a.ends_with(b) && a[a.size() - b.size() - 1] == '/';
}

// ---------------------------------------------------------------------------
// Spans

std::vector<SourceSpan> read_spans(std::istream& in) {
  json doc;
  try {
    in >> doc;
  } catch (const json::exception& e) {
    throw Error("corpus.MalformedSpan", e.what());
  }
  if (!doc.is_array()) throw Error("corpus.MalformedSpan", "spans.json must be an array");
  std::vector<SourceSpan> spans;
  spans.reserve(doc.size());
  for (std::size_t i = 0; i < doc.size(); ++i) {
    const json& j = doc[i];
    try {
      SourceSpan span;
      span.file = j.at("file").get<std::string>();
      const auto start = j.at("line_start").get<std::int64_t>();
      const auto end = j.at("line_end").get<std::int64_t>();
      if (start < 1 || end < start) {
        throw Error("corpus.MalformedSpan", "span " + std::to_string(i) + ": bad line range");
      }
      span.line_start = static_cast<std::uint32_t>(start);
      span.line_end = static_cast<std::uint32_t>(end);
      const json& kind = j.at("kind");
      if (kind.is_string() && kind.get<std::string>() == "bug") {
        span.kind = SourceSpan::kBug;
      } else {
        span.kind = kind.get<int>();
        if (span.kind < 1 || span.kind > kNumUnsafeTypes) {
          throw Error("corpus.MalformedSpan", "span " + std::to_string(i) + ": kind out of range");
        }
      }
      spans.push_back(std::move(span));
    } catch (const json::exception& e) {
      throw Error("corpus.MalformedSpan", "span " + std::to_string(i) + ": " + e.what());
    }
  }
  return spans;
}

json spans_to_json(std::span<const SourceSpan> spans) {
  json out = json::array();
  for (const auto& s : spans) {
    json kind = s.is_bug() ? json("bug") : json(s.kind);
    out.push_back({{"file", s.file}, {"line_start", s.line_start},
                   {"line_end", s.line_end}, {"kind", kind}});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Function records

namespace {

std::uint64_t read_address(const json& j) {
  if (j.is_string()) return parse_hex(j.get<std::string>(), "corpus.MalformedRecord");
  if (j.is_number_unsigned() || (j.is_number_integer() && j.get<std::int64_t>() >= 0)) {
    return j.get<std::uint64_t>();
  }
  throw Error("corpus.MalformedRecord", "address must be a non-negative integer or hex string");
}

void check_order(const FunctionRecord& f) {
  if (f.start > f.end) {
    throw Error("corpus.AddressOrderViolation", f.function_id + ": start > end");
  }
  for (std::size_t i = 0; i < f.instructions.size(); ++i) {
    const auto addr = f.instructions[i].address;
    if (addr < f.start || addr >= f.end) {
      throw Error("corpus.AddressOrderViolation", f.function_id + ": instruction outside [start, end)");
    }
    if (i > 0 && addr <= f.instructions[i - 1].address) {
      throw Error("corpus.AddressOrderViolation", f.function_id + ": instructions not sorted");
    }
  }
}

}  // namespace

FunctionRecord function_from_json(const json& j) {
  FunctionRecord f;
  f.function_id = j.at("function_id").get<std::string>();
  f.binary_id = j.at("binary_id").get<std::string>();
  f.start = read_address(j.at("start"));
  f.end = read_address(j.at("end"));
  if (f.function_id.empty()) throw Error("corpus.MalformedRecord", "empty function_id");
  for (const json& ji : j.at("instructions")) {
    Instruction insn;
    insn.address = read_address(ji.at("addr"));
    insn.mnemonic = ji.at("mnemonic").get<std::string>();
    if (auto it = ji.find("operands"); it != ji.end()) {
      insn.operands = it->get<std::vector<std::string>>();
    }
    if (auto it = ji.find("call_target"); it != ji.end() && !it->is_null()) {
      const auto target = it->get<std::string>();
      if (!is_call_mnemonic(insn.mnemonic)) {
        throw Error("corpus.MalformedRecord",
                    f.function_id + ": call_target on non-call instruction '" + insn.mnemonic + "'");
      }
      insn.call_target = target == kExternalCall ? CallTarget{true, {}} : CallTarget{false, target};
    }
    f.instructions.push_back(std::move(insn));
  }
  if (auto it = j.find("callees"); it != j.end()) {
    f.callees = it->get<std::vector<std::string>>();
  }
  if (auto it = j.find("package"); it != j.end() && !it->is_null()) {
    f.package = it->get<std::string>();
  }
  if (auto it = j.find("report_id"); it != j.end() && !it->is_null()) {
    f.report_id = it->get<std::string>();
  }
  check_order(f);
  return f;
}

json function_to_json(const FunctionRecord& f) {
  json insns = json::array();
  for (const auto& insn : f.instructions) {
    json target = nullptr;
    if (insn.call_target) {
      target = insn.call_target->external ? std::string(kExternalCall) : insn.call_target->function_id;
    }
    insns.push_back({{"addr", insn.address}, {"mnemonic", insn.mnemonic},
                     {"operands", insn.operands}, {"call_target", target}});
  }
  json out = {{"function_id", f.function_id}, {"binary_id", f.binary_id},
              {"start", f.start},             {"end", f.end},
              {"instructions", insns},        {"callees", f.callees}};
  if (!f.package.empty()) out["package"] = f.package;
  if (!f.report_id.empty()) out["report_id"] = f.report_id;
  return out;
}

namespace {

template <class Parse>
auto read_jsonl(std::istream& in, Parse parse) {
  std::vector<decltype(parse(json{}))> out;
  std::set<std::pair<std::string, std::string>> seen;
  std::string raw;
  std::size_t lineno = 0;
  while (std::getline(in, raw)) {
    ++lineno;
    if (raw.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      auto record = parse(json::parse(raw));
      const FunctionRecord& f = [&]() -> const FunctionRecord& {
        if constexpr (std::is_same_v<decltype(record), FunctionRecord>) {
          return record;
        } else {
          return record.function;
        }
      }();
      if (!seen.emplace(f.binary_id, f.function_id).second) {
        throw Error("corpus.DuplicateFunction", f.function_id + " in binary " + f.binary_id);
      }
      out.push_back(std::move(record));
    } catch (const json::exception& e) {
      throw Error("corpus.MalformedRecord", "line " + std::to_string(lineno) + ": " + e.what());
    } catch (const Error& e) {
      if (e.code() == "corpus.DuplicateFunction" || e.code() == "corpus.AddressOrderViolation") throw;
      throw Error(e.code(), "line " + std::to_string(lineno) + ": " + e.what(), e.kind());
    }
  }
  return out;
}

}  // namespace

std::vector<FunctionRecord> ingest_disassembly(std::istream& in) {
  return read_jsonl(in, [](const json& j) { return function_from_json(j); });
}

void write_functions(std::ostream& out, std::span<const FunctionRecord> functions) {
  for (const auto& f : functions) out << function_to_json(f).dump() << '\n';
}

LabeledFunction labeled_from_json(const json& j) {
  LabeledFunction lf;
  lf.function = function_from_json(j);
  lf.labels = LabelSet::from_values(j.at("u").get<std::vector<int>>());
  if (auto it = j.find("y"); it != j.end() && !it->is_null()) {
    const int y = it->get<int>();
    if (y != 0 && y != 1) throw Error("corpus.MalformedRecord", "y must be 0, 1 or null");
    lf.bug = y == 1;
  }
  return lf;
}

json labeled_to_json(const LabeledFunction& f) {
  json out = function_to_json(f.function);
  out["u"] = f.labels.values();
  out["y"] = f.bug ? json(*f.bug ? 1 : 0) : json(nullptr);
  return out;
}

std::vector<LabeledFunction> read_labeled(std::istream& in) {
  return read_jsonl(in, [](const json& j) { return labeled_from_json(j); });
}

void write_labeled(std::ostream& out, std::span<const LabeledFunction> functions) {
  for (const auto& f : functions) out << labeled_to_json(f).dump() << '\n';
}

// ---------------------------------------------------------------------------
// Label projection

json LabelProjection::provenance() const {
  return {{"instructions", instructions},
          {"unmapped_instructions", unmapped_instructions},
          {"bug_labels", bug_labels}};
}

namespace {

struct ProjectionContext {
  const DebugLineMap& lines;
  std::span<const SourceSpan> spans;
  // Line-map file name -> spans naming the same source file.
  std::unordered_map<std::string, std::vector<const SourceSpan*>> spans_by_file;
  bool bug_labels = false;

  ProjectionContext(const DebugLineMap& l, std::span<const SourceSpan> s) : lines(l), spans(s) {
    for (const auto& span : spans) bug_labels |= span.is_bug();
    for (const auto& entry : lines.entries) {
      if (spans_by_file.contains(entry.file)) continue;
      auto& matching = spans_by_file[entry.file];
      for (const auto& span : spans) {
        if (same_source_file(entry.file, span.file)) matching.push_back(&span);
      }
    }
  }

  LabeledFunction label(const FunctionRecord& f, std::size_t& unmapped) const {
    LabeledFunction out{f, LabelSet{}, std::nullopt};
    bool bug = false;
    for (const auto& insn : f.instructions) {
      const LineEntry* entry = lines.lookup(insn.address);
      if (entry == nullptr) {
        ++unmapped;
        continue;
      }
      for (const SourceSpan* span : spans_by_file.at(entry->file)) {
        if (entry->line < span->line_start || entry->line > span->line_end) continue;
        if (span->is_bug()) {
          bug = true;
        } else {
          out.labels.add(span->kind);
        }
      }
    }
    if (bug_labels) out.bug = bug;
    return out;
  }
};

}  // namespace

LabelProjection project_labels(std::span<const FunctionRecord> functions,
                               const DebugLineMap& lines,
                               std::span<const SourceSpan> spans) {
  const ProjectionContext ctx(lines, spans);
  LabelProjection result;
  result.bug_labels = ctx.bug_labels;
  result.functions.resize(functions.size());
  std::size_t unmapped = 0;
  std::size_t instructions = 0;
  const auto n = static_cast<std::int64_t>(functions.size());
#pragma omp parallel for schedule(dynamic, 32) reduction(+ : unmapped, instructions)
  for (std::int64_t i = 0; i < n; ++i) {
    result.functions[i] = ctx.label(functions[i], unmapped);
    instructions += functions[i].instructions.size();
  }
  result.unmapped_instructions = unmapped;
  result.instructions = instructions;
  return result;
}

namespace serial {

LabelProjection project_labels(std::span<const FunctionRecord> functions,
                               const DebugLineMap& lines,
                               std::span<const SourceSpan> spans) {
  const ProjectionContext ctx(lines, spans);
  LabelProjection result;
  result.bug_labels = ctx.bug_labels;
  result.functions.reserve(functions.size());
  for (const auto& f : functions) {
    result.functions.push_back(ctx.label(f, result.unmapped_instructions));
    result.instructions += f.instructions.size();
  }
  return result;
}

}  // namespace serial

// ---------------------------------------------------------------------------
// Splitting

GroupingKey parse_grouping_key(std::string_view text) {
  if (text == "package") return GroupingKey::Package;
  if (text == "report-id" || text == "report_id") return GroupingKey::ReportId;
  throw Error("corpus.InvalidGroupingKey", "expected package or report-id, got " + std::string(text));
}

const std::string& group_of(const FunctionRecord& f, GroupingKey key) {
  return key == GroupingKey::Package ? f.package : f.report_id;
}

std::array<Corpus, 3> split_corpus(std::span<const LabeledFunction> functions,
                                   GroupingKey key, SplitFractions fractions,
                                   std::uint64_t seed) {
  if (functions.empty()) throw Error("corpus.EmptyCorpus", "nothing to split");
  if (!(fractions.train > 0 && fractions.val > 0 && fractions.test > 0) ||
      std::abs(fractions.train + fractions.val + fractions.test - 1.0) > 1e-9) {
    throw Error("corpus.InvalidFractions", "fractions must be positive and sum to 1");
  }
  std::map<std::string, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < functions.size(); ++i) {
    const auto& g = group_of(functions[i].function, key);
    if (g.empty()) throw Error("corpus.MissingGroupKey", functions[i].function.function_id);
    groups[g].push_back(i);
  }
  std::vector<std::string> order;
  order.reserve(groups.size());
  for (const auto& [name, members] : groups) order.push_back(name);
  std::mt19937_64 rng(seed);
  seeded_shuffle(std::span<std::string>(order), rng);

  const double n = static_cast<double>(functions.size());
  std::vector<int> assignment(functions.size(), 0);
  std::array<std::size_t, 3> group_counts{};
  std::size_t before = 0;
  for (const auto& name : order) {
    const double position = static_cast<double>(before) / n;
    const int split = position < fractions.train                   ? 0
                      : position < fractions.train + fractions.val ? 1
                                                                   : 2;
    ++group_counts[split];
    for (std::size_t i : groups[name]) assignment[i] = split;
    before += groups[name].size();
  }

  std::array<Corpus, 3> out;
  const std::array<Split, 3> kinds = {Split::Train, Split::Val, Split::Test};
  for (int s = 0; s < 3; ++s) {
    out[s].name = std::string(split_name(kinds[s]));
    out[s].split = kinds[s];
    out[s].provenance = {{"seed", seed},
                         {"grouping_key", key == GroupingKey::Package ? "package" : "report-id"},
                         {"fractions", {fractions.train, fractions.val, fractions.test}},
                         {"groups", group_counts[s]}};
  }
  for (std::size_t i = 0; i < functions.size(); ++i) {
    out[assignment[i]].functions.push_back(functions[i]);
  }
  return out;
}

}  // namespace unsafespot
