#include "unsafespot/propose.hpp"

#include <algorithm>
#include <fstream>
#include <istream>
#include <regex>

#include "unsafespot/error.hpp"

namespace unsafespot {

std::vector<ProposalSet> classify(const ScoreModel& model, const CalibrationReport& calibration,
                                  std::span<const LabeledFunction> functions) {
  if (calibration.vocab_hash != model.vocab_hash() ||
      calibration.model_kind != model_kind_name(model.kind)) {
    throw Error("propose.ConfigMismatch", "calibration report was computed for a different model");
  }
  const FunctionIndex index(functions);
  const auto scores = score_all(model, functions, index);
  const auto sizes = deep_sizes(function_refs(functions), index, model.features);

  struct Binary {
    ProposalSet set;
    std::uint64_t total = 0;
    std::uint64_t covered = 0;
  };
  std::map<std::string, Binary> binaries;
  for (std::size_t i = 0; i < functions.size(); ++i) {
    const auto& f = functions[i].function;
    auto& b = binaries[f.binary_id];
    b.set.binary_id = f.binary_id;
    ++b.set.functions;
    b.total += sizes[i].deep;
    const double u = unsafeness(scores[i]);
    if (u >= calibration.tau) {
      b.set.members.push_back({f.function_id, u});
      b.covered += sizes[i].deep;
    }
  }
  std::vector<ProposalSet> out;
  out.reserve(binaries.size());
  for (auto& [id, b] : binaries) {
    std::sort(b.set.members.begin(), b.set.members.end(), [](const Proposal& x, const Proposal& y) {
      return x.unsafeness != y.unsafeness ? x.unsafeness > y.unsafeness : x.function_id < y.function_id;
    });
    b.set.tau = calibration.tau;
    b.set.epsilon = calibration.epsilon;
    b.set.delta = calibration.delta;
    b.set.coverage = b.total == 0 ? 0.0 : static_cast<double>(b.covered) / static_cast<double>(b.total);
    out.push_back(std::move(b.set));
  }
  return out;
}

bool is_synthesized_id(std::string_view function_id) {
  static const std::regex pattern("fn_(0x)?[0-9a-fA-F]+");
  return std::regex_match(function_id.begin(), function_id.end(), pattern);
}

std::string focus_list(const ProposalSet& proposals) {
  std::string out;
  for (const auto& m : proposals.members) {
    if (is_synthesized_id(m.function_id)) {
      throw Error("propose.UnmappableSymbol", m.function_id + " has no linkable symbol name");
    }
    out += m.function_id;
    out += '\n';
  }
  return out;
}

namespace {

std::string file_stem(const std::string& binary_id) {
  std::string stem = binary_id;
  for (char& c : stem) {
    const bool ok = std::isalnum(static_cast<unsigned char>(c)) || c == '.' || c == '_' || c == '-';
    if (!ok) c = '_';
  }
  if (stem.empty() || stem == "." || stem == "..") stem = "_" + stem;
  return stem;
}

void write_atomically(const std::filesystem::path& path, const std::string& content) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("propose.IOError", "cannot write " + tmp.string(), ErrorKind::Runtime);
    out << content;
    if (!out) throw Error("propose.IOError", "write failed for " + tmp.string(), ErrorKind::Runtime);
  }
  std::filesystem::rename(tmp, path);
}

}  // namespace

json to_json(const ProposalSet& p) {
  json members = json::array();
  for (const auto& m : p.members) members.push_back({{"function_id", m.function_id}, {"unsafeness", m.unsafeness}});
  return {{"binary_id", p.binary_id}, {"members", members}, {"tau", p.tau},
          {"epsilon", p.epsilon},     {"delta", p.delta},     {"functions", p.functions},
          {"coverage", p.coverage},   {"skip", p.skip()}};
}

json write_campaign(std::span<const ProposalSet> proposals, const std::filesystem::path& out_dir) {
  // Render every list first so an unmappable symbol leaves no partial campaign.
  std::vector<std::string> lists;
  lists.reserve(proposals.size());
  for (const auto& p : proposals) lists.push_back(focus_list(p));

  std::filesystem::create_directories(out_dir / "focus");
  json binaries = json::array();
  std::map<std::string, std::string> used;
  for (std::size_t i = 0; i < proposals.size(); ++i) {
    const auto& p = proposals[i];
    std::string stem = file_stem(p.binary_id);
    if (auto it = used.find(stem); it != used.end() && it->second != p.binary_id) {
      stem += "-" + std::to_string(i);
    }
    used.emplace(stem, p.binary_id);
    const std::string rel = "focus/" + stem + ".txt";
    write_atomically(out_dir / rel, lists[i]);
    binaries.push_back({{"binary_id", p.binary_id}, {"focus", rel},
                        {"skip", p.skip()},        {"members", p.members.size()},
                        {"functions", p.functions}, {"coverage", p.coverage}});
  }
  json campaign = {{"binaries", binaries}};
  if (!proposals.empty()) {
    campaign["tau"] = proposals.front().tau;
    campaign["epsilon"] = proposals.front().epsilon;
    campaign["delta"] = proposals.front().delta;
  }
  write_atomically(out_dir / "campaign.json", campaign.dump(2) + "\n");
  return campaign;
}

// ---------------------------------------------------------------------------
// Fuzz outcomes

std::vector<FuzzOutcome> read_fuzz_outcomes(std::istream& in) {
  std::vector<FuzzOutcome> out;
  std::string raw;
  std::size_t lineno = 0;
  while (std::getline(in, raw)) {
    ++lineno;
    if (raw.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const json j = json::parse(raw);
      FuzzOutcome o;
      o.target = j.at("target").get<std::string>();
      const auto arm = j.at("arm").get<std::string>();
      if (arm == "treatment") {
        o.arm = FuzzArm::Treatment;
      } else if (arm == "baseline") {
        o.arm = FuzzArm::Baseline;
      } else {
        throw Error("propose.MalformedRecord", "arm must be treatment or baseline");
      }
      if (auto it = j.find("errors"); it != j.end()) {
        o.errors = it->get<std::map<std::string, std::uint64_t>>();
      }
      o.seconds = j.at("seconds").get<double>();
      if (o.seconds < 0) throw Error("propose.MalformedRecord", "negative seconds");
      if (auto it = j.find("hits_treatment"); it != j.end() && !it->is_null()) {
        o.hits_treatment = it->get<std::uint64_t>();
      }
      if (auto it = j.find("hits_baseline"); it != j.end() && !it->is_null()) {
        o.hits_baseline = it->get<std::uint64_t>();
      }
      out.push_back(std::move(o));
    } catch (const json::exception& e) {
      throw Error("propose.MalformedRecord", "line " + std::to_string(lineno) + ": " + e.what());
    } catch (const Error& e) {
      throw Error(e.code(), "line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

double normalized_hits(std::uint64_t hits_treatment, std::uint64_t hits_baseline) {
  return (static_cast<double>(hits_treatment) + 1.0) / (static_cast<double>(hits_baseline) + 1.0);
}

FuzzSummary analyze_fuzz(std::span<const FuzzOutcome> outcomes) {
  struct Pair {
    const FuzzOutcome* treatment = nullptr;
    const FuzzOutcome* baseline = nullptr;
  };
  std::map<std::string, Pair> pairs;
  for (const auto& o : outcomes) {
    auto& slot = o.arm == FuzzArm::Treatment ? pairs[o.target].treatment : pairs[o.target].baseline;
    if (slot != nullptr) throw Error("propose.UnpairedTarget", o.target + " has a duplicate record");
    slot = &o;
  }
  auto hits = [](const std::string& target, const std::optional<std::uint64_t>& a,
                 const std::optional<std::uint64_t>& b) -> std::uint64_t {
    if (a && b && *a != *b) throw Error("propose.MalformedRecord", target + ": hit counts disagree");
    if (!a && !b) throw Error("propose.MalformedRecord", target + ": missing hit counts");
    return a ? *a : *b;
  };

  FuzzSummary s;
  for (const auto& [target, p] : pairs) {
    if (!p.treatment || !p.baseline) {
      throw Error("propose.UnpairedTarget", target + " lacks a " +
                                                (p.treatment ? "baseline" : "treatment") + " record");
    }
    const auto ht = hits(target, p.treatment->hits_treatment, p.baseline->hits_treatment);
    const auto hb = hits(target, p.treatment->hits_baseline, p.baseline->hits_baseline);
    TargetSummary t{target, normalized_hits(ht, hb), p.treatment->seconds, p.baseline->seconds};
    for (const auto& [kind, n] : p.treatment->errors) {
      s.errors_treatment[kind] += n;
      s.total_errors_treatment += n;
    }
    for (const auto& [kind, n] : p.baseline->errors) {
      s.errors_baseline[kind] += n;
      s.total_errors_baseline += n;
    }
    s.seconds_treatment += t.seconds_treatment;
    s.seconds_baseline += t.seconds_baseline;
    s.normalized_hit_sum += t.normalized_hits;
    s.targets.push_back(std::move(t));
  }
  s.time_saved = s.seconds_baseline > 0 ? 1.0 - s.seconds_treatment / s.seconds_baseline : 0.0;
  return s;
}

json to_json(const FuzzSummary& s) {
  json targets = json::array();
  for (const auto& t : s.targets) {
    targets.push_back({{"target", t.target}, {"normalized_hits", t.normalized_hits},
                       {"seconds_treatment", t.seconds_treatment},
                       {"seconds_baseline", t.seconds_baseline}});
  }
  return {{"errors_treatment", s.errors_treatment},
          {"errors_baseline", s.errors_baseline},
          {"total_errors_treatment", s.total_errors_treatment},
          {"total_errors_baseline", s.total_errors_baseline},
          {"seconds_treatment", s.seconds_treatment},
          {"seconds_baseline", s.seconds_baseline},
          {"time_saved", s.time_saved},
          {"normalized_hit_sum", s.normalized_hit_sum},
          {"targets", targets}};
}

}  // namespace unsafespot
