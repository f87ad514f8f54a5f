#include "unsafespot/synth.hpp"

#include <array>
#include <cstdio>
#include <random>

#include "unsafespot/error.hpp"
#include "unsafespot/random.hpp"

namespace unsafespot {

namespace {

constexpr std::uint64_t kInsnBytes = 4;
constexpr std::uint64_t kBinaryStride = 1ull << 32;

constexpr std::array<std::string_view, 8> kMnemonics = {"mov", "add", "sub", "cmp",
                                                       "lea", "test", "and", "shl"};
constexpr std::array<std::string_view, 8> kRegisters = {"rax", "rbx", "rcx", "rdx",
                                                       "rsi", "rdi", "r8", "r9"};

class Draw {
public:
  explicit Draw(std::uint64_t seed) : rng_(seed) {}
  bool chance(double p) { return unit_interval(rng_()) < p; }
  std::size_t below(std::size_t n) { return static_cast<std::size_t>(rng_() % n); }

private:
  std::mt19937_64 rng_;
};

Instruction parse_rendered(std::string_view rendered) {
  Instruction insn;
  std::size_t pos = 0;
  bool first = true;
  while (pos <= rendered.size()) {
    auto comma = rendered.find(',', pos);
    if (comma == std::string_view::npos) comma = rendered.size();
    std::string part(rendered.substr(pos, comma - pos));
    if (first) {
      insn.mnemonic = std::move(part);
      first = false;
    } else {
      insn.operands.push_back(std::move(part));
    }
    pos = comma + 1;
  }
  return insn;
}

Instruction filler(Draw& d) {
  Instruction insn;
  insn.mnemonic = std::string(kMnemonics[d.below(kMnemonics.size())]);
  insn.operands = {std::string(kRegisters[d.below(kRegisters.size())]),
                   std::string(kRegisters[d.below(kRegisters.size())])};
  return insn;
}

std::string numbered(const char* prefix, std::size_t n) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%s%03zu", prefix, n);
  return buf;
}

void check(const SynthConfig& c) {
  auto rate = [](double p) { return p >= 0.0 && p <= 1.0; };
  if (c.binaries == 0 || c.functions_per_binary == 0) {
    throw Error("synth.DomainError", "need at least one binary and one function");
  }
  if (c.min_instructions == 0 || c.min_instructions > c.max_instructions) {
    throw Error("synth.DomainError", "need 1 <= min_instructions <= max_instructions");
  }
  if (!rate(c.unsafe_rate) || !rate(c.bug_rate) || !rate(c.marker_rate) ||
      !rate(c.safe_marker_rate) || !rate(c.decoy_rate) || !rate(c.internal_call_rate) ||
      !rate(c.external_call_rate)) {
    throw Error("synth.DomainError", "rates must lie in [0, 1]");
  }
  if (c.marker.empty()) throw Error("synth.DomainError", "marker must be non-empty");
}

}  // namespace

SynthCorpus make_synthetic(const SynthConfig& config) {
  check(config);
  Draw d(config.seed);
  const Instruction marker = parse_rendered(config.marker);
  const Instruction decoy = parse_rendered(config.decoy);
  SynthCorpus out;

  for (std::size_t b = 0; b < config.binaries; ++b) {
    const std::string binary_id = numbered("bin", b);
    const std::string package = numbered(config.package_prefix.c_str(), b);
    const std::string file = "src/" + binary_id + ".rs";
    std::uint64_t address = (b + 1) * kBinaryStride;
    std::uint32_t line = 1;

    for (std::size_t i = 0; i < config.functions_per_binary; ++i) {
      FunctionRecord f;
      f.binary_id = binary_id;
      f.function_id = binary_id + "::" + numbered("f", i);
      f.package = package;
      f.start = address;

      const bool unsafe = d.chance(config.unsafe_rate);
      const bool bug = unsafe && d.chance(config.bug_rate);
      const int type = 1 + static_cast<int>(d.below(kNumUnsafeTypes));
      const bool has_marker = d.chance(unsafe ? config.marker_rate : config.safe_marker_rate);
      const bool has_decoy = !unsafe && d.chance(config.decoy_rate);

      const std::size_t span = config.max_instructions - config.min_instructions + 1;
      const std::size_t n = config.min_instructions + d.below(span);
      std::vector<Instruction> body;
      for (std::size_t k = 0; k < n; ++k) body.push_back(filler(d));
      std::size_t marker_at = d.below(n);
      if (has_marker) body[marker_at] = marker;
      if (has_decoy) body[d.below(n)] = decoy;
      if (config.functions_per_binary > 1 && d.chance(config.internal_call_rate)) {
        std::size_t callee = d.below(config.functions_per_binary - 1);
        if (callee >= i) ++callee;
        Instruction call{0, "call", {}, CallTarget{false, binary_id + "::" + numbered("f", callee)}};
        f.callees.push_back(call.call_target->function_id);
        body.insert(body.begin() + static_cast<std::ptrdiff_t>(d.below(body.size() + 1)), call);
      }
      if (d.chance(config.external_call_rate)) {
        Instruction call{0, "call", {}, CallTarget{true, ""}};
        body.insert(body.begin() + static_cast<std::ptrdiff_t>(d.below(body.size() + 1)), call);
      }
      if (has_marker) {
        for (std::size_t k = 0; k < body.size(); ++k) {
          if (body[k] == marker) {
            marker_at = k;
            break;
          }
        }
      }

      const std::uint32_t first_line = line;
      for (auto& insn : body) {
        insn.address = address;
        out.lines.entries.push_back({address, file, line, address + kInsnBytes});
        address += kInsnBytes;
        ++line;
      }
      f.end = address;
      f.instructions = std::move(body);

      if (unsafe) {
        const std::uint32_t at = first_line + static_cast<std::uint32_t>(marker_at);
        out.spans.push_back({file, at, at, type});
        if (bug) out.spans.push_back({file, at, at, SourceSpan::kBug});
      }
      out.functions.push_back(std::move(f));
      address += 4 * kInsnBytes;  // padding between functions stays unmapped
    }
  }
  return out;
}

}  // namespace unsafespot
