#include <doctest.h>

#include <cstdio>

#include "fixtures.hpp"
#include "generators.hpp"
#include "unsafespot/error.hpp"
#include "unsafespot/features.hpp"

using namespace unsafespot;
using fixture::function;

namespace {

TokenSequence tokens_of(const std::vector<FunctionRecord>& fs, std::size_t which, FeatureConfig config = {}) {
  const FunctionIndex index(fs);
  return tokenize(fs[which], index, config);
}

}  // namespace

TEST_CASE("instructions render as comma-joined tokens") {
  const auto f = function("f", 0, {"mov,rax,qword ptr [rdi]", "call:ext", "ret"});
  CHECK(render_instruction(f.instructions[0]) == "mov,rax,qword ptr [rdi]");
  CHECK(render_instruction(f.instructions[1]) == "call,externalcall");
  CHECK(render_instruction(f.instructions[2]) == "ret");
}

TEST_CASE("internal callees are inlined with one prefix per level") {
  const std::vector<FunctionRecord> fs = {function("f", 0x00, {"push,rbp", "call:g", "ret"}),
                                          function("g", 0x40, {"xor,eax,eax", "call:h"}),
                                          function("h", 0x80, {"nop"})};
  const auto t = tokens_of(fs, 0);
  const std::vector<std::string> expected = {"push,rbp",
                                             "call",
                                             "|<C>|xor,eax,eax",
                                             "|<C>|call",
                                             "|<C>||<C>|nop",
                                             "ret"};
  CHECK(t.tokens == expected);
  CHECK_FALSE(t.truncated);
  CHECK_FALSE(t.depth_max_reached);
}

TEST_CASE("expansion stops at the depth limit and flags it") {
  const std::vector<FunctionRecord> fs = {function("f", 0x00, {"call:g"}),
                                          function("g", 0x40, {"call:h"}),
                                          function("h", 0x80, {"nop"})};
  const auto t = tokens_of(fs, 0, {1, 4096});
  CHECK(t.tokens == std::vector<std::string>{"call", "|<C>|call"});
  CHECK(t.depth_max_reached);

  const auto none = tokens_of(fs, 0, {0, 4096});
  CHECK(none.tokens == std::vector<std::string>{"call"});
  CHECK(none.depth_max_reached);
}

TEST_CASE("cycles are broken on the expansion path") {
  const std::vector<FunctionRecord> fs = {function("f", 0x00, {"nop", "call:g"}),
                                          function("g", 0x40, {"call:f", "call:g", "ret"})};
  const auto t = tokens_of(fs, 0, {8, 4096});
  CHECK(t.tokens == std::vector<std::string>{"nop", "call", "|<C>|call", "|<C>|call", "|<C>|ret"});
  CHECK_FALSE(t.depth_max_reached);
}

TEST_CASE("unresolved and foreign-binary callees are left as call tokens") {
  const std::vector<FunctionRecord> fs = {function("f", 0x00, {"call:g", "call:missing"}, "A"),
                                          function("g", 0x40, {"nop"}, "B")};
  CHECK(tokens_of(fs, 0).tokens == std::vector<std::string>{"call", "call"});
}

TEST_CASE("token budget truncates") {
  const std::vector<FunctionRecord> fs = {function("f", 0x00, {"nop", "call:g", "ret"}),
                                          function("g", 0x40, {"a", "b", "c"})};
  const auto t = tokens_of(fs, 0, {2, 4});
  CHECK(t.tokens.size() == 4);
  CHECK(t.truncated);
  CHECK_FALSE(tokens_of(fs, 0, {2, 6}).truncated);
}

TEST_CASE("deep and semantic size") {
  const std::vector<FunctionRecord> fs = {function("f", 0x00, {"a", "b", "c", "d", "call:g"}),
                                          function("g", 0x40, {"x", "y", "z"}),
                                          function("empty", 0x80, {})};
  const FunctionIndex index(fs);
  const auto s = deep_size(fs[0], index, {});
  CHECK(s.shallow == 5);
  CHECK(s.deep == 8);
  CHECK(s.semantic() == doctest::Approx(1.6));
  CHECK(deep_size(fs[2], index, {}).semantic() == 1.0);
}

TEST_CASE("deep size equals the untruncated token count on random call graphs") {
  gen::Rng r(31);
  for (int t = 0; t < 200; ++t) {
    const auto n = r.between(1, 8);
    std::vector<FunctionRecord> fs;
    for (std::uint64_t i = 0; i < n; ++i) {
      FunctionRecord f;
      f.function_id = "f" + std::to_string(i);
      f.binary_id = "b";
      const auto len = r.between(0, 5);
      for (std::uint64_t k = 0; k < len; ++k) {
        Instruction insn{0x100 * i + k, "nop", {}, std::nullopt};
        if (r.coin(0.4)) {
          insn.mnemonic = "call";
          insn.call_target = CallTarget{false, "f" + std::to_string(r.below(n))};
        }
        f.instructions.push_back(insn);
      }
      fs.push_back(f);
    }
    const FunctionIndex index(fs);
    const FeatureConfig config{r.between(0, 3), 1u << 20};
    for (const auto& f : fs) {
      CHECK(deep_size(f, index, config).deep == tokenize(f, index, config).tokens.size());
    }
    const auto refs = function_refs(std::span<const FunctionRecord>(fs));
    CHECK(deep_sizes(refs, index, config) == serial::deep_sizes(refs, index, config));
  }
}

TEST_CASE("vocabulary ordering, lookup and hash") {
  const std::vector<TokenSequence> seqs = {{{"mov,rax,rbx", "ret", "call,externalcall"}},
                                           {{"ret", "nop"}}};
  const auto v = Vocabulary::build(seqs);
  CHECK(v.tokens() == std::vector<std::string>{"call,externalcall", "mov,rax,rbx", "nop", "ret"});
  CHECK(v.find("nop") == 2);
  CHECK(v.find("push,rbp") == -1);

  // FNV-1a 64 over "vocab" followed by every token and a newline.
  std::string stream = "vocab";
  for (const auto& t : v.tokens()) stream += t + "\n";
  std::uint64_t h = 14695981039346656037ull;
  for (unsigned char c : stream) {
    h ^= c;
    h *= 1099511628211ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  CHECK(v.hash() == buf);
  CHECK(Vocabulary({"b", "a"}).hash() == Vocabulary({"a", "b", "a"}).hash());
  CHECK(Vocabulary({"a"}).hash() != Vocabulary({"a", "b"}).hash());
}

TEST_CASE("vocabulary JSON round trip") {
  const Vocabulary v({"c", "a", "b"});
  CHECK(Vocabulary::from_json(v.to_json()).tokens() == v.tokens());
  CHECK(Vocabulary::from_json(json::array({"a", "b", "c"})).hash() == v.hash());
  CHECK_THROWS_AS(Vocabulary::from_json(json{{"a", 0}, {"b", 2}}), Error);
  CHECK_THROWS_AS(Vocabulary::from_json(json{{"b", 0}, {"a", 1}}), Error);
}

TEST_CASE("vectorize counts tokens and pools unknowns") {
  const Vocabulary v({"a", "b"});
  const TokenSequence t{{"b", "x", "a", "b", "y"}};
  const auto c = vectorize(t, v);
  CHECK(c.counts == std::vector<std::pair<std::uint32_t, std::uint32_t>>{{0, 1}, {1, 2}});
  CHECK(c.oov == 2);

  const auto row = feature_row(function("f", 0, {"a"}), c, {1, 1});
  CHECK(row["counts"]["1"] == 2);
  CHECK(row["oov"] == 2);
}

TEST_CASE("feature config JSON") {
  const FeatureConfig c{3, 128};
  CHECK(feature_config_from_json(to_json(c)) == c);
}
