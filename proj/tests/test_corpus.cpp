#include <doctest.h>

#include <algorithm>
#include <map>
#include <set>
#include <sstream>

#include "fixtures.hpp"
#include "generators.hpp"
#include "oracles.hpp"
#include "unsafespot/corpus.hpp"
#include "unsafespot/error.hpp"
#include "unsafespot/stats.hpp"

using namespace unsafespot;

namespace {

std::string code_of(auto&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  return "";
}

DebugLineMap text_map(const std::string& text) {
  std::istringstream in(text);
  return ingest_debug_lines_text(in);
}

}  // namespace

TEST_CASE("label sets keep safe and unsafe apart") {
  LabelSet s;
  CHECK(s.is_safe());
  CHECK(s.values() == std::vector<int>{0});
  s.add(8);
  CHECK_FALSE(s.is_safe());
  CHECK_FALSE(s.contains(0));
  CHECK(s.values() == std::vector<int>{8});

  const std::vector<int> mixed = {0, 3};
  CHECK(code_of([&] { LabelSet::from_values(mixed); }) == "corpus.InvalidLabels");
  CHECK(code_of([&] { LabelSet::from_values(std::vector<int>{}); }) == "corpus.InvalidLabels");
  CHECK(code_of([&] { s.add(15); }) == "corpus.InvalidLabels");
  CHECK(LabelSet::from_values(std::vector<int>{0}).is_safe());
}

TEST_CASE("function records round-trip through JSON lines") {
  std::vector<FunctionRecord> fs = {fixture::function("a", 0x100, {"push,rbp", "call:b", "call:ext"}),
                                    fixture::function("b", 0x200, {"ret"})};
  fs[0].package = "pkg";
  std::ostringstream out;
  write_functions(out, fs);
  std::istringstream in(out.str());
  CHECK(ingest_disassembly(in) == fs);
}

TEST_CASE("ingestion accepts hex addresses and an absent call target") {
  std::istringstream in(
      R"({"function_id":"f","binary_id":"b","start":"0x10","end":"0x18","instructions":[)"
      R"({"addr":"0x10","mnemonic":"call","operands":["rax"]},{"addr":20,"mnemonic":"ret"}]})");
  const auto fs = ingest_disassembly(in);
  REQUIRE(fs.size() == 1);
  CHECK(fs[0].start == 0x10);
  CHECK_FALSE(fs[0].instructions[0].call_target.has_value());
}

TEST_CASE("ingestion errors") {
  const std::string good =
      R"({"function_id":"f","binary_id":"b","start":0,"end":8,"instructions":[{"addr":0,"mnemonic":"nop"}]})";
  SUBCASE("duplicate function") {
    std::istringstream in(good + "\n" + good + "\n");
    CHECK(code_of([&] { ingest_disassembly(in); }) == "corpus.DuplicateFunction");
  }
  SUBCASE("same id in another binary is fine") {
    std::string other = good;
    other.replace(other.find("\"b\""), 3, "\"c\"");
    std::istringstream in(good + "\n" + other + "\n");
    CHECK(ingest_disassembly(in).size() == 2);
  }
  SUBCASE("call target on a non-call instruction") {
    std::istringstream in(
        R"({"function_id":"f","binary_id":"b","start":0,"end":8,"instructions":[{"addr":0,"mnemonic":"mov","call_target":"g"}]})");
    CHECK(code_of([&] { ingest_disassembly(in); }) == "corpus.MalformedRecord");
  }
  SUBCASE("instruction outside the function") {
    std::istringstream in(
        R"({"function_id":"f","binary_id":"b","start":0,"end":8,"instructions":[{"addr":8,"mnemonic":"nop"}]})");
    CHECK(code_of([&] { ingest_disassembly(in); }) == "corpus.AddressOrderViolation");
  }
  SUBCASE("unsorted instructions") {
    std::istringstream in(
        R"({"function_id":"f","binary_id":"b","start":0,"end":8,"instructions":[{"addr":4,"mnemonic":"nop"},{"addr":0,"mnemonic":"nop"}]})");
    CHECK(code_of([&] { ingest_disassembly(in); }) == "corpus.AddressOrderViolation");
  }
  SUBCASE("bad JSON names the line") {
    std::istringstream in(good + "\n{oops\n");
    try {
      ingest_disassembly(in);
      FAIL("expected an error");
    } catch (const Error& e) {
      CHECK(e.code() == "corpus.MalformedRecord");
      CHECK(std::string(e.what()).find("line 2") != std::string::npos);
    }
  }
}

TEST_CASE("text line maps") {
  const auto map = text_map("# comment\n10 src/a.rs 3\n\n18 src/a.rs 4\n18 src/b.rs 9\n30 src/a.rs 5\n");
  REQUIRE(map.entries.size() == 3);
  CHECK(map.entries[0].end == 0x18);
  CHECK(map.entries[1].file == "src/b.rs");  // same address: last row wins
  CHECK(map.entries[2].end == UINT64_MAX);

  CHECK(map.lookup(0xf) == nullptr);
  CHECK(map.lookup(0x10)->line == 3);
  CHECK(map.lookup(0x17)->line == 3);
  CHECK(map.lookup(0x18)->line == 9);
  CHECK(map.lookup(0x1000)->line == 5);

  CHECK(code_of([] { text_map("20 a.rs 1\n10 a.rs 2\n"); }) == "corpus.NonMonotoneAddresses");
  CHECK(code_of([] { text_map("zz a.rs 1\n"); }) == "corpus.DecodeError");
  CHECK(code_of([] { text_map("10 a.rs 0\n"); }) == "corpus.DecodeError");
}

TEST_CASE("source file matching") {
  CHECK(same_source_file("src/lib.rs", "src/lib.rs"));
  CHECK(same_source_file("/build/x/src/lib.rs", "src/lib.rs"));
  CHECK(same_source_file("lib.rs", "/build/x/src/lib.rs"));
  CHECK_FALSE(same_source_file("/build/x/src/mylib.rs", "lib.rs"));
  CHECK_FALSE(same_source_file("src/lib.rs", "src/main.rs"));
}

TEST_CASE("spans parse and reject bad input") {
  std::istringstream in(R"([{"file":"a.rs","line_start":2,"line_end":4,"kind":8},)"
                        R"({"file":"a.rs","line_start":3,"line_end":3,"kind":"bug"}])");
  const auto spans = read_spans(in);
  REQUIRE(spans.size() == 2);
  CHECK(spans[0].kind == 8);
  CHECK(spans[1].is_bug());
  std::istringstream back(spans_to_json(spans).dump());
  CHECK(read_spans(back) == spans);

  std::istringstream bad_kind(R"([{"file":"a.rs","line_start":2,"line_end":4,"kind":15}])");
  CHECK(code_of([&] { read_spans(bad_kind); }) == "corpus.MalformedSpan");
  std::istringstream bad_range(R"([{"file":"a.rs","line_start":5,"line_end":4,"kind":1}])");
  CHECK(code_of([&] { read_spans(bad_range); }) == "corpus.MalformedSpan");
}

TEST_CASE("projection labels functions from their own instructions") {
  const auto lines = text_map("0 /b/src/lib.rs 1\n4 /b/src/lib.rs 2\n8 /b/src/lib.rs 3\n10 /b/src/lib.rs 7\n");
  const std::vector<FunctionRecord> fs = {fixture::function("a", 0x0, {"nop", "nop", "nop"}),
                                          fixture::function("b", 0x10, {"nop", "call:a"})};
  const std::vector<SourceSpan> spans = {{"src/lib.rs", 2, 2, 8}, {"lib.rs", 2, 3, 6},
                                         {"src/lib.rs", 3, 3, SourceSpan::kBug}};
  const auto p = project_labels(fs, lines, spans);
  CHECK(p.functions[0].labels.values() == std::vector<int>{6, 8});
  CHECK(p.functions[0].bug == std::optional<bool>(true));
  CHECK(p.functions[1].labels.is_safe());  // calling an unsafe function is not unsafe
  CHECK(p.functions[1].bug == std::optional<bool>(false));
  CHECK(p.unmapped_instructions == 0);
  CHECK(p.instructions == 5);
}

TEST_CASE("projection without spans is all safe with unknown bug flags") {
  gen::Rng r(7);
  for (int i = 0; i < 50; ++i) {
    const auto inst = gen::projection_instance(r, false);
    const auto p = project_labels(inst.functions, inst.lines, inst.spans);
    for (const auto& lf : p.functions) {
      CHECK(lf.labels.is_safe());
      CHECK_FALSE(lf.bug.has_value());
    }
  }
}

TEST_CASE("projection counts unmapped instructions") {
  const auto lines = text_map("100 a.rs 1\n");
  const std::vector<FunctionRecord> fs = {fixture::function("a", 0x0, {"nop", "nop"}),
                                          fixture::function("b", 0x100, {"nop"})};
  const auto p = project_labels(fs, lines, {});
  CHECK(p.unmapped_instructions == 2);
  CHECK(p.provenance()["unmapped_instructions"] == 2);
}

TEST_CASE("projection matches the containment oracle on random instances") {
  gen::Rng r(2024);
  for (int i = 0; i < 300; ++i) {
    const auto inst = gen::projection_instance(r);
    const auto p = project_labels(inst.functions, inst.lines, inst.spans);
    std::size_t unmapped = 0;
    for (std::size_t k = 0; k < inst.functions.size(); ++k) {
      const auto expected = oracle::project(inst.functions[k], inst.lines.entries, inst.spans, &unmapped);
      CHECK(p.functions[k] == expected);
    }
    CHECK(p.unmapped_instructions == unmapped);
  }
}

TEST_CASE("projection is idempotent and monotone in spans") {
  gen::Rng r(99);
  for (int i = 0; i < 200; ++i) {
    auto inst = gen::projection_instance(r);
    const auto once = project_labels(inst.functions, inst.lines, inst.spans);
    const auto twice = project_labels(inst.functions, inst.lines, inst.spans);
    CHECK(once.functions == twice.functions);

    inst.spans.push_back({"lib.rs", 1, static_cast<std::uint32_t>(r.between(1, 10)),
                          static_cast<int>(r.between(1, 14))});
    const auto more = project_labels(inst.functions, inst.lines, inst.spans);
    for (std::size_t k = 0; k < once.functions.size(); ++k) {
      for (int j = 1; j <= kNumUnsafeTypes; ++j) {
        if (once.functions[k].labels.contains(j)) CHECK(more.functions[k].labels.contains(j));
      }
      // Exactly one side of the partition holds.
      const auto& u = more.functions[k].labels;
      bool any_type = false;
      for (int j = 1; j <= kNumUnsafeTypes; ++j) any_type = any_type || u.contains(j);
      CHECK(u.contains(0) != any_type);
    }
  }
}

namespace {

std::vector<LabeledFunction> grouped_corpus(const std::vector<std::pair<std::string, int>>& groups) {
  std::vector<LabeledFunction> out;
  int n = 0;
  for (const auto& [name, size] : groups) {
    for (int i = 0; i < size; ++i) {
      auto f = fixture::function("f" + std::to_string(n++), 0, {"nop"});
      f.package = name;
      f.report_id = "r-" + name;
      out.push_back({f, {}, std::nullopt});
    }
  }
  return out;
}

std::map<std::string, int> split_of_groups(const std::array<Corpus, 3>& splits) {
  std::map<std::string, int> out;
  for (int s = 0; s < 3; ++s) {
    for (const auto& lf : splits[s].functions) out[lf.function.package] = s;
  }
  return out;
}

}  // namespace

TEST_CASE("a single group goes entirely to train") {
  const auto fs = grouped_corpus({{"only", 9}});
  const auto splits = split_corpus(fs, GroupingKey::Package, {}, 3);
  CHECK(splits[0].functions.size() == 9);
  CHECK(splits[1].functions.empty());
  CHECK(splits[2].functions.empty());
}

TEST_CASE("splits are deterministic, disjoint and complete") {
  std::vector<std::pair<std::string, int>> groups;
  for (int g = 0; g < 100; ++g) groups.emplace_back("g" + std::to_string(g), 1 + g % 5);
  const auto fs = grouped_corpus(groups);
  const auto a = split_corpus(fs, GroupingKey::Package, {0.5, 0.25, 0.25}, 11);
  const auto b = split_corpus(fs, GroupingKey::Package, {0.5, 0.25, 0.25}, 11);
  for (int s = 0; s < 3; ++s) CHECK(a[s].functions == b[s].functions);

  std::set<std::string> seen_ids;
  std::map<std::string, std::set<int>> where;
  for (int s = 0; s < 3; ++s) {
    for (const auto& lf : a[s].functions) {
      CHECK(seen_ids.insert(lf.function.function_id).second);
      where[lf.function.package].insert(s);
    }
  }
  CHECK(seen_ids.size() == fs.size());
  for (const auto& [g, s] : where) CHECK(s.size() == 1);
  CHECK(a[0].functions.size() > a[1].functions.size());
}

TEST_CASE("split assignment matches a reference shuffle") {
  const std::vector<std::pair<std::string, int>> groups = {{"a", 7}, {"b", 1}, {"c", 3}, {"d", 5}};
  const auto fs = grouped_corpus(groups);
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto order = oracle::shuffled({"a", "b", "c", "d"}, seed);
    std::map<std::string, int> size;
    for (const auto& [g, n] : groups) size[g] = n;
    std::map<std::string, int> expected;
    int before = 0;
    for (const auto& g : order) {
      const double pos = before / 16.0;
      expected[g] = pos < 0.5 ? 0 : pos < 0.75 ? 1 : 2;
      before += size[g];
    }
    CHECK(split_of_groups(split_corpus(fs, GroupingKey::Package, {}, seed)) == expected);
    // report-id grouping induces the same partition on this fixture
    CHECK(split_of_groups(split_corpus(fs, GroupingKey::ReportId, {}, seed)) == expected);
  }
}

TEST_CASE("split errors") {
  CHECK(code_of([] { split_corpus({}, GroupingKey::Package, {}, 0); }) == "corpus.EmptyCorpus");
  auto fs = grouped_corpus({{"a", 2}});
  fs[1].function.package.clear();
  CHECK(code_of([&] { split_corpus(fs, GroupingKey::Package, {}, 0); }) == "corpus.MissingGroupKey");
  CHECK(code_of([&] { split_corpus(fs, GroupingKey::Package, {0.5, 0.5, 0.5}, 0); }) ==
        "corpus.InvalidFractions");
  CHECK(code_of([] { parse_grouping_key("crate"); }) == "corpus.InvalidGroupingKey");
}

TEST_CASE("corpus statistics") {
  Corpus c;
  c.functions = {fixture::labeled(fixture::function("a", 0, {"nop", "nop", "nop", "nop", "call:b"}), {0}),
                 fixture::labeled(fixture::function("b", 0x40, {"nop", "nop", "nop"}), {0}),
                 fixture::labeled(fixture::function("c", 0x80, {"nop"}), {3, 8})};
  const auto s = corpus_stats(c, {});
  CHECK(s.safe == 2);
  CHECK(s.unsafe == 1);
  CHECK(s.per_type[3] == 1);
  CHECK(s.cooccurrence[3][8] == 1);
  CHECK(s.deep_size.total() == 3);
  // a: 5 own instructions + 3 from b -> 8 / 5 = 1.6, bin [1, 2)
  CHECK(s.semantic_size.bins.at(0) == 3);
  CHECK(code_of([] { corpus_stats(Corpus{}, {}); }) == "corpus.EmptyCorpus");
}

TEST_CASE("corpus statistics reproduce the advisory-corpus fractions") {
  CorpusStats s;
  s.functions = 447645;
  s.safe = 428157;
  s.unsafe = 19488;
  s.bug = 240;
  CHECK(s.safe_fraction() * 100 == doctest::Approx(95.65).epsilon(0.0005));
  CHECK(s.unsafe_fraction() * 100 == doctest::Approx(4.35).epsilon(0.005));
  CHECK(s.bug_fraction() * 100 == doctest::Approx(0.05).epsilon(0.1));
}

TEST_CASE("statistics conserve mass on random corpora") {
  gen::Rng r(5);
  for (int t = 0; t < 50; ++t) {
    Corpus c;
    const auto n = r.between(1, 30);
    for (std::uint64_t i = 0; i < n; ++i) {
      LabeledFunction lf{fixture::function("f" + std::to_string(i), i * 64, {"nop", "nop"}), {}, std::nullopt};
      for (int j = 1; j <= kNumUnsafeTypes; ++j) {
        if (r.coin(0.1)) lf.labels.add(j);
      }
      if (r.coin()) lf.bug = r.coin();
      c.functions.push_back(lf);
    }
    const auto s = corpus_stats(c, {});
    CHECK(s.safe + s.unsafe == n);
    CHECK(s.deep_size.total() == n);
    CHECK(s.semantic_size.total() == n);
    for (int j = 0; j < kNumLabels; ++j) CHECK(s.per_type[j] == s.cooccurrence[j][j]);
    CHECK(s.per_type[0] == s.safe);
  }
}
