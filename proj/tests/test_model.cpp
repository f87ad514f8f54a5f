#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <sstream>

#include "fixtures.hpp"
#include "generators.hpp"
#include "unsafespot/error.hpp"
#include "unsafespot/model.hpp"
#include "unsafespot/synth.hpp"

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

Corpus synthetic_corpus(std::uint64_t seed, std::size_t binaries = 6) {
  SynthConfig config;
  config.binaries = binaries;
  config.functions_per_binary = 30;
  config.seed = seed;
  const auto s = make_synthetic(config);
  Corpus c;
  c.functions = project_labels(s.functions, s.lines, s.spans).functions;
  return c;
}

Corpus small_corpus() {
  Corpus c;
  c.functions = {fixture::labeled(fixture::function("a", 0x00, {"mov,rax,qword ptr [rdi]", "ret"}), {8}),
                 fixture::labeled(fixture::function("b", 0x40, {"add,rax,rbx", "ret"}), {0}),
                 fixture::labeled(fixture::function("c", 0x80, {"call:a", "ret"}), {0}),
                 fixture::labeled(fixture::function("d", 0xc0, {"call:ext"}), {2, 8})};
  return c;
}

}  // namespace

TEST_CASE("feature vectors use log1p counts with pooled unknowns") {
  SparseCounts c;
  c.counts = {{0, 1}, {2, 3}};
  c.oov = 4;
  const auto x = feature_vector(c, 5);
  REQUIRE(x.entries.size() == 3);
  CHECK(x.entries[0].second == doctest::Approx(std::log(2.0)));
  CHECK(x.entries[1].second == doctest::Approx(std::log(4.0)));
  CHECK(x.entries[2].first == 5);
  CHECK(x.entries[2].second == doctest::Approx(std::log(5.0)));
}

TEST_CASE("class balance weights positives by the negative ratio") {
  std::vector<Example> ex(4);
  ex[0].y[0] = 1;
  ex[1].y[0] = 1;
  ex[2].y[0] = 1;
  ex[3].y[3] = 1;
  const auto w = class_weights(ex, true);
  CHECK(w[0] == doctest::Approx(1.0 / 3.0));
  CHECK(w[3] == doctest::Approx(3.0));
  CHECK(w[5] == 1.0);  // no positives: unweighted
  CHECK(class_weights(ex, false)[3] == 1.0);
}

TEST_CASE("an untrained head scores every label at one half") {
  TrainHyper h;
  h.epochs = 0;
  const auto c = small_corpus();
  const auto m = train_reference(c, {}, h);
  const FunctionIndex index(std::span<const LabeledFunction>(c.functions));
  for (const auto& s : score_all(m, c.functions, index)) {
    for (double v : s) CHECK(v == 0.5);
  }
}

TEST_CASE("analytic gradient matches central differences") {
  gen::Rng r(77);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t dim = r.between(1, 6);
    LinearHead head(dim);
    for (double& w : head.weights()) w = r.uniform() * 4 - 2;
    for (double& b : head.biases()) b = r.uniform() * 2 - 1;
    std::vector<Example> ex(r.between(1, 3));
    for (auto& e : ex) {
      for (std::size_t k = 0; k < dim; ++k) {
        if (r.coin(0.6)) e.x.entries.emplace_back(static_cast<std::uint32_t>(k), r.uniform() * 3);
      }
      for (int j = 0; j < kNumLabels; ++j) e.y[j] = r.coin(0.3);
    }
    ClassWeights cw;
    for (double& w : cw) w = 0.5 + r.uniform() * 3;
    const double l2 = r.uniform() * 0.1;

    const auto grad = bce_gradient(head, ex, cw, l2);
    auto check = [&](double& param, double analytic) {
      const double h = 1e-5;
      const double saved = param;
      param = saved + h;
      const double up = bce_objective(head, ex, cw, l2);
      param = saved - h;
      const double down = bce_objective(head, ex, cw, l2);
      param = saved;
      const double numeric = (up - down) / (2 * h);
      const double scale = std::max({std::abs(analytic), std::abs(numeric), 1e-3});
      CHECK(std::abs(analytic - numeric) / scale <= 1e-5);
    };
    const int j = static_cast<int>(r.below(kNumLabels));
    const std::size_t k = r.below(dim);
    check(head.weight(j, k), grad.weight(j, k));
    check(head.bias(j), grad.bias(j));
  }
}

TEST_CASE("full-batch training loss does not increase") {
  const auto c = synthetic_corpus(3);
  TrainHyper h;
  h.batch_size = 0;
  h.epochs = 40;
  std::vector<double> trace;
  train_reference(c, {}, h, &trace);
  REQUIRE(trace.size() == 41);
  for (std::size_t i = 1; i < trace.size(); ++i) {
    CAPTURE(i);
    CHECK(trace[i] <= trace[i - 1] + 1e-9);
  }
}

TEST_CASE("a separable marker corpus is ranked perfectly") {
  const auto c = synthetic_corpus(5);
  const auto m = train_reference(c, {}, {});
  const FunctionIndex index(std::span<const LabeledFunction>(c.functions));
  const auto scores = score_all(m, c.functions, index);
  double min_unsafe = 1.0, max_safe = 0.0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const double u = unsafeness(scores[i]);
    if (c.functions[i].labels.is_safe()) {
      max_safe = std::max(max_safe, u);
    } else {
      min_unsafe = std::min(min_unsafe, u);
    }
  }
  CHECK(min_unsafe > max_safe);
}

TEST_CASE("training is deterministic for a seed") {
  const auto c = synthetic_corpus(8);
  TrainHyper h;
  h.epochs = 5;
  h.batch_size = 7;
  const auto a = model_to_json(train_reference(c, {}, h)).dump();
  const auto b = model_to_json(train_reference(c, {}, h)).dump();
  CHECK(a == b);
  h.seed = 1;
  CHECK(model_to_json(train_reference(c, {}, h)).dump() != a);
}

TEST_CASE("training and scoring errors") {
  Corpus only_safe;
  only_safe.functions = {fixture::labeled(fixture::function("a", 0, {"nop"}), {0})};
  CHECK(code_of([&] { train_reference(only_safe, {}, {}); }) == "model.DegenerateCorpus");
  CHECK(code_of([&] { train_reference(Corpus{}, {}, {}); }) == "model.DegenerateCorpus");

  const auto oracle = make_baseline(ModelKind::Oracle, {});
  CHECK(code_of([&] { fine_tune(oracle, small_corpus(), {}); }) == "model.WrongKind");
  CHECK(code_of([&] { make_baseline(ModelKind::ReferenceLinear, {}); }) == "model.WrongKind");

  const std::vector<FunctionRecord> bare = {fixture::function("a", 0, {"nop"})};
  const FunctionIndex index(bare);
  CHECK(code_of([&] { score(oracle, bare[0], index); }) == "model.MissingLabels");
  CHECK(code_of([&] { score_all(oracle, std::span<const FunctionRecord>(bare), index); }) ==
        "model.MissingLabels");
  CHECK(code_of([] { parse_model_kind("transformer"); }) == "model.UnknownKind");

  TrainHyper wild;
  wild.lr = 1e308;
  wild.l2 = 0;
  wild.class_balance = false;
  try {
    train_reference(small_corpus(), {}, wild);
    FAIL("expected divergence");
  } catch (const Error& e) {
    CHECK(e.code() == "model.NonFiniteLoss");
    CHECK(e.kind() == ErrorKind::Runtime);
  }
}

TEST_CASE("baselines") {
  const auto c = small_corpus();
  const FunctionIndex index(std::span<const LabeledFunction>(c.functions));

  SUBCASE("random is seeded and hashes the function id") {
    const auto r0 = make_baseline(ModelKind::Random, {}, 0);
    const auto r1 = make_baseline(ModelKind::Random, {}, 1);
    const auto s0 = score_all(r0, c.functions, index);
    CHECK(s0 == score_all(r0, c.functions, index));
    CHECK(s0 != score_all(r1, c.functions, index));
    for (const auto& s : s0) {
      for (double v : s) CHECK((v >= 0.0 && v < 1.0));
    }
  }
  SUBCASE("external-call flags functions whose expansion reaches external code") {
    Corpus e;
    e.functions = {fixture::labeled(fixture::function("a", 0x00, {"call:ext"}), {0}),
                   fixture::labeled(fixture::function("b", 0x40, {"call:a"}), {0}),
                   fixture::labeled(fixture::function("c", 0x80, {"nop"}), {0})};
    const FunctionIndex ei(std::span<const LabeledFunction>(e.functions));
    const auto m = make_baseline(ModelKind::ExternalCall, {});
    const auto s = score_all(m, e.functions, ei);
    CHECK(unsafeness(s[0]) == 1.0);
    CHECK(unsafeness(s[1]) == 1.0);
    CHECK(unsafeness(s[2]) == 0.0);
  }
  SUBCASE("oracle reproduces the labels") {
    const auto m = make_baseline(ModelKind::Oracle, {});
    const auto s = score_all(m, c.functions, index);
    for (std::size_t i = 0; i < s.size(); ++i) {
      for (int j = 0; j < kNumLabels; ++j) CHECK(s[i][j] == (c.functions[i].labels.contains(j) ? 1.0 : 0.0));
    }
  }
}

TEST_CASE("parallel and serial scoring agree") {
  const auto c = synthetic_corpus(12);
  const auto m = train_reference(c, {}, {});
  const FunctionIndex index(std::span<const LabeledFunction>(c.functions));
  CHECK(score_all(m, c.functions, index) == serial::score_all(m, c.functions, index));
}

TEST_CASE("model files round-trip and reject damage") {
  const auto c = synthetic_corpus(4, 3);
  TrainHyper h;
  h.epochs = 3;
  const auto m = fine_tune(train_reference(c, {2, 512}, h), c, h);
  std::stringstream buf;
  save_model(m, buf);
  const std::string text = buf.str();
  const auto back = load_model(buf);
  CHECK(back.head == m.head);
  CHECK(back.vocabulary.tokens() == m.vocabulary.tokens());
  CHECK(back.history == m.history);
  CHECK(back.features == m.features);
  CHECK(back.history.size() == 2);

  std::istringstream truncated(text.substr(0, text.size() / 2));
  CHECK(code_of([&] { load_model(truncated); }) == "model.CorruptFile");

  auto j = json::parse(text);
  j["version"] = kModelFormatVersion + 1;
  CHECK(code_of([&] { model_from_json(j); }) == "model.VersionMismatch");

  j = json::parse(text);
  j["vocabulary"].push_back("zzz");
  CHECK(code_of([&] { model_from_json(j); }) == "model.CorruptFile");

  const auto baseline = make_baseline(ModelKind::Random, {}, 9);
  const auto rb = model_from_json(model_to_json(baseline));
  CHECK(rb.kind == ModelKind::Random);
  CHECK(rb.seed == 9);
}
