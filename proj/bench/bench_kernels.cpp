// Serial reference kernels against their OpenMP counterparts on a synthetic
// corpus. Arg(0) is the serial path; Arg(n > 0) runs the parallel kernel with
// n worker threads.

#include <benchmark/benchmark.h>

#include "unsafespot/calibrate.hpp"
#include "unsafespot/corpus.hpp"
#include "unsafespot/features.hpp"
#include "unsafespot/model.hpp"
#include "unsafespot/parallel.hpp"
#include "unsafespot/synth.hpp"

using namespace unsafespot;

namespace {

struct Fixture {
  SynthCorpus raw;
  Corpus corpus;
  ScoreModel model;

  Fixture() {
    SynthConfig config;
    config.binaries = 100;
    config.functions_per_binary = 100;
    config.max_instructions = 64;
    config.internal_call_rate = 0.6;
    config.seed = 1;
    raw = make_synthetic(config);
    corpus.functions = project_labels(raw.functions, raw.lines, raw.spans).functions;
    TrainHyper h;
    h.epochs = 2;
    model = train_reference(corpus, {}, h);
  }
};

const Fixture& fixture() {
  static const Fixture f;
  return f;
}

void set_threads(const benchmark::State& state) { parallel::set_jobs(static_cast<int>(state.range(0))); }

void BM_ProjectLabels(benchmark::State& state) {
  const auto& f = fixture();
  set_threads(state);
  for (auto _ : state) {
    auto p = state.range(0) == 0 ? serial::project_labels(f.raw.functions, f.raw.lines, f.raw.spans)
                                 : project_labels(f.raw.functions, f.raw.lines, f.raw.spans);
    benchmark::DoNotOptimize(p);
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(f.raw.functions.size()));
}

void BM_DeepSizes(benchmark::State& state) {
  const auto& f = fixture();
  set_threads(state);
  const std::span<const LabeledFunction> functions(f.corpus.functions);
  const FunctionIndex index(functions);
  const auto refs = function_refs(functions);
  const FeatureConfig config{3, 4096};
  for (auto _ : state) {
    auto s = state.range(0) == 0 ? serial::deep_sizes(refs, index, config) : deep_sizes(refs, index, config);
    benchmark::DoNotOptimize(s);
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(refs.size()));
}

void BM_ScoreAll(benchmark::State& state) {
  const auto& f = fixture();
  set_threads(state);
  const std::span<const LabeledFunction> functions(f.corpus.functions);
  const FunctionIndex index(functions);
  for (auto _ : state) {
    auto s = state.range(0) == 0 ? serial::score_all(f.model, functions, index)
                                 : score_all(f.model, functions, index);
    benchmark::DoNotOptimize(s);
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(functions.size()));
}

void BM_VerifyGuarantee(benchmark::State& state) {
  set_threads(state);
  for (auto _ : state) {
    auto g = state.range(0) == 0 ? serial::verify_guarantee(ScoreLaw{}, 100, 0.1, 1e-3, 2000, 0)
                                 : verify_guarantee(ScoreLaw{}, 100, 0.1, 1e-3, 2000, 0);
    benchmark::DoNotOptimize(g);
  }
  state.SetItemsProcessed(state.iterations() * 2000);
}

void thread_args(benchmark::internal::Benchmark* b) {
  b->Arg(0);
  for (int n = 1; n <= parallel::max_jobs(); n *= 2) b->Arg(n);
  b->Unit(benchmark::kMillisecond)->UseRealTime();
}

}  // namespace

BENCHMARK(BM_ProjectLabels)->Apply(thread_args);
BENCHMARK(BM_DeepSizes)->Apply(thread_args);
BENCHMARK(BM_ScoreAll)->Apply(thread_args);
BENCHMARK(BM_VerifyGuarantee)->Apply(thread_args);

BENCHMARK_MAIN();
