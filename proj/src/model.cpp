#include "unsafespot/model.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <numeric>
#include <ostream>
#include <random>

#include "unsafespot/error.hpp"
#include "unsafespot/random.hpp"

namespace unsafespot {

std::string_view model_kind_name(ModelKind kind) {
  switch (kind) {
    case ModelKind::ReferenceLinear: return "reference-linear";
    case ModelKind::Random: return "random";
    case ModelKind::ExternalCall: return "external-call";
    case ModelKind::Oracle: return "oracle";
  }
  return "reference-linear";
}

ModelKind parse_model_kind(std::string_view name) {
  for (ModelKind k : {ModelKind::ReferenceLinear, ModelKind::Random, ModelKind::ExternalCall,
                      ModelKind::Oracle}) {
    if (model_kind_name(k) == name) return k;
  }
  throw Error("model.UnknownKind", std::string(name));
}

json to_json(const TrainHyper& h) {
  return {{"epochs", h.epochs}, {"lr", h.lr},
          {"l2", h.l2},         {"seed", h.seed},
          {"class_balance", h.class_balance}, {"batch_size", h.batch_size}};
}

TrainHyper train_hyper_from_json(const json& j) {
  TrainHyper h;
  h.epochs = j.at("epochs").get<std::size_t>();
  h.lr = j.at("lr").get<double>();
  h.l2 = j.at("l2").get<double>();
  h.seed = j.at("seed").get<std::uint64_t>();
  h.class_balance = j.at("class_balance").get<bool>();
  h.batch_size = j.at("batch_size").get<std::size_t>();
  return h;
}

// ---------------------------------------------------------------------------
// Features and the linear head

FeatureVector feature_vector(const SparseCounts& counts, std::size_t vocabulary_size) {
  FeatureVector x;
  x.entries.reserve(counts.counts.size() + 1);
  for (const auto& [idx, n] : counts.counts) x.entries.emplace_back(idx, std::log1p(double(n)));
  if (counts.oov > 0) {
    x.entries.emplace_back(static_cast<std::uint32_t>(vocabulary_size),
                           std::log1p(double(counts.oov)));
  }
  return x;
}

Example make_example(FeatureVector x, const LabelSet& labels) {
  Example e{std::move(x), {}};
  for (int j = 0; j < kNumLabels; ++j) e.y[j] = labels.contains(j) ? 1 : 0;
  return e;
}

ClassWeights class_weights(std::span<const Example> examples, bool balance) {
  ClassWeights w;
  w.fill(1.0);
  if (!balance) return w;
  for (int j = 0; j < kNumLabels; ++j) {
    std::size_t pos = 0;
    for (const auto& e : examples) pos += e.y[j];
    const std::size_t neg = examples.size() - pos;
    if (pos > 0 && neg > 0) w[j] = static_cast<double>(neg) / static_cast<double>(pos);
  }
  return w;
}

LinearHead::LinearHead(std::size_t dim) : dim_(dim), weights_(kNumLabels * dim, 0.0) {}

double LinearHead::logit(int label, const FeatureVector& x) const {
  double z = bias_[label];
  const double* row = weights_.data() + label * dim_;
  for (const auto& [idx, v] : x.entries) {
    if (idx < dim_) z += row[idx] * v;
  }
  return z;
}

namespace {

double sigmoid(double z) {
  if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

// log(1 + e^t)
double softplus(double t) { return t > 0 ? t + std::log1p(std::exp(-t)) : std::log1p(std::exp(t)); }

// d loss / d z for one (example, label) pair.
double logit_gradient(double z, std::uint8_t y, double positive_weight) {
  const double p = sigmoid(z);
  return y ? positive_weight * (p - 1.0) : p;
}

}  // namespace

Scores LinearHead::predict(const FeatureVector& x) const {
  Scores s{};
  for (int j = 0; j < kNumLabels; ++j) s[j] = sigmoid(logit(j, x));
  return s;
}

double bce_objective(const LinearHead& head, std::span<const Example> examples,
                     const ClassWeights& weights, double l2) {
  double total = 0.0;
  for (const auto& e : examples) {
    for (int j = 0; j < kNumLabels; ++j) {
      const double z = head.logit(j, e.x);
      total += e.y[j] ? weights[j] * softplus(-z) : softplus(z);
    }
  }
  double penalty = 0.0;
  for (double w : head.weights()) penalty += w * w;
  const double n = examples.empty() ? 1.0 : static_cast<double>(examples.size());
  return total / n + 0.5 * l2 * penalty;
}

LinearHead bce_gradient(const LinearHead& head, std::span<const Example> examples,
                        const ClassWeights& weights, double l2) {
  LinearHead grad(head.dim());
  const double n = examples.empty() ? 1.0 : static_cast<double>(examples.size());
  for (const auto& e : examples) {
    for (int j = 0; j < kNumLabels; ++j) {
      const double g = logit_gradient(head.logit(j, e.x), e.y[j], weights[j]) / n;
      grad.bias(j) += g;
      for (const auto& [idx, v] : e.x.entries) {
        if (idx < head.dim()) grad.weight(j, idx) += g * v;
      }
    }
  }
  auto gw = grad.weights();
  auto hw = head.weights();
  for (std::size_t i = 0; i < gw.size(); ++i) gw[i] += l2 * hw[i];
  return grad;
}

// ---------------------------------------------------------------------------
// Training

namespace {

std::vector<Example> build_examples(const Corpus& corpus, const ScoreModel& model) {
  const FunctionIndex index(std::span<const LabeledFunction>(corpus.functions));
  std::vector<Example> examples(corpus.functions.size());
  const auto n = static_cast<std::int64_t>(examples.size());
  const std::size_t vocab = model.vocabulary.size();
#pragma omp parallel for schedule(dynamic, 32)
  for (std::int64_t i = 0; i < n; ++i) {
    const auto& lf = corpus.functions[i];
    const auto tokens = tokenize(lf.function, index, model.features);
    examples[i] = make_example(feature_vector(vectorize(tokens, model.vocabulary), vocab), lf.labels);
  }
  return examples;
}

void require_both_classes(const Corpus& corpus) {
  if (corpus.functions.empty()) throw Error("model.DegenerateCorpus", "training corpus is empty");
  const bool any_safe = std::any_of(corpus.functions.begin(), corpus.functions.end(),
                                    [](const LabeledFunction& f) { return f.labels.is_safe(); });
  const bool any_unsafe = std::any_of(corpus.functions.begin(), corpus.functions.end(),
                                      [](const LabeledFunction& f) { return !f.labels.is_safe(); });
  if (!any_safe || !any_unsafe) {
    throw Error("model.DegenerateCorpus", "training needs at least one safe and one unsafe function");
  }
}

double run_sgd(LinearHead& head, std::span<const Example> examples, const TrainHyper& hyper,
               std::vector<double>* loss_trace) {
  const ClassWeights weights = class_weights(examples, hyper.class_balance);
  auto check = [](double loss) {
    if (!std::isfinite(loss)) {
      throw Error("model.NonFiniteLoss", "training objective diverged", ErrorKind::Runtime);
    }
    return loss;
  };
  double loss = check(bce_objective(head, examples, weights, hyper.l2));
  if (loss_trace) loss_trace->push_back(loss);

  const std::size_t n = examples.size();
  const std::size_t batch = hyper.batch_size == 0 ? n : std::min(hyper.batch_size, n);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 rng(hyper.seed);
  std::vector<Example> minibatch;
  minibatch.reserve(batch);

  for (std::size_t epoch = 0; epoch < hyper.epochs; ++epoch) {
    if (batch < n) seeded_shuffle(std::span<std::size_t>(order), rng);
    for (std::size_t begin = 0; begin < n; begin += batch) {
      const std::size_t end = std::min(n, begin + batch);
      const double scale = hyper.lr / static_cast<double>(end - begin);
      // Weight decay first, then the data term evaluated at the old weights.
      std::array<double, kNumLabels> bias_step{};
      std::vector<std::pair<std::size_t, double>> steps;
      for (std::size_t k = begin; k < end; ++k) {
        const Example& e = examples[order[k]];
        for (int j = 0; j < kNumLabels; ++j) {
          const double g = logit_gradient(head.logit(j, e.x), e.y[j], weights[j]) * scale;
          bias_step[j] += g;
          for (const auto& [idx, v] : e.x.entries) {
            if (idx < head.dim()) steps.emplace_back(j * head.dim() + idx, g * v);
          }
        }
      }
      if (hyper.l2 > 0) {
        const double decay = 1.0 - hyper.lr * hyper.l2;
        for (double& w : head.weights()) w *= decay;
      }
      auto w = head.weights();
      for (const auto& [pos, step] : steps) w[pos] -= step;
      for (int j = 0; j < kNumLabels; ++j) head.bias(j) -= bias_step[j];
    }
    loss = check(bce_objective(head, examples, weights, hyper.l2));
    if (loss_trace) loss_trace->push_back(loss);
  }
  return loss;
}

}  // namespace

ScoreModel train_reference(const Corpus& train, const FeatureConfig& features,
                           const TrainHyper& hyper, std::vector<double>* loss_trace) {
  require_both_classes(train);
  ScoreModel model;
  model.kind = ModelKind::ReferenceLinear;
  model.features = features;

  const FunctionIndex index(std::span<const LabeledFunction>(train.functions));
  std::vector<TokenSequence> sequences(train.functions.size());
  const auto n = static_cast<std::int64_t>(sequences.size());
#pragma omp parallel for schedule(dynamic, 32)
  for (std::int64_t i = 0; i < n; ++i) {
    sequences[i] = tokenize(train.functions[i].function, index, features);
  }
  model.vocabulary = Vocabulary::build(sequences);
  model.head = LinearHead(model.vocabulary.size() + 1);

  const auto examples = build_examples(train, model);
  const double loss = run_sgd(model.head, examples, hyper, loss_trace);
  model.history.push_back({"train", hyper, examples.size(), loss});
  return model;
}

ScoreModel fine_tune(const ScoreModel& model, const Corpus& target, const TrainHyper& hyper,
                     std::vector<double>* loss_trace) {
  if (model.kind != ModelKind::ReferenceLinear) {
    throw Error("model.WrongKind", "only the reference-linear model can be fine-tuned");
  }
  require_both_classes(target);
  ScoreModel tuned = model;
  const auto examples = build_examples(target, tuned);
  const double loss = run_sgd(tuned.head, examples, hyper, loss_trace);
  tuned.history.push_back({"finetune", hyper, examples.size(), loss});
  return tuned;
}

// ---------------------------------------------------------------------------
// Scoring

ScoreModel make_baseline(ModelKind kind, const FeatureConfig& features, std::uint64_t seed) {
  if (kind == ModelKind::ReferenceLinear) {
    throw Error("model.WrongKind", "reference-linear models are trained, not constructed");
  }
  ScoreModel m;
  m.kind = kind;
  m.seed = seed;
  m.features = features;
  return m;
}

Scores score(const ScoreModel& model, const FunctionRecord& function, const FunctionIndex& index,
             const std::optional<LabelSet>& labels) {
  Scores s{};
  switch (model.kind) {
    case ModelKind::ReferenceLinear: {
      const auto tokens = tokenize(function, index, model.features);
      return model.head.predict(
          feature_vector(vectorize(tokens, model.vocabulary), model.vocabulary.size()));
    }
    case ModelKind::Random: {
      const std::uint64_t id = fnv1a64(function.function_id);
      for (int j = 0; j < kNumLabels; ++j) {
        s[j] = unit_interval(mix_seed(model.seed, id + static_cast<std::uint64_t>(j)));
      }
      return s;
    }
    case ModelKind::ExternalCall: {
      const auto tokens = tokenize(function, index, model.features);
      const bool external = std::any_of(tokens.tokens.begin(), tokens.tokens.end(),
                                        [](const std::string& t) { return t.ends_with(",externalcall"); });
      s.fill(external ? 1.0 : 0.0);
      s[0] = external ? 0.0 : 1.0;
      return s;
    }
    case ModelKind::Oracle: {
      if (!labels) throw Error("model.MissingLabels", "oracle scores need labels for " + function.function_id);
      for (int j = 0; j < kNumLabels; ++j) s[j] = labels->contains(j) ? 1.0 : 0.0;
      return s;
    }
  }
  return s;
}

std::vector<Scores> score_all(const ScoreModel& model, std::span<const LabeledFunction> functions,
                              const FunctionIndex& index) {
  std::vector<Scores> out(functions.size());
  const auto n = static_cast<std::int64_t>(functions.size());
#pragma omp parallel for schedule(dynamic, 32)
  for (std::int64_t i = 0; i < n; ++i) {
    out[i] = score(model, functions[i].function, index, functions[i].labels);
  }
  return out;
}

std::vector<Scores> score_all(const ScoreModel& model, std::span<const FunctionRecord> functions,
                              const FunctionIndex& index) {
  if (model.kind == ModelKind::Oracle) {
    throw Error("model.MissingLabels", "oracle scores need labeled functions");
  }
  std::vector<Scores> out(functions.size());
  const auto n = static_cast<std::int64_t>(functions.size());
#pragma omp parallel for schedule(dynamic, 32)
  for (std::int64_t i = 0; i < n; ++i) out[i] = score(model, functions[i], index);
  return out;
}

namespace serial {

std::vector<Scores> score_all(const ScoreModel& model, std::span<const LabeledFunction> functions,
                              const FunctionIndex& index) {
  std::vector<Scores> out;
  out.reserve(functions.size());
  for (const auto& lf : functions) out.push_back(score(model, lf.function, index, lf.labels));
  return out;
}

}  // namespace serial

// ---------------------------------------------------------------------------
// Serialization

json model_to_json(const ScoreModel& model) {
  json history = json::array();
  for (const auto& h : model.history) {
    history.push_back({{"stage", h.stage}, {"hyper", to_json(h.hyper)},
                       {"examples", h.examples}, {"final_loss", h.final_loss}});
  }
  json out = {{"format", "unsafespot.model"},
              {"version", kModelFormatVersion},
              {"kind", model_kind_name(model.kind)},
              {"seed", model.seed},
              {"features", to_json(model.features)},
              {"vocab_hash", model.vocab_hash()},
              {"vocabulary", model.vocabulary.tokens()},
              {"history", history}};
  if (model.kind == ModelKind::ReferenceLinear) {
    json rows = json::array();
    for (int j = 0; j < kNumLabels; ++j) {
      auto w = model.head.weights().subspan(j * model.head.dim(), model.head.dim());
      rows.push_back(std::vector<double>(w.begin(), w.end()));
    }
    out["dim"] = model.head.dim();
    out["weights"] = rows;
    out["bias"] = std::vector<double>(model.head.biases().begin(), model.head.biases().end());
  }
  return out;
}

ScoreModel model_from_json(const json& j) {
  try {
    if (j.at("format").get<std::string>() != "unsafespot.model") {
      throw Error("model.CorruptFile", "not a model file");
    }
    const int version = j.at("version").get<int>();
    if (version != kModelFormatVersion) {
      throw Error("model.VersionMismatch", "model format version " + std::to_string(version) +
                                               ", expected " + std::to_string(kModelFormatVersion));
    }
    ScoreModel m;
    m.kind = parse_model_kind(j.at("kind").get<std::string>());
    m.seed = j.at("seed").get<std::uint64_t>();
    m.features = feature_config_from_json(j.at("features"));
    m.vocabulary = Vocabulary(j.at("vocabulary").get<std::vector<std::string>>());
    if (m.vocab_hash() != j.at("vocab_hash").get<std::string>()) {
      throw Error("model.CorruptFile", "vocabulary hash mismatch");
    }
    for (const auto& h : j.at("history")) {
      m.history.push_back({h.at("stage").get<std::string>(), train_hyper_from_json(h.at("hyper")),
                           h.at("examples").get<std::size_t>(), h.at("final_loss").get<double>()});
    }
    if (m.kind == ModelKind::ReferenceLinear) {
      const auto dim = j.at("dim").get<std::size_t>();
      if (dim != m.vocabulary.size() + 1) throw Error("model.CorruptFile", "dimension mismatch");
      m.head = LinearHead(dim);
      const auto& rows = j.at("weights");
      const auto bias = j.at("bias").get<std::vector<double>>();
      if (rows.size() != kNumLabels || bias.size() != kNumLabels) {
        throw Error("model.CorruptFile", "expected 15 weight rows");
      }
      for (int c = 0; c < kNumLabels; ++c) {
        const auto row = rows[c].get<std::vector<double>>();
        if (row.size() != dim) throw Error("model.CorruptFile", "weight row length mismatch");
        std::copy(row.begin(), row.end(), m.head.weights().begin() + c * dim);
        m.head.bias(c) = bias[c];
      }
    }
    return m;
  } catch (const json::exception& e) {
    throw Error("model.CorruptFile", e.what());
  }
}

void save_model(const ScoreModel& model, std::ostream& out) {
  out << model_to_json(model).dump() << '\n';
}

ScoreModel load_model(std::istream& in) {
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw Error("model.CorruptFile", e.what());
  }
  return model_from_json(j);
}

}  // namespace unsafespot
