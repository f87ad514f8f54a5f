#pragma once

#include <array>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "unsafespot/corpus.hpp"
#include "unsafespot/features.hpp"

namespace unsafespot {

/// ŝ(x, j) for j = 0 (safe) .. 14.
using Scores = std::array<double, kNumLabels>;

/// 1 - ŝ(x, 0).
inline double unsafeness(const Scores& scores) { return 1.0 - scores[0]; }

enum class ModelKind { ReferenceLinear, Random, ExternalCall, Oracle };
std::string_view model_kind_name(ModelKind kind);
ModelKind parse_model_kind(std::string_view name);

struct TrainHyper {
  std::size_t epochs = 30;
  double lr = 0.5;
  double l2 = 1e-4;
  std::uint64_t seed = 0;
  bool class_balance = true;
  std::size_t batch_size = 32;  // 0 = full batch

  bool operator==(const TrainHyper&) const = default;
};

json to_json(const TrainHyper& hyper);
TrainHyper train_hyper_from_json(const json& j);

/// Sparse feature vector φ(x): log1p of token counts, OOV pooled in the last slot.
struct FeatureVector {
  std::vector<std::pair<std::uint32_t, double>> entries;
};

FeatureVector feature_vector(const SparseCounts& counts, std::size_t vocabulary_size);

struct Example {
  FeatureVector x;
  std::array<std::uint8_t, kNumLabels> y{};
};

Example make_example(FeatureVector x, const LabelSet& labels);

/// Positive-class weight per label, applied to the positive term of the loss.
using ClassWeights = std::array<double, kNumLabels>;
ClassWeights class_weights(std::span<const Example> examples, bool balance);

/// Fifteen one-vs-rest logistic scorers sharing a feature space.
class LinearHead {
public:
  LinearHead() = default;
  explicit LinearHead(std::size_t dim);

  std::size_t dim() const noexcept { return dim_; }
  double& weight(int label, std::size_t feature) { return weights_[label * dim_ + feature]; }
  double weight(int label, std::size_t feature) const { return weights_[label * dim_ + feature]; }
  double& bias(int label) { return bias_[label]; }
  double bias(int label) const { return bias_[label]; }

  std::span<double> weights() noexcept { return weights_; }
  std::span<const double> weights() const noexcept { return weights_; }
  std::span<double> biases() noexcept { return bias_; }
  std::span<const double> biases() const noexcept { return bias_; }

  double logit(int label, const FeatureVector& x) const;
  Scores predict(const FeatureVector& x) const;

  bool operator==(const LinearHead&) const = default;

private:
  std::size_t dim_ = 0;
  std::vector<double> weights_;
  std::array<double, kNumLabels> bias_{};
};

/// Mean weighted binary cross-entropy over examples plus (l2/2)·|W|² (biases
/// excluded).
double bce_objective(const LinearHead& head, std::span<const Example> examples,
                     const ClassWeights& weights, double l2);

/// Analytic gradient of bce_objective, same layout as `head`.
LinearHead bce_gradient(const LinearHead& head, std::span<const Example> examples,
                        const ClassWeights& weights, double l2);

struct TrainingRecord {
  std::string stage;  // "train" or "finetune"
  TrainHyper hyper;
  std::size_t examples = 0;
  double final_loss = 0.0;

  bool operator==(const TrainingRecord&) const = default;
};

struct ScoreModel {
  ModelKind kind = ModelKind::ReferenceLinear;
  std::uint64_t seed = 0;  // random baseline
  FeatureConfig features;
  Vocabulary vocabulary;
  LinearHead head;
  std::vector<TrainingRecord> history;

  std::string vocab_hash() const { return vocabulary.hash(); }
};

/// Baselines: random (seeded), external-call, oracle.
ScoreModel make_baseline(ModelKind kind, const FeatureConfig& features,
                         std::uint64_t seed = 0);

/// Trains the reference scorer from zero weights. `loss_trace`, when given,
/// receives the full objective before training and after every epoch.
ScoreModel train_reference(const Corpus& train, const FeatureConfig& features,
                           const TrainHyper& hyper,
                           std::vector<double>* loss_trace = nullptr);

/// Continues training on a target corpus with the model's vocabulary.
ScoreModel fine_tune(const ScoreModel& model, const Corpus& target,
                     const TrainHyper& hyper,
                     std::vector<double>* loss_trace = nullptr);

/// ŝ(x, ·). Oracle models need `labels`.
Scores score(const ScoreModel& model, const FunctionRecord& function,
             const FunctionIndex& index,
             const std::optional<LabelSet>& labels = std::nullopt);

std::vector<Scores> score_all(const ScoreModel& model,
                              std::span<const LabeledFunction> functions,
                              const FunctionIndex& index);
std::vector<Scores> score_all(const ScoreModel& model,
                              std::span<const FunctionRecord> functions,
                              const FunctionIndex& index);

namespace serial {
std::vector<Scores> score_all(const ScoreModel& model,
                              std::span<const LabeledFunction> functions,
                              const FunctionIndex& index);
}  // namespace serial

inline constexpr int kModelFormatVersion = 1;

void save_model(const ScoreModel& model, std::ostream& out);
ScoreModel load_model(std::istream& in);
json model_to_json(const ScoreModel& model);
ScoreModel model_from_json(const json& j);

}  // namespace unsafespot
