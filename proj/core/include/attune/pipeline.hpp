#pragma once

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "attune/checkpoint.hpp"
#include "attune/data.hpp"
#include "attune/explain.hpp"
#include "attune/objective.hpp"

ATTUNE_NAMESPACE_BEGIN

struct TrainConfig {
  double learning_rate = 1e-3;
  std::size_t batch_size = 256;
  std::size_t max_epochs = 30;
  std::size_t finetune_epochs = 20;
  std::size_t patience = 5;
  std::size_t mc_train = 1;
  std::size_t mc_eval = 16;
  double prior_std = 0.1;
  double init_sigma = 0.05;
  std::uint64_t seed = 0;
  double feedback_fraction = 0.02;
  double support_threshold = 0;
  std::size_t overlap_samples = 100;  // annotated test samples scored for overlap
  bool full_scale = false;
  TestDecoyColors test_colors = TestDecoyColors::palette;

  /// Throws ContractError on a value outside its domain.
  void validate() const;
  /// Sets one field from its textual form; throws ContractError for unknown
  /// keys or unparsable values.
  void set(const std::string& key, const std::string& value);

  /// `key = value` lines; blank lines and `#` comments are ignored.
  static TrainConfig parse(const std::string& text);
  static TrainConfig load(const std::filesystem::path& path);
  std::string to_string() const;

  ExperimentSizes sizes() const { return full_scale ? ExperimentSizes::full() : ExperimentSizes::desk(); }
};

/// Adam with bias correction, over every mu and raw_sigma tensor.
class Adam {
 public:
  explicit Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void step(std::vector<GaussianVariational>& params, const ParameterGradients& grads);
  std::size_t steps() const noexcept { return t_; }

 private:
  void update(Tensor& param, const Tensor& grad, std::vector<double>& m, std::vector<double>& v) const;

  double lr_, beta1_, beta2_, eps_;
  std::size_t t_ = 0;
  std::vector<std::vector<double>> m_;
  std::vector<std::vector<double>> v_;
};

/// Classification metrics from a confusion matrix.
struct ClassificationMetrics {
  double accuracy = 0;
  double precision = 0;  // micro
  double recall = 0;     // micro
  double f1 = 0;         // micro
  double balanced_accuracy = 0;
  std::size_t samples = 0;
};

/// confusion[true][predicted].
ClassificationMetrics classification_metrics(const std::vector<std::vector<std::size_t>>& confusion);
ClassificationMetrics classification_metrics(std::span<const int> truth, std::span<const int> predicted,
                                             std::size_t classes);

/// Argmax of the m-sample predictive, in chunks to bound memory.
std::vector<int> predict_labels(const BayesianNetwork& net, const Dataset& data, std::size_t m, NoiseSource& noise,
                                std::size_t chunk = 500);

struct EpochRecord {
  std::string stage;  // "train" or "finetune"
  std::size_t epoch = 0;
  double train_loss = 0;
  double nll_evidence = 0;
  double validation_f1 = 0;
  std::size_t evidence_positions = 0;
};

struct OverlapScore {
  double value = 0;
  std::size_t used = 0;
  std::size_t skipped = 0;
};

struct MetricsReport {
  ClassificationMetrics classification;
  std::map<std::string, OverlapScore> overlaps;  // keyed by method name
  std::vector<EpochRecord> history;

  std::string to_json() const;
  /// One `metric,value` row per metric.
  std::string to_csv() const;
  friend bool operator==(const MetricsReport&, const MetricsReport&);
};

struct FitHooks {
  std::function<void(const EpochRecord&)> on_epoch;
  const std::atomic<bool>* cancel = nullptr;
};

struct TrainResult {
  BayesianNetwork model;
  TrainingMetadata metadata;
  std::vector<EpochRecord> history;
};

/// Minimises the negative ELBO with Adam; validation micro-F1 (m = mc_eval)
/// after every epoch picks the returned model. Stops after `patience` epochs
/// without improvement or at max_epochs. Throws NumericError on divergence.
TrainResult train(const TrainConfig& config, const Dataset& train_set, const Dataset& validation,
                  const FitHooks& hooks = {});

/// Further ELBO training of `model` with fresh optimiser state, using the
/// fine-tuning epoch budget and random streams.
TrainResult continue_training(const BayesianNetwork& model, const TrainConfig& config, const Dataset& train_set,
                              const Dataset& validation, const FitHooks& hooks = {});

/// Fine-tunes with the evidence-augmented loss over the whole training set.
/// Activation evidence for every stored mask is recomputed at the start of
/// each epoch. An empty store reduces to continue_training.
TrainResult finetune(const BayesianNetwork& model, const FeedbackStore& store, const TrainConfig& config,
                     const Dataset& train_set, const Dataset& validation, const FitHooks& hooks = {});

/// Supplies a feedback mask for a sample, or nothing if none arrives.
class AnnotationSource {
 public:
  virtual ~AnnotationSource() = default;
  virtual std::optional<BinaryMask> request(const LabeledImage& sample) = 0;
};

/// Rejects the four decoy corners of every sample.
class CornerOracleSource : public AnnotationSource {
 public:
  std::optional<BinaryMask> request(const LabeledImage& sample) override;
};

/// Waits for masks submitted from another thread (the annotation service).
class QueueAnnotationSource : public AnnotationSource {
 public:
  explicit QueueAnnotationSource(std::chrono::milliseconds timeout) : timeout_(timeout) {}
  std::optional<BinaryMask> request(const LabeledImage& sample) override;
  void submit(std::int64_t sample_id, BinaryMask mask);

 private:
  std::chrono::milliseconds timeout_;
  std::mutex mutex_;
  std::condition_variable ready_;
  std::map<std::int64_t, BinaryMask> pending_;
};

/// ceil(fraction * n) distinct indices, uniformly at random.
std::vector<std::size_t> select_for_annotation(std::size_t n, double fraction, std::uint64_t seed);

/// Collects masks for a random ceil(fraction * n) subset of `data`. Samples
/// the source leaves unanswered are dropped with a warning.
FeedbackStore annotate(const Dataset& data, double fraction, AnnotationSource& source, std::uint64_t seed);

/// Classification metrics on `test` (m = mc_eval) and, for each listed
/// method, the attribution overlap over `annotated`.
MetricsReport evaluate(const BayesianNetwork& model, const Dataset& test, std::span<const FeedbackMask> annotated,
                       const TrainConfig& config, std::span<const AttributionMethod> methods);

/// The held-out overlap subset: the first `count` test samples with corner
/// masks.
std::vector<FeedbackMask> corner_annotations(const Dataset& test, std::size_t count);

struct ExperimentReport {
  MetricsReport clean;       // clean-trained reference on the clean test set
  MetricsReport before;      // decoy-trained model on the random-decoy test set
  MetricsReport after;       // same model after feedback fine-tuning
  std::size_t annotated = 0;
};

/// Clean reference, decoy training, corner-oracle annotation, fine-tuning,
/// and evaluation for one seed.
ExperimentReport run_decoy_experiment(const TrainConfig& config, const Dataset& train_file, const Dataset& test_file,
                                      const std::function<void(const std::string&)>& progress = {});

ATTUNE_NAMESPACE_END
