#include "attune/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <random>
#include <sstream>

#include <nlohmann/json.hpp>

#include "attune/errors.hpp"
#include "attune/log.hpp"

ATTUNE_NAMESPACE_BEGIN

// ---------------------------------------------------------------- config

void TrainConfig::validate() const {
  if (!(learning_rate > 0)) throw ContractError("learning_rate must be positive");
  if (batch_size == 0) throw ContractError("batch_size must be at least 1");
  if (patience == 0) throw ContractError("patience must be at least 1");
  if (mc_train == 0 || mc_eval == 0) throw ContractError("Monte Carlo sample counts must be at least 1");
  if (!(prior_std > 0)) throw ContractError("prior_std must be positive");
  if (!(init_sigma > 0)) throw ContractError("init_sigma must be positive");
  if (!(feedback_fraction > 0 && feedback_fraction <= 1)) throw ContractError("feedback_fraction must be in (0,1]");
  if (support_threshold < 0) throw ContractError("support_threshold must be non-negative");
}

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <class T>
T parse_number(const std::string& key, const std::string& value) {
  std::istringstream in(value);
  T out{};
  in >> out;
  if (!in || !in.eof()) throw ContractError("config: bad value '" + value + "' for " + key);
  return out;
}

bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1") return true;
  if (value == "false" || value == "0") return false;
  throw ContractError("config: bad boolean '" + value + "' for " + key);
}

}  // namespace

void TrainConfig::set(const std::string& key, const std::string& value) {
  if (key == "learning_rate") learning_rate = parse_number<double>(key, value);
  else if (key == "batch_size") batch_size = parse_number<std::size_t>(key, value);
  else if (key == "max_epochs") max_epochs = parse_number<std::size_t>(key, value);
  else if (key == "finetune_epochs") finetune_epochs = parse_number<std::size_t>(key, value);
  else if (key == "patience") patience = parse_number<std::size_t>(key, value);
  else if (key == "mc_train") mc_train = parse_number<std::size_t>(key, value);
  else if (key == "mc_eval") mc_eval = parse_number<std::size_t>(key, value);
  else if (key == "prior_std") prior_std = parse_number<double>(key, value);
  else if (key == "init_sigma") init_sigma = parse_number<double>(key, value);
  else if (key == "seed") seed = parse_number<std::uint64_t>(key, value);
  else if (key == "feedback_fraction") feedback_fraction = parse_number<double>(key, value);
  else if (key == "support_threshold") support_threshold = parse_number<double>(key, value);
  else if (key == "overlap_samples") overlap_samples = parse_number<std::size_t>(key, value);
  else if (key == "full_scale") full_scale = parse_bool(key, value);
  else if (key == "test_colors") {
    if (value == "palette") test_colors = TestDecoyColors::palette;
    else if (value == "full_range") test_colors = TestDecoyColors::full_range;
    else throw ContractError("config: test_colors must be palette or full_range");
  } else {
    throw ContractError("config: unknown key '" + key + "'");
  }
}

TrainConfig TrainConfig::parse(const std::string& text) {
  TrainConfig c;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ContractError("config line " + std::to_string(lineno) + ": expected key = value");
    c.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  c.validate();
  return c;
}

TrainConfig TrainConfig::load(const std::filesystem::path& path) { return parse(read_file(path)); }

std::string TrainConfig::to_string() const {
  std::ostringstream out;
  out << std::setprecision(17);
  out << "learning_rate = " << learning_rate << "\n"
      << "batch_size = " << batch_size << "\n"
      << "max_epochs = " << max_epochs << "\n"
      << "finetune_epochs = " << finetune_epochs << "\n"
      << "patience = " << patience << "\n"
      << "mc_train = " << mc_train << "\n"
      << "mc_eval = " << mc_eval << "\n"
      << "prior_std = " << prior_std << "\n"
      << "init_sigma = " << init_sigma << "\n"
      << "seed = " << seed << "\n"
      << "feedback_fraction = " << feedback_fraction << "\n"
      << "support_threshold = " << support_threshold << "\n"
      << "overlap_samples = " << overlap_samples << "\n"
      << "full_scale = " << (full_scale ? "true" : "false") << "\n"
      << "test_colors = " << (test_colors == TestDecoyColors::palette ? "palette" : "full_range") << "\n";
  return out.str();
}

// ---------------------------------------------------------------- adam

void Adam::update(Tensor& param, const Tensor& grad, std::vector<double>& m, std::vector<double>& v) const {
  if (grad.shape() != param.shape()) throw DimensionError("adam: gradient shape differs from parameter shape");
  if (m.empty()) {
    m.assign(param.size(), 0.0);
    v.assign(param.size(), 0.0);
  }
  const double c1 = 1 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < param.size(); ++i) {
    const double g = grad[i];
    m[i] = beta1_ * m[i] + (1 - beta1_) * g;
    v[i] = beta2_ * v[i] + (1 - beta2_) * g * g;
    const double mhat = m[i] / c1;
    const double vhat = v[i] / c2;
    param[i] = static_cast<Real>(param[i] - lr_ * mhat / (std::sqrt(vhat) + eps_));
  }
}

void Adam::step(std::vector<GaussianVariational>& params, const ParameterGradients& grads) {
  if (params.size() != grads.size()) throw DimensionError("adam: one gradient per parameter group expected");
  if (m_.empty()) {
    m_.resize(2 * params.size());
    v_.resize(2 * params.size());
  }
  ++t_;
  for (std::size_t p = 0; p < params.size(); ++p) {
    update(params[p].mu, grads[p].mu, m_[2 * p], v_[2 * p]);
    update(params[p].raw_sigma, grads[p].raw_sigma, m_[2 * p + 1], v_[2 * p + 1]);
  }
}

// ---------------------------------------------------------------- metrics

ClassificationMetrics classification_metrics(const std::vector<std::vector<std::size_t>>& confusion) {
  const std::size_t k = confusion.size();
  std::size_t total = 0;
  std::size_t tp = 0;
  double recall_sum = 0;
  std::size_t present = 0;
  for (std::size_t i = 0; i < k; ++i) {
    if (confusion[i].size() != k) throw DimensionError("confusion matrix must be square");
    const std::size_t row = std::accumulate(confusion[i].begin(), confusion[i].end(), std::size_t{0});
    total += row;
    tp += confusion[i][i];
    if (row > 0) {
      recall_sum += static_cast<double>(confusion[i][i]) / static_cast<double>(row);
      ++present;
    }
  }
  ClassificationMetrics m;
  m.samples = total;
  if (total == 0) return m;
  // Single-label predictions: every miss is one FP (for the predicted class)
  // and one FN (for the true class), so the micro counts share a denominator.
  const std::size_t fp = total - tp;
  const std::size_t fn = total - tp;
  const double t = static_cast<double>(tp);
  m.accuracy = t / static_cast<double>(total);
  m.precision = t / static_cast<double>(tp + fp);
  m.recall = t / static_cast<double>(tp + fn);
  m.f1 = 2 * t / static_cast<double>(2 * tp + fp + fn);
  m.balanced_accuracy = recall_sum / static_cast<double>(present);
  return m;
}

ClassificationMetrics classification_metrics(std::span<const int> truth, std::span<const int> predicted,
                                             std::size_t classes) {
  if (truth.size() != predicted.size()) throw DimensionError("metrics: label counts differ");
  std::vector<std::vector<std::size_t>> confusion(classes, std::vector<std::size_t>(classes, 0));
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (truth[i] < 0 || predicted[i] < 0 || static_cast<std::size_t>(truth[i]) >= classes ||
        static_cast<std::size_t>(predicted[i]) >= classes) {
      throw ContractError("metrics: label out of range");
    }
    ++confusion[static_cast<std::size_t>(truth[i])][static_cast<std::size_t>(predicted[i])];
  }
  return classification_metrics(confusion);
}

std::vector<int> predict_labels(const BayesianNetwork& net, const Dataset& data, std::size_t m, NoiseSource& noise,
                                std::size_t chunk) {
  std::vector<int> out;
  out.reserve(data.size());
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < data.size(); start += chunk) {
    const std::size_t end = std::min(data.size(), start + chunk);
    idx.resize(end - start);
    std::iota(idx.begin(), idx.end(), start);
    const Tensor probs = predict(net, stack_images(data, idx), m, noise);
    const std::size_t k = probs.dim(1);
    for (std::size_t i = 0; i < idx.size(); ++i) {
      const Real* row = probs.data() + i * k;
      out.push_back(static_cast<int>(std::max_element(row, row + k) - row));
    }
  }
  return out;
}

namespace {

std::vector<int> labels_of(const Dataset& data) {
  std::vector<int> y;
  y.reserve(data.size());
  for (const LabeledImage& img : data) y.push_back(img.label);
  return y;
}

nlohmann::json classification_json(const ClassificationMetrics& c) {
  return {{"accuracy", c.accuracy},   {"precision", c.precision},
          {"recall", c.recall},       {"f1", c.f1},
          {"balanced_accuracy", c.balanced_accuracy}, {"samples", c.samples}};
}

}  // namespace

std::string MetricsReport::to_json() const {
  nlohmann::json j;
  j["classification"] = classification_json(classification);
  j["overlap"] = nlohmann::json::object();
  for (const auto& [method, s] : overlaps) {
    j["overlap"][method] = {{"value", s.value}, {"used", s.used}, {"skipped", s.skipped}};
  }
  j["history"] = nlohmann::json::array();
  for (const EpochRecord& e : history) {
    j["history"].push_back({{"stage", e.stage},
                            {"epoch", e.epoch},
                            {"train_loss", e.train_loss},
                            {"nll_evidence", e.nll_evidence},
                            {"validation_f1", e.validation_f1},
                            {"evidence_positions", e.evidence_positions}});
  }
  return j.dump(2);
}

std::string MetricsReport::to_csv() const {
  std::ostringstream out;
  out << std::setprecision(17) << "metric,value\n";
  out << "accuracy," << classification.accuracy << "\n";
  out << "precision_micro," << classification.precision << "\n";
  out << "recall_micro," << classification.recall << "\n";
  out << "f1_micro," << classification.f1 << "\n";
  out << "balanced_accuracy," << classification.balanced_accuracy << "\n";
  for (const auto& [method, s] : overlaps) out << "overlap_" << method << "," << s.value << "\n";
  return out.str();
}

bool operator==(const MetricsReport& a, const MetricsReport& b) { return a.to_json() == b.to_json(); }

// ---------------------------------------------------------------- training

namespace {

// Independent random streams per stage, derived from the run seed.
struct StageSeeds {
  std::uint64_t init, shuffle, noise, validation;
};

StageSeeds stage_seeds(std::uint64_t seed, std::uint64_t stage) {
  std::seed_seq seq{seed, stage};
  std::array<std::uint64_t, 4> s{};
  seq.generate(s.begin(), s.end());
  return {s[0], s[1], s[2], s[3]};
}

constexpr std::uint64_t kTrainStage = 1;
constexpr std::uint64_t kFinetuneStage = 2;

double validation_f1(const BayesianNetwork& net, const Dataset& validation, const TrainConfig& config,
                     std::uint64_t seed) {
  NoiseSource noise(seed);
  const std::vector<int> pred = predict_labels(net, validation, config.mc_eval, noise);
  return classification_metrics(labels_of(validation), pred, net.architecture().num_classes()).f1;
}

using EvidenceRefresh = std::function<EvidenceMap(const BayesianNetwork&, std::size_t epoch)>;

TrainResult fit(BayesianNetwork net, const TrainConfig& config, const Dataset& train_set, const Dataset& validation,
                const char* stage, std::size_t max_epochs, const StageSeeds& seeds, const EvidenceRefresh& refresh,
                const FitHooks& hooks) {
  config.validate();
  if (train_set.empty() || validation.empty()) throw ContractError("training needs nonempty train and validation sets");

  Adam adam(config.learning_rate);
  NoiseSource noise(seeds.noise);
  std::mt19937_64 shuffle_rng(seeds.shuffle);
  ObjectiveOptions options;
  options.prior.std = static_cast<Real>(config.prior_std);

  std::vector<std::size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), 0);

  TrainResult best{net, {}, {}};
  double best_f1 = -1;
  std::size_t since_best = 0;

  for (std::size_t epoch = 1; epoch <= max_epochs; ++epoch) {
    if (hooks.cancel && hooks.cancel->load()) throw Error("training cancelled");
    EvidenceMap evidence;
    if (refresh) evidence = refresh(net, epoch);
    std::size_t positions = 0;
    for (const auto& [id, ev] : evidence) positions += ev.positions.size();
    const auto is_annotated = [&evidence](std::int64_t id) { return evidence.count(id) != 0; };

    std::shuffle(order.begin(), order.end(), shuffle_rng);
    double loss_sum = 0;
    double evidence_sum = 0;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t end = std::min(order.size(), start + config.batch_size);
      const std::span<const std::size_t> idx(order.data() + start, end - start);
      const Batch batch = make_batch(train_set, idx, is_annotated);
      const LossResult r = evidence.empty()
                               ? elbo_loss(batch, net, config.mc_train, train_set.size(), noise, options)
                               : augmented_loss(batch, evidence, net, config.mc_train, train_set.size(), noise, options);
      if (!std::isfinite(r.report.total)) {
        throw NumericError(std::string(stage) + ": loss diverged at epoch " + std::to_string(epoch));
      }
      loss_sum += r.report.total;
      evidence_sum += r.report.nll_evidence;
      adam.step(net.parameters(), r.gradients);
    }

    EpochRecord rec;
    rec.stage = stage;
    rec.epoch = epoch;
    rec.train_loss = loss_sum / static_cast<double>(train_set.size());
    rec.nll_evidence = evidence_sum;
    rec.validation_f1 = validation_f1(net, validation, config, seeds.validation);
    rec.evidence_positions = positions;
    best.history.push_back(rec);
    log_info(std::string(stage) + " epoch " + std::to_string(epoch) + ": loss/sample " +
             std::to_string(rec.train_loss) + ", validation F1 " + std::to_string(rec.validation_f1));
    if (hooks.on_epoch) hooks.on_epoch(rec);

    if (rec.validation_f1 > best_f1) {
      best_f1 = rec.validation_f1;
      best.model = net;
      best.metadata.epoch = epoch;
      since_best = 0;
    } else if (++since_best >= config.patience) {
      break;
    }
  }
  best.metadata.seed = config.seed;
  best.metadata.metrics["validation_f1"] = best_f1;
  return best;
}

}  // namespace

TrainResult train(const TrainConfig& config, const Dataset& train_set, const Dataset& validation,
                  const FitHooks& hooks) {
  const StageSeeds seeds = stage_seeds(config.seed, kTrainStage);
  BayesianNetwork net(ArchitectureDescriptor::lenet(), seeds.init, static_cast<Real>(config.init_sigma));
  return fit(std::move(net), config, train_set, validation, "train", config.max_epochs, seeds, {}, hooks);
}

TrainResult continue_training(const BayesianNetwork& model, const TrainConfig& config, const Dataset& train_set,
                              const Dataset& validation, const FitHooks& hooks) {
  return fit(model, config, train_set, validation, "finetune", config.finetune_epochs,
             stage_seeds(config.seed, kFinetuneStage), {}, hooks);
}

TrainResult finetune(const BayesianNetwork& model, const FeedbackStore& store, const TrainConfig& config,
                     const Dataset& train_set, const Dataset& validation, const FitHooks& hooks) {
  if (store.empty()) {
    log_warning("finetune: feedback store is empty; continuing plain training");
    return continue_training(model, config, train_set, validation, hooks);
  }
  // Annotated samples, in store order.
  std::map<std::int64_t, std::size_t> index_of;
  for (std::size_t i = 0; i < train_set.size(); ++i) index_of[train_set[i].sample_id] = i;
  std::vector<FeedbackMask> feedback;
  std::vector<std::size_t> rows;
  for (const auto& [id, mask] : store.items()) {
    auto it = index_of.find(id);
    if (it == index_of.end()) {
      log_warning("finetune: feedback for sample " + std::to_string(id) + " not in the training set; ignored");
      continue;
    }
    feedback.push_back({id, mask});
    rows.push_back(it->second);
  }
  if (feedback.empty()) throw ContractError("finetune: no stored feedback refers to a training sample");

  const Real threshold = static_cast<Real>(config.support_threshold);
  const EvidenceRefresh refresh = [&](const BayesianNetwork& net, std::size_t epoch) {
    EvidenceMap map;
    constexpr std::size_t kChunk = 256;
    for (std::size_t start = 0; start < feedback.size(); start += kChunk) {
      const std::size_t end = std::min(feedback.size(), start + kChunk);
      const std::span<const std::size_t> idx(rows.data() + start, end - start);
      const std::span<const FeedbackMask> fb(feedback.data() + start, end - start);
      for (ActivationEvidence& ev : extract_evidence_batch(fb, net, stack_images(train_set, idx), threshold, epoch)) {
        map.emplace(ev.sample_id, std::move(ev));
      }
    }
    const bool all_empty =
        std::all_of(map.begin(), map.end(), [](const auto& kv) { return kv.second.positions.empty(); });
    if (all_empty) log_warning("finetune: feedback maps to no live activations at epoch " + std::to_string(epoch));
    return map;
  };
  return fit(model, config, train_set, validation, "finetune", config.finetune_epochs,
             stage_seeds(config.seed, kFinetuneStage), refresh, hooks);
}

// ---------------------------------------------------------------- annotation

std::optional<BinaryMask> CornerOracleSource::request(const LabeledImage& sample) {
  return corner_mask(sample.pixels.dim(1), sample.pixels.dim(2));
}

std::optional<BinaryMask> QueueAnnotationSource::request(const LabeledImage& sample) {
  std::unique_lock lock(mutex_);
  const bool arrived =
      ready_.wait_for(lock, timeout_, [&] { return pending_.count(sample.sample_id) != 0; });
  if (!arrived) return std::nullopt;
  BinaryMask m = std::move(pending_[sample.sample_id]);
  pending_.erase(sample.sample_id);
  return m;
}

void QueueAnnotationSource::submit(std::int64_t sample_id, BinaryMask mask) {
  {
    std::lock_guard lock(mutex_);
    pending_[sample_id] = std::move(mask);
  }
  ready_.notify_all();
}

std::vector<std::size_t> select_for_annotation(std::size_t n, double fraction, std::uint64_t seed) {
  if (!(fraction > 0 && fraction <= 1)) throw ContractError("annotate: fraction must be in (0,1]");
  // The small slack keeps products such as 0.004 * 54000 from rounding up past
  // their exact value.
  const auto count = std::min(n, static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(n) - 1e-9)));
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  order.resize(count);
  std::sort(order.begin(), order.end());
  return order;
}

FeedbackStore annotate(const Dataset& data, double fraction, AnnotationSource& source, std::uint64_t seed) {
  FeedbackStore store;
  std::size_t missing = 0;
  for (std::size_t i : select_for_annotation(data.size(), fraction, seed)) {
    if (auto mask = source.request(data[i])) {
      store.put(data[i].sample_id, std::move(*mask));
    } else {
      ++missing;
    }
  }
  if (missing > 0) log_warning("annotate: " + std::to_string(missing) + " samples received no feedback");
  return store;
}

// ---------------------------------------------------------------- evaluation

std::vector<FeedbackMask> corner_annotations(const Dataset& test, std::size_t count) {
  std::vector<FeedbackMask> out;
  for (std::size_t i = 0; i < std::min(count, test.size()); ++i) {
    out.push_back(corner_feedback_oracle(test[i].sample_id, test[i].pixels.dim(1), test[i].pixels.dim(2)));
  }
  return out;
}

MetricsReport evaluate(const BayesianNetwork& model, const Dataset& test, std::span<const FeedbackMask> annotated,
                       const TrainConfig& config, std::span<const AttributionMethod> methods) {
  MetricsReport report;
  NoiseSource noise(stage_seeds(config.seed, 3).validation);
  const std::vector<int> pred = predict_labels(model, test, config.mc_eval, noise);
  report.classification = classification_metrics(labels_of(test), pred, model.architecture().num_classes());

  if (annotated.empty() || methods.empty()) return report;
  std::map<std::int64_t, const LabeledImage*> by_id;
  for (const LabeledImage& img : test) by_id[img.sample_id] = &img;
  for (AttributionMethod method : methods) {
    std::vector<OverlapPair> pairs;
    pairs.reserve(annotated.size());
    for (const FeedbackMask& f : annotated) {
      auto it = by_id.find(f.sample_id);
      if (it == by_id.end()) throw ContractError("evaluate: annotated sample not in the test set");
      pairs.push_back({f.mask, explain(method, model, it->second->pixels)});
    }
    const OverlapResult r = attribution_overlap(pairs);
    report.overlaps[to_string(method)] = {r.value, r.used, r.skipped};
  }
  return report;
}

ExperimentReport run_decoy_experiment(const TrainConfig& config, const Dataset& train_file, const Dataset& test_file,
                                      const std::function<void(const std::string&)>& progress) {
  const auto say = [&](const std::string& s) {
    if (progress) progress(s);
  };
  const AttributionMethod all[] = {AttributionMethod::saliency, AttributionMethod::gradcam,
                                   AttributionMethod::occlusion};
  ExperimentReport out;

  say("clean reference");
  const Experiment clean = make_experiment(train_file, test_file, config.sizes(), config.seed, false);
  TrainResult ref = train(config, clean.train, clean.validation);
  out.clean = evaluate(ref.model, clean.test, {}, config, {});
  out.clean.history = std::move(ref.history);

  say("decoy training");
  const Experiment decoy = make_experiment(train_file, test_file, config.sizes(), config.seed, true, config.test_colors);
  const std::vector<FeedbackMask> held_out = corner_annotations(decoy.test, config.overlap_samples);
  TrainResult base = train(config, decoy.train, decoy.validation);
  out.before = evaluate(base.model, decoy.test, held_out, config, all);
  out.before.history = base.history;

  say("annotation");
  CornerOracleSource oracle;
  const FeedbackStore store = annotate(decoy.train, config.feedback_fraction, oracle, config.seed);
  out.annotated = store.size();

  say("fine-tuning");
  TrainResult tuned = finetune(base.model, store, config, decoy.train, decoy.validation);
  out.after = evaluate(tuned.model, decoy.test, held_out, config, all);
  out.after.history = std::move(tuned.history);
  return out;
}

ATTUNE_NAMESPACE_END
