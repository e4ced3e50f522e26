#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <vector>

#include "attune/feedback.hpp"
#include "attune/objective.hpp"

ATTUNE_NAMESPACE_BEGIN

struct LabeledImage {
  std::int64_t sample_id = 0;
  Tensor pixels;  // [1,28,28], values in [0,1]
  int label = 0;
};

using Dataset = std::vector<LabeledImage>;

/// Reads an IDX image/label pair (magic 0x803 / 0x801, big-endian extents).
/// Pixels are byte/255; sample ids are the item indices. Throws FormatError
/// on a bad magic, a truncated payload, or a count mismatch.
Dataset load_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path);

enum class DecoySplit { train, test };
enum class TestDecoyColors { palette, full_range };

inline constexpr std::size_t kDecoyBlock = 4;

/// Corner intensity (0..255) for label y in the training split.
inline int decoy_train_intensity(int label) { return 255 - 25 * label; }

/// Overwrites the four 4x4 corner blocks with c/255. Training images use
/// c = 255 - 25y; test images draw one c per image, by default from the
/// training palette, otherwise uniformly from 0..255.
LabeledImage apply_decoy(const LabeledImage& image, DecoySplit split, std::mt19937_64& rng,
                         TestDecoyColors colors = TestDecoyColors::palette);
Dataset apply_decoy(const Dataset& data, DecoySplit split, std::uint64_t seed,
                    TestDecoyColors colors = TestDecoyColors::palette);

/// 1 on the four 4x4 corner blocks of a rows x cols image.
BinaryMask corner_mask(std::size_t rows = 28, std::size_t cols = 28);
FeedbackMask corner_feedback_oracle(std::int64_t sample_id, std::size_t rows = 28, std::size_t cols = 28);

struct SplitSpec {
  double train_fraction = 0.9;
  double validation_fraction = 0.1;
  std::uint64_t seed = 0;
};

struct TrainValidation {
  Dataset train;
  Dataset validation;
};

/// Seeded shuffle, then the first round(train_fraction * n) items train.
TrainValidation split_dataset(const Dataset& data, const SplitSpec& spec);

/// `count` items chosen uniformly without replacement, kept in input order.
Dataset subsample(const Dataset& data, std::size_t count, std::uint64_t seed);

/// Stacks the selected items into a batch; `annotated` flags are filled from
/// `is_annotated` when given.
Batch make_batch(const Dataset& data, std::span<const std::size_t> indices,
                 const std::function<bool(std::int64_t)>& is_annotated = {});
Tensor stack_images(const Dataset& data, std::span<const std::size_t> indices);

struct Experiment {
  Dataset train;
  Dataset validation;
  Dataset test;
};

struct ExperimentSizes {
  std::size_t train = 10000;
  std::size_t validation = 1000;
  std::size_t test = 2000;

  static ExperimentSizes desk() { return {}; }
  static ExperimentSizes full() { return {54000, 6000, 10000}; }
};

/// MNIST train/validation/test subsets. Train and validation are disjoint
/// draws from the official training file; test comes from the official test
/// file. With `decoy` set, train and validation get label-coloured corners
/// and test gets random ones.
Experiment load_experiment(const std::filesystem::path& mnist_dir, const ExperimentSizes& sizes, std::uint64_t seed,
                           bool decoy, TestDecoyColors colors = TestDecoyColors::palette);

Experiment make_experiment(const Dataset& train_file, const Dataset& test_file, const ExperimentSizes& sizes,
                           std::uint64_t seed, bool decoy, TestDecoyColors colors = TestDecoyColors::palette);

ATTUNE_NAMESPACE_END
