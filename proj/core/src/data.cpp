#include "attune/data.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>

#include "attune/checkpoint.hpp"
#include "attune/errors.hpp"

ATTUNE_NAMESPACE_BEGIN

namespace {

constexpr std::uint32_t kImageMagic = 0x00000803;
constexpr std::uint32_t kLabelMagic = 0x00000801;

std::uint32_t read_be32(const std::string& bytes, std::size_t offset, const std::filesystem::path& path) {
  if (bytes.size() < offset + 4) {
    throw FormatError(path.string() + ": truncated header, missing " + std::to_string(offset + 4 - bytes.size()) +
                      " bytes");
  }
  std::uint32_t v = 0;
  for (std::size_t i = 0; i < 4; ++i) v = (v << 8) | static_cast<std::uint8_t>(bytes[offset + i]);
  return v;
}

void require_payload(const std::string& bytes, std::size_t needed, const std::filesystem::path& path) {
  if (bytes.size() < needed) {
    throw FormatError(path.string() + ": truncated payload, missing " + std::to_string(needed - bytes.size()) +
                      " bytes");
  }
}

}  // namespace

Dataset load_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path) {
  const std::string img = read_file(images_path);
  const std::string lab = read_file(labels_path);
  if (read_be32(img, 0, images_path) != kImageMagic) throw FormatError(images_path.string() + ": bad IDX image magic");
  if (read_be32(lab, 0, labels_path) != kLabelMagic) throw FormatError(labels_path.string() + ": bad IDX label magic");
  const std::size_t count = read_be32(img, 4, images_path);
  const std::size_t rows = read_be32(img, 8, images_path);
  const std::size_t cols = read_be32(img, 12, images_path);
  const std::size_t label_count = read_be32(lab, 4, labels_path);
  if (count != label_count) {
    throw FormatError("IDX count mismatch: " + std::to_string(count) + " images vs " + std::to_string(label_count) +
                      " labels");
  }
  if (rows == 0 || cols == 0) throw FormatError(images_path.string() + ": zero image extent");
  const std::size_t plane = rows * cols;
  require_payload(img, 16 + count * plane, images_path);
  require_payload(lab, 8 + count, labels_path);

  Dataset out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    Tensor px(Shape{1, rows, cols});
    const auto* src = reinterpret_cast<const std::uint8_t*>(img.data() + 16 + i * plane);
    for (std::size_t p = 0; p < plane; ++p) px[p] = static_cast<Real>(src[p]) / Real(255);
    const int label = static_cast<std::uint8_t>(lab[8 + i]);
    if (label > 9) throw FormatError(labels_path.string() + ": label out of range at item " + std::to_string(i));
    out.push_back({static_cast<std::int64_t>(i), std::move(px), label});
  }
  return out;
}

namespace {

void paint_corners(Tensor& px, Real value) {
  const std::size_t rows = px.dim(1);
  const std::size_t cols = px.dim(2);
  const std::array<std::size_t, 2> r0 = {0, rows - kDecoyBlock};
  const std::array<std::size_t, 2> c0 = {0, cols - kDecoyBlock};
  for (std::size_t ch = 0; ch < px.dim(0); ++ch) {
    for (std::size_t rb : r0) {
      for (std::size_t cb : c0) {
        for (std::size_t r = rb; r < rb + kDecoyBlock; ++r) {
          for (std::size_t c = cb; c < cb + kDecoyBlock; ++c) px[(ch * rows + r) * cols + c] = value;
        }
      }
    }
  }
}

}  // namespace

LabeledImage apply_decoy(const LabeledImage& image, DecoySplit split, std::mt19937_64& rng, TestDecoyColors colors) {
  const Tensor& px = image.pixels;
  if (px.rank() != 3 || px.dim(1) < 2 * kDecoyBlock || px.dim(2) < 2 * kDecoyBlock) {
    throw DimensionError("apply_decoy: image too small for corner blocks");
  }
  int intensity = 0;
  if (split == DecoySplit::train) {
    intensity = decoy_train_intensity(image.label);
  } else if (colors == TestDecoyColors::palette) {
    intensity = decoy_train_intensity(static_cast<int>(std::uniform_int_distribution<int>(0, 9)(rng)));
  } else {
    intensity = std::uniform_int_distribution<int>(0, 255)(rng);
  }
  LabeledImage out = image;
  paint_corners(out.pixels, static_cast<Real>(intensity) / Real(255));
  return out;
}

Dataset apply_decoy(const Dataset& data, DecoySplit split, std::uint64_t seed, TestDecoyColors colors) {
  std::mt19937_64 rng(seed);
  Dataset out;
  out.reserve(data.size());
  for (const LabeledImage& img : data) out.push_back(apply_decoy(img, split, rng, colors));
  return out;
}

BinaryMask corner_mask(std::size_t rows, std::size_t cols) {
  if (rows < 2 * kDecoyBlock || cols < 2 * kDecoyBlock) throw DimensionError("corner_mask: image too small");
  BinaryMask m(rows, cols);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) {
      const bool top_or_bottom = r < kDecoyBlock || r >= rows - kDecoyBlock;
      const bool left_or_right = c < kDecoyBlock || c >= cols - kDecoyBlock;
      if (top_or_bottom && left_or_right) m.set(r, c);
    }
  }
  return m;
}

FeedbackMask corner_feedback_oracle(std::int64_t sample_id, std::size_t rows, std::size_t cols) {
  return {sample_id, corner_mask(rows, cols)};
}

TrainValidation split_dataset(const Dataset& data, const SplitSpec& spec) {
  if (spec.train_fraction < 0 || spec.validation_fraction < 0 ||
      std::abs(spec.train_fraction + spec.validation_fraction - 1.0) > 1e-9) {
    throw ContractError("split_dataset: fractions must be non-negative and sum to 1");
  }
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(spec.seed);
  std::shuffle(order.begin(), order.end(), rng);
  const auto n_train = static_cast<std::size_t>(std::llround(spec.train_fraction * static_cast<double>(data.size())));
  TrainValidation out;
  out.train.reserve(n_train);
  out.validation.reserve(data.size() - n_train);
  for (std::size_t i = 0; i < order.size(); ++i) {
    (i < n_train ? out.train : out.validation).push_back(data[order[i]]);
  }
  return out;
}

Dataset subsample(const Dataset& data, std::size_t count, std::uint64_t seed) {
  if (count > data.size()) throw ContractError("subsample: more items requested than available");
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  order.resize(count);
  std::sort(order.begin(), order.end());
  Dataset out;
  out.reserve(count);
  for (std::size_t i : order) out.push_back(data[i]);
  return out;
}

Tensor stack_images(const Dataset& data, std::span<const std::size_t> indices) {
  if (indices.empty()) throw ContractError("stack_images: no indices");
  const Shape& s = data.at(indices[0]).pixels.shape();
  const std::size_t per = shape_size(s);
  Tensor out(Shape{indices.size(), s[0], s[1], s[2]});
  for (std::size_t b = 0; b < indices.size(); ++b) {
    const Tensor& px = data.at(indices[b]).pixels;
    if (px.shape() != s) throw DimensionError("stack_images: images differ in shape");
    std::copy(px.data(), px.data() + per, out.data() + b * per);
  }
  return out;
}

Batch make_batch(const Dataset& data, std::span<const std::size_t> indices,
                 const std::function<bool(std::int64_t)>& is_annotated) {
  Batch b;
  b.images = stack_images(data, indices);
  b.labels.reserve(indices.size());
  b.sample_ids.reserve(indices.size());
  bool any = false;
  std::vector<bool> flags;
  for (std::size_t i : indices) {
    b.labels.push_back(data[i].label);
    b.sample_ids.push_back(data[i].sample_id);
    const bool a = is_annotated && is_annotated(data[i].sample_id);
    flags.push_back(a);
    any = any || a;
  }
  if (any) b.annotated = std::move(flags);
  return b;
}

Experiment make_experiment(const Dataset& train_file, const Dataset& test_file, const ExperimentSizes& sizes,
                           std::uint64_t seed, bool decoy, TestDecoyColors colors) {
  if (sizes.train + sizes.validation > train_file.size()) {
    throw ContractError("make_experiment: training file too small for the requested sizes");
  }
  std::seed_seq seq{seed, std::uint64_t{0x5eed}};
  std::array<std::uint64_t, 4> streams{};
  seq.generate(streams.begin(), streams.end());

  const Dataset pool = subsample(train_file, sizes.train + sizes.validation, streams[0]);
  const double train_fraction = static_cast<double>(sizes.train) / static_cast<double>(pool.size());
  TrainValidation tv = split_dataset(pool, {train_fraction, 1.0 - train_fraction, streams[1]});
  Dataset test = subsample(test_file, sizes.test, streams[2]);
  // Test ids follow the training file's so every id in an experiment is unique.
  for (LabeledImage& img : test) img.sample_id += static_cast<std::int64_t>(train_file.size());

  Experiment e;
  if (decoy) {
    e.train = apply_decoy(tv.train, DecoySplit::train, 0);
    e.validation = apply_decoy(tv.validation, DecoySplit::train, 0);
    e.test = apply_decoy(test, DecoySplit::test, streams[3], colors);
  } else {
    e.train = std::move(tv.train);
    e.validation = std::move(tv.validation);
    e.test = std::move(test);
  }
  return e;
}

Experiment load_experiment(const std::filesystem::path& mnist_dir, const ExperimentSizes& sizes, std::uint64_t seed,
                           bool decoy, TestDecoyColors colors) {
  const Dataset train_file =
      load_idx(mnist_dir / "train-images.idx3-ubyte", mnist_dir / "train-labels.idx1-ubyte");
  const Dataset test_file = load_idx(mnist_dir / "t10k-images.idx3-ubyte", mnist_dir / "t10k-labels.idx1-ubyte");
  return make_experiment(train_file, test_file, sizes, seed, decoy, colors);
}

ATTUNE_NAMESPACE_END
