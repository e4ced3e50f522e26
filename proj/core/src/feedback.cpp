#include "attune/feedback.hpp"

#include <algorithm>
#include <cmath>

#include <nlohmann/json.hpp>

#include "attune/checkpoint.hpp"
#include "attune/errors.hpp"
#include "attune/ops.hpp"

ATTUNE_NAMESPACE_BEGIN

using nlohmann::json;

BinaryMask::BinaryMask(std::size_t rows, std::size_t cols, bool fill)
    : rows_(rows), cols_(cols), bits_(rows * cols, fill ? 1 : 0) {}

std::size_t BinaryMask::popcount() const noexcept {
  return static_cast<std::size_t>(std::count(bits_.begin(), bits_.end(), std::uint8_t{1}));
}

BinaryMask adaptive_max_pool(const BinaryMask& mask, std::size_t out_rows, std::size_t out_cols) {
  const std::size_t h = mask.rows();
  const std::size_t w = mask.cols();
  if (out_rows == 0 || out_cols == 0) throw DimensionError("adaptive_max_pool: empty output");
  if (out_rows > h || out_cols > w) {
    throw DimensionError("adaptive_max_pool: output " + std::to_string(out_rows) + "x" + std::to_string(out_cols) +
                         " larger than input " + std::to_string(h) + "x" + std::to_string(w));
  }
  BinaryMask out(out_rows, out_cols);
  for (std::size_t i = 0; i < out_rows; ++i) {
    const std::size_t r0 = i * h / out_rows;
    const std::size_t r1 = ((i + 1) * h + out_rows - 1) / out_rows;
    for (std::size_t j = 0; j < out_cols; ++j) {
      const std::size_t c0 = j * w / out_cols;
      const std::size_t c1 = ((j + 1) * w + out_cols - 1) / out_cols;
      bool any = false;
      for (std::size_t r = r0; r < r1 && !any; ++r) {
        for (std::size_t c = c0; c < c1; ++c) {
          if (mask(r, c)) {
            any = true;
            break;
          }
        }
      }
      out.set(i, j, any);
    }
  }
  return out;
}

namespace {

Tensor support_from_grad(const Tensor& grad, Real threshold) {
  Tensor out(grad.shape());
  for (std::size_t i = 0; i < grad.size(); ++i) out[i] = std::abs(grad[i]) > threshold ? Real(1) : Real(0);
  return out;
}

}  // namespace

Tensor support_mask(Graph& graph, const ForwardRecord& record, Real threshold) {
  if (!record.activation.valid() || !graph.requires_grad(record.activation)) {
    throw ContractError("support_mask: the record's activations do not carry gradients");
  }
  graph.backward(sum(record.logits));
  Tensor support = support_from_grad(graph.grad(record.activation), threshold);
  const Shape& s = support.shape();
  if (s.size() == 4 && s[0] == 1) return std::move(support).reshaped(Shape(s.begin() + 1, s.end()));
  return support;
}

Tensor support_mask(const BayesianNetwork& net, const Tensor& image, Real threshold) {
  Graph g;
  BoundParameters p = bind(g, net, false);
  Shape batched = image.shape();
  batched.insert(batched.begin(), 1);
  ForwardRecord r = forward(g, p, net, g.variable(image.reshaped(batched)), ForwardMode::mean, nullptr);
  return support_mask(g, r, threshold);
}

ActivationEvidence extract_evidence(const FeedbackMask& feedback, const Tensor& support, std::size_t epoch) {
  if (support.rank() != 3) throw DimensionError("extract_evidence: support must be [d,u,v]");
  const std::size_t d = support.dim(0);
  const std::size_t u = support.dim(1);
  const std::size_t v = support.dim(2);
  const BinaryMask pooled = adaptive_max_pool(feedback.mask, u, v);
  ActivationEvidence ev;
  ev.sample_id = feedback.sample_id;
  ev.computed_at_epoch = epoch;
  for (std::size_t c = 0; c < d; ++c) {
    for (std::size_t r = 0; r < u; ++r) {
      for (std::size_t s = 0; s < v; ++s) {
        if (pooled(r, s) && support[(c * u + r) * v + s] != 0) ev.positions.push_back({c, r, s});
      }
    }
  }
  return ev;
}

ActivationEvidence extract_evidence(const FeedbackMask& feedback, const BayesianNetwork& net, const Tensor& image,
                                    Real threshold, std::size_t epoch) {
  if (image.rank() != 3 || feedback.mask.rows() != image.dim(1) || feedback.mask.cols() != image.dim(2)) {
    throw ContractError("extract_evidence: mask shape does not match the sample's spatial extent");
  }
  return extract_evidence(feedback, support_mask(net, image, threshold), epoch);
}

std::vector<ActivationEvidence> extract_evidence_batch(std::span<const FeedbackMask> feedback,
                                                       const BayesianNetwork& net, const Tensor& images,
                                                       Real threshold, std::size_t epoch) {
  if (images.rank() != 4 || images.dim(0) != feedback.size()) {
    throw ContractError("extract_evidence_batch: need one image per feedback mask");
  }
  for (const FeedbackMask& f : feedback) {
    if (f.mask.rows() != images.dim(2) || f.mask.cols() != images.dim(3)) {
      throw ContractError("extract_evidence_batch: mask shape does not match the sample's spatial extent");
    }
  }
  Graph g;
  BoundParameters p = bind(g, net, false);
  ForwardRecord r = forward(g, p, net, g.variable(images), ForwardMode::mean, nullptr);
  g.backward(sum(r.logits));
  const Tensor grad = g.grad(r.activation);
  const Shape per_sample = net.architecture().explain_shape();
  const std::size_t stride = shape_size(per_sample);

  std::vector<ActivationEvidence> out;
  out.reserve(feedback.size());
  for (std::size_t n = 0; n < feedback.size(); ++n) {
    Tensor support(per_sample);
    for (std::size_t i = 0; i < stride; ++i) {
      support[i] = std::abs(grad[n * stride + i]) > threshold ? Real(1) : Real(0);
    }
    out.push_back(extract_evidence(feedback[n], support, epoch));
  }
  return out;
}

std::vector<std::uint64_t> encode_rle(const BinaryMask& mask) {
  std::vector<std::uint64_t> runs;
  bool current = false;
  std::uint64_t run = 0;
  for (std::size_t i = 0; i < mask.size(); ++i) {
    if (mask.bit(i) != current) {
      runs.push_back(run);
      current = !current;
      run = 0;
    }
    ++run;
  }
  runs.push_back(run);
  return runs;
}

BinaryMask decode_rle(std::span<const std::int64_t> runs, std::size_t rows, std::size_t cols) {
  BinaryMask mask(rows, cols);
  const std::size_t total = rows * cols;
  std::size_t pos = 0;
  bool value = false;
  for (std::int64_t run : runs) {
    if (run < 0) throw FormatError("mask_rle: negative run length");
    if (static_cast<std::uint64_t>(run) > total - pos) {
      throw FormatError("mask_rle: runs exceed " + std::to_string(total) + " cells");
    }
    for (std::int64_t k = 0; k < run; ++k) mask.set_bit(pos++, value);
    value = !value;
  }
  if (pos != total) {
    throw FormatError("mask_rle: runs cover " + std::to_string(pos) + " of " + std::to_string(total) + " cells");
  }
  return mask;
}

void FeedbackStore::put(std::int64_t sample_id, BinaryMask mask) { items_[sample_id] = std::move(mask); }

const BinaryMask* FeedbackStore::find(std::int64_t sample_id) const {
  auto it = items_.find(sample_id);
  return it == items_.end() ? nullptr : &it->second;
}

std::string FeedbackStore::to_json() const {
  json items = json::array();
  for (const auto& [id, mask] : items_) items.push_back({{"sample_id", id}, {"mask_rle", encode_rle(mask)}});
  return json{{"version", 1}, {"items", std::move(items)}}.dump();
}

FeedbackStore FeedbackStore::from_json(std::string_view text, std::size_t rows, std::size_t cols) {
  FeedbackStore store;
  try {
    const json doc = json::parse(text);
    if (doc.at("version").get<int>() != 1) throw FormatError("feedback store: unsupported version");
    for (const json& item : doc.at("items")) {
      const auto id = item.at("sample_id").get<std::int64_t>();
      const auto& rle = item.at("mask_rle");
      if (!rle.is_array()) throw FormatError("feedback store: mask_rle must be an array");
      std::vector<std::int64_t> runs;
      for (const json& r : rle) {
        if (!r.is_number_integer()) throw FormatError("feedback store: run lengths must be integers");
        runs.push_back(r.get<std::int64_t>());
      }
      store.put(id, decode_rle(runs, rows, cols));
    }
  } catch (const json::exception& e) {
    throw FormatError(std::string("feedback store: ") + e.what());
  }
  return store;
}

void FeedbackStore::save(const std::filesystem::path& path) const { write_file_atomic(path, to_json()); }

FeedbackStore FeedbackStore::load(const std::filesystem::path& path, std::size_t rows, std::size_t cols) {
  return from_json(read_file(path), rows, cols);
}

ATTUNE_NAMESPACE_END
