#pragma once

#include <compare>
#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "attune/network.hpp"

ATTUNE_NAMESPACE_BEGIN

/// Row-major {0,1} matrix.
class BinaryMask {
 public:
  BinaryMask() = default;
  BinaryMask(std::size_t rows, std::size_t cols, bool fill = false);

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return bits_.size(); }
  bool operator()(std::size_t r, std::size_t c) const { return bits_[r * cols_ + c] != 0; }
  void set(std::size_t r, std::size_t c, bool value = true) { bits_[r * cols_ + c] = value ? 1 : 0; }
  bool bit(std::size_t i) const { return bits_[i] != 0; }
  void set_bit(std::size_t i, bool value) { bits_[i] = value ? 1 : 0; }
  std::size_t popcount() const noexcept;

  friend bool operator==(const BinaryMask&, const BinaryMask&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<std::uint8_t> bits_;
};

/// Annotator feedback for one sample: 1 marks an irrelevant input feature.
struct FeedbackMask {
  std::int64_t sample_id = 0;
  BinaryMask mask;
};

struct ActivationPosition {
  std::size_t channel = 0;
  std::size_t row = 0;
  std::size_t col = 0;

  friend auto operator<=>(const ActivationPosition&, const ActivationPosition&) = default;
};

/// Explanation-layer pre-activations asserted to be zero for one sample.
struct ActivationEvidence {
  std::int64_t sample_id = 0;
  std::vector<ActivationPosition> positions;  // sorted (channel, row, col)
  std::size_t computed_at_epoch = 0;
};

/// out[i,j] = max of F over rows [floor(i*h/u), ceil((i+1)*h/u)) and
/// cols [floor(j*w/v), ceil((j+1)*w/v)).
BinaryMask adaptive_max_pool(const BinaryMask& mask, std::size_t out_rows, std::size_t out_cols);

/// Binary [d,u,v] tensor: 1 where |d(sum of logits)/dA| > threshold. Sweeps
/// the record's graph, which must come from a mean-mode forward of one sample
/// whose explanation-layer activations require gradients.
Tensor support_mask(Graph& graph, const ForwardRecord& record, Real threshold = 0);
/// Convenience: runs the mean-mode forward of image [C,H,W] itself.
Tensor support_mask(const BayesianNetwork& net, const Tensor& image, Real threshold = 0);

/// Positions with pooled-mask bit 1 and support bit 1.
ActivationEvidence extract_evidence(const FeedbackMask& feedback, const Tensor& support, std::size_t epoch = 0);
ActivationEvidence extract_evidence(const FeedbackMask& feedback, const BayesianNetwork& net, const Tensor& image,
                                    Real threshold = 0, std::size_t epoch = 0);

/// Batched form: one mean-mode pass over all images [N,C,H,W].
std::vector<ActivationEvidence> extract_evidence_batch(std::span<const FeedbackMask> feedback,
                                                       const BayesianNetwork& net, const Tensor& images,
                                                       Real threshold = 0, std::size_t epoch = 0);

/// Run lengths over the row-major bits, alternating zeros and ones and
/// starting with the count of zeros (possibly 0).
std::vector<std::uint64_t> encode_rle(const BinaryMask& mask);
/// Throws FormatError unless the runs are non-negative and sum to rows*cols.
BinaryMask decode_rle(std::span<const std::int64_t> runs, std::size_t rows, std::size_t cols);

/// Feedback masks keyed by sample id. Serialised as
/// {"version":1,"items":[{"sample_id":int,"mask_rle":[...]}]}; masks carry no
/// shape on the wire, so readers supply the sample dimensions.
class FeedbackStore {
 public:
  void put(std::int64_t sample_id, BinaryMask mask);
  /// Returns whether a mask was removed.
  bool erase(std::int64_t sample_id) { return items_.erase(sample_id) != 0; }
  const BinaryMask* find(std::int64_t sample_id) const;
  bool contains(std::int64_t sample_id) const { return items_.count(sample_id) != 0; }
  std::size_t size() const noexcept { return items_.size(); }
  bool empty() const noexcept { return items_.empty(); }
  const std::map<std::int64_t, BinaryMask>& items() const noexcept { return items_; }

  std::string to_json() const;
  static FeedbackStore from_json(std::string_view text, std::size_t rows, std::size_t cols);

  void save(const std::filesystem::path& path) const;
  static FeedbackStore load(const std::filesystem::path& path, std::size_t rows, std::size_t cols);

  friend bool operator==(const FeedbackStore&, const FeedbackStore&) = default;

 private:
  std::map<std::int64_t, BinaryMask> items_;
};

ATTUNE_NAMESPACE_END
