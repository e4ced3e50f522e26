#pragma once

#include <span>
#include <string>

#include "attune/feedback.hpp"
#include "attune/network.hpp"

ATTUNE_NAMESPACE_BEGIN

enum class AttributionMethod { saliency, gradcam, occlusion };

const char* to_string(AttributionMethod method);
/// Throws ContractError for unknown names.
AttributionMethod attribution_method_from_string(const std::string& name);

enum class AttributionTarget { logit_sum, predicted_class };

/// Per-pixel importance scores. `values` is [v,H,W] with H,W the input's
/// spatial extent; v depends on the method.
struct AttributionMap {
  AttributionMethod method = AttributionMethod::saliency;
  AttributionTarget target = AttributionTarget::logit_sum;
  Tensor values;
};

/// |d(sum of logits)/dx| under the mean-mode forward; one channel per input
/// channel.
AttributionMap saliency(const BayesianNetwork& net, const Tensor& image);

/// Grad-CAM on the explanation layer for the predicted class: channel weights
/// are spatial means of the gradient, the map is ReLU(sum_c w_c A_c),
/// bilinearly resized to the input and divided by its maximum when positive.
AttributionMap gradcam(const BayesianNetwork& net, const Tensor& image);

struct OcclusionOptions {
  std::size_t window = 3;
  std::size_t stride = 1;
  Real baseline = 0;
  std::size_t chunk = 256;  // occluded copies evaluated per forward pass
};

/// For each window position, P(pred | x) - P(pred | x with the window set to
/// the baseline); each pixel receives the mean over windows covering it.
AttributionMap occlusion(const BayesianNetwork& net, const Tensor& image, const OcclusionOptions& options = {});

AttributionMap explain(AttributionMethod method, const BayesianNetwork& net, const Tensor& image,
                       const OcclusionOptions& occlusion_options = {});

/// Bilinear resize of a [u,v] map to [rows,cols] with half-pixel centres
/// (corner pixels are not aligned).
Tensor bilinear_resize(const Tensor& map, std::size_t rows, std::size_t cols);

/// [H,W] map in [0,1]: channel-summed absolute attribution over its maximum.
Tensor display_map(const AttributionMap& map);

struct OverlapPair {
  BinaryMask mask;
  AttributionMap attribution;
};

struct OverlapResult {
  double value = 0;      // mean over used samples
  std::size_t used = 0;
  std::size_t skipped = 0;  // zero-mass attributions
};

/// Mean over samples of ||vec(F (x) T)||_1 / ||vec(T)||_1, with F broadcast
/// over T's channels. Samples whose attribution has zero mass are skipped
/// with a warning; throws ContractError if none remain.
OverlapResult attribution_overlap(std::span<const OverlapPair> pairs);

ATTUNE_NAMESPACE_END
