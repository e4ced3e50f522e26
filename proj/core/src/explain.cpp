#include "attune/explain.hpp"

#include <algorithm>
#include <cmath>

#include "attune/errors.hpp"
#include "attune/log.hpp"
#include "attune/ops.hpp"

ATTUNE_NAMESPACE_BEGIN

const char* to_string(AttributionMethod method) {
  switch (method) {
    case AttributionMethod::saliency: return "saliency";
    case AttributionMethod::gradcam: return "gradcam";
    case AttributionMethod::occlusion: return "occlusion";
  }
  return "?";
}

AttributionMethod attribution_method_from_string(const std::string& name) {
  for (auto m : {AttributionMethod::saliency, AttributionMethod::gradcam, AttributionMethod::occlusion}) {
    if (name == to_string(m)) return m;
  }
  throw ContractError("unknown attribution method '" + name + "'");
}

namespace {

Tensor as_batch(const Tensor& image) {
  if (image.rank() != 3) throw DimensionError("explanations take a single [C,H,W] image");
  Shape s = image.shape();
  s.insert(s.begin(), 1);
  return image.reshaped(s);
}

std::size_t argmax_row(const Tensor& logits, std::size_t row) {
  const std::size_t k = logits.dim(1);
  const Real* z = logits.data() + row * k;
  return static_cast<std::size_t>(std::max_element(z, z + k) - z);
}

}  // namespace

AttributionMap saliency(const BayesianNetwork& net, const Tensor& image) {
  Graph g;
  BoundParameters p = bind(g, net, false);
  Var x = g.variable(as_batch(image));
  ForwardRecord r = forward(g, p, net, x, ForwardMode::mean, nullptr);
  g.backward(sum(r.logits));
  Tensor grad = g.grad(x).reshaped(image.shape());
  for (Real& v : grad.values()) v = std::abs(v);
  return {AttributionMethod::saliency, AttributionTarget::logit_sum, std::move(grad)};
}

AttributionMap gradcam(const BayesianNetwork& net, const Tensor& image) {
  Graph g;
  BoundParameters p = bind(g, net, false);
  Var x = g.variable(as_batch(image));
  ForwardRecord r = forward(g, p, net, x, ForwardMode::mean, nullptr);
  const std::size_t cls = argmax_row(r.logits.value(), 0);
  const std::size_t target[1] = {cls};
  g.backward(gather(r.logits, target));

  const Tensor& a = r.activation.value();
  const Tensor grad = g.grad(r.activation);
  const std::size_t d = a.dim(1);
  const std::size_t u = a.dim(2);
  const std::size_t v = a.dim(3);
  const std::size_t plane = u * v;

  Tensor heat(Shape{u, v});
  for (std::size_t c = 0; c < d; ++c) {
    double alpha = 0;
    for (std::size_t i = 0; i < plane; ++i) alpha += grad[c * plane + i];
    alpha /= static_cast<double>(plane);
    for (std::size_t i = 0; i < plane; ++i) heat[i] += static_cast<Real>(alpha) * a[c * plane + i];
  }
  for (Real& h : heat.values()) h = std::max(h, Real(0));

  Tensor up = bilinear_resize(heat, image.dim(1), image.dim(2));
  const Real mx = *std::max_element(up.values().begin(), up.values().end());
  if (mx > 0) {
    for (Real& h : up.values()) h /= mx;
  }
  return {AttributionMethod::gradcam, AttributionTarget::predicted_class,
          std::move(up).reshaped(Shape{1, image.dim(1), image.dim(2)})};
}

AttributionMap occlusion(const BayesianNetwork& net, const Tensor& image, const OcclusionOptions& options) {
  if (image.rank() != 3) throw DimensionError("occlusion takes a single [C,H,W] image");
  const std::size_t ch = image.dim(0);
  const std::size_t h = image.dim(1);
  const std::size_t w = image.dim(2);
  const std::size_t k = options.window;
  if (k == 0 || k > h || k > w) throw DimensionError("occlusion: window larger than the image");
  if (options.stride == 0) throw ContractError("occlusion: stride must be positive");

  const Tensor base_probs = softmax_rows(mean_logits(net, as_batch(image)));
  const std::size_t cls = argmax_row(base_probs, 0);
  const Real p0 = base_probs[cls];

  std::vector<std::pair<std::size_t, std::size_t>> windows;
  for (std::size_t i = 0; i + k <= h; i += options.stride) {
    for (std::size_t j = 0; j + k <= w; j += options.stride) windows.emplace_back(i, j);
  }

  Tensor total(Shape{h, w});
  Tensor count(Shape{h, w});
  const std::size_t per_image = image.size();
  const std::size_t chunk = std::max<std::size_t>(1, options.chunk);
  for (std::size_t start = 0; start < windows.size(); start += chunk) {
    const std::size_t nb = std::min(chunk, windows.size() - start);
    Tensor batch(Shape{nb, ch, h, w});
    for (std::size_t b = 0; b < nb; ++b) {
      Real* dst = batch.data() + b * per_image;
      std::copy(image.data(), image.data() + per_image, dst);
      const auto [i0, j0] = windows[start + b];
      for (std::size_t c = 0; c < ch; ++c) {
        for (std::size_t i = i0; i < i0 + k; ++i) {
          for (std::size_t j = j0; j < j0 + k; ++j) dst[(c * h + i) * w + j] = options.baseline;
        }
      }
    }
    const Tensor probs = softmax_rows(mean_logits(net, batch));
    const std::size_t classes = probs.dim(1);
    for (std::size_t b = 0; b < nb; ++b) {
      const Real diff = p0 - probs[b * classes + cls];
      const auto [i0, j0] = windows[start + b];
      for (std::size_t i = i0; i < i0 + k; ++i) {
        for (std::size_t j = j0; j < j0 + k; ++j) {
          total[i * w + j] += diff;
          count[i * w + j] += 1;
        }
      }
    }
  }
  for (std::size_t i = 0; i < total.size(); ++i) {
    if (count[i] > 0) total[i] /= count[i];
  }
  return {AttributionMethod::occlusion, AttributionTarget::predicted_class, std::move(total).reshaped(Shape{1, h, w})};
}

AttributionMap explain(AttributionMethod method, const BayesianNetwork& net, const Tensor& image,
                       const OcclusionOptions& occlusion_options) {
  switch (method) {
    case AttributionMethod::saliency: return saliency(net, image);
    case AttributionMethod::gradcam: return gradcam(net, image);
    case AttributionMethod::occlusion: return occlusion(net, image, occlusion_options);
  }
  throw ContractError("unknown attribution method");
}

Tensor bilinear_resize(const Tensor& map, std::size_t rows, std::size_t cols) {
  if (map.rank() != 2) throw DimensionError("bilinear_resize: expected a [u,v] map");
  const std::size_t u = map.dim(0);
  const std::size_t v = map.dim(1);
  Tensor out(Shape{rows, cols});
  const double sy = static_cast<double>(u) / static_cast<double>(rows);
  const double sx = static_cast<double>(v) / static_cast<double>(cols);
  for (std::size_t i = 0; i < rows; ++i) {
    const double fy = std::clamp((static_cast<double>(i) + 0.5) * sy - 0.5, 0.0, static_cast<double>(u - 1));
    const std::size_t y0 = static_cast<std::size_t>(fy);
    const std::size_t y1 = std::min(y0 + 1, u - 1);
    const double wy = fy - static_cast<double>(y0);
    for (std::size_t j = 0; j < cols; ++j) {
      const double fx = std::clamp((static_cast<double>(j) + 0.5) * sx - 0.5, 0.0, static_cast<double>(v - 1));
      const std::size_t x0 = static_cast<std::size_t>(fx);
      const std::size_t x1 = std::min(x0 + 1, v - 1);
      const double wx = fx - static_cast<double>(x0);
      const double top = (1 - wx) * map[y0 * v + x0] + wx * map[y0 * v + x1];
      const double bot = (1 - wx) * map[y1 * v + x0] + wx * map[y1 * v + x1];
      out[i * cols + j] = static_cast<Real>((1 - wy) * top + wy * bot);
    }
  }
  return out;
}

Tensor display_map(const AttributionMap& map) {
  const Tensor& t = map.values;
  if (t.rank() != 3) throw DimensionError("display_map: attribution must be [v,H,W]");
  const std::size_t h = t.dim(1);
  const std::size_t w = t.dim(2);
  Tensor out(Shape{h, w});
  for (std::size_t c = 0; c < t.dim(0); ++c) {
    for (std::size_t i = 0; i < h * w; ++i) out[i] += std::abs(t[c * h * w + i]);
  }
  const Real mx = *std::max_element(out.values().begin(), out.values().end());
  if (mx > 0) {
    for (Real& v : out.values()) v /= mx;
  }
  return out;
}

OverlapResult attribution_overlap(std::span<const OverlapPair> pairs) {
  if (pairs.empty()) throw ContractError("attribution_overlap: no samples");
  OverlapResult result;
  double acc = 0;
  for (const OverlapPair& p : pairs) {
    const Tensor& t = p.attribution.values;
    if (t.rank() != 3 || t.dim(1) != p.mask.rows() || t.dim(2) != p.mask.cols()) {
      throw DimensionError("attribution_overlap: mask and attribution extents differ");
    }
    const std::size_t plane = p.mask.size();
    double inside = 0;
    double total = 0;
    for (std::size_t c = 0; c < t.dim(0); ++c) {
      for (std::size_t i = 0; i < plane; ++i) {
        const double a = std::abs(static_cast<double>(t[c * plane + i]));
        total += a;
        if (p.mask.bit(i)) inside += a;
      }
    }
    if (total == 0) {
      ++result.skipped;
      log_warning("attribution_overlap: skipping a sample with zero attribution mass");
      continue;
    }
    acc += inside / total;
    ++result.used;
  }
  if (result.used == 0) throw ContractError("attribution_overlap: every attribution has zero mass");
  result.value = acc / static_cast<double>(result.used);
  return result;
}

ATTUNE_NAMESPACE_END
