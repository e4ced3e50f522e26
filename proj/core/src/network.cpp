#include "attune/network.hpp"

#include <random>

#include "attune/errors.hpp"
#include "attune/ops.hpp"

ATTUNE_NAMESPACE_BEGIN

const char* to_string(LayerKind kind) {
  switch (kind) {
    case LayerKind::conv: return "conv";
    case LayerKind::max_pool: return "max_pool";
    case LayerKind::relu: return "relu";
    case LayerKind::flatten: return "flatten";
    case LayerKind::dense: return "dense";
  }
  return "?";
}

LayerKind layer_kind_from_string(const std::string& name) {
  for (LayerKind k : {LayerKind::conv, LayerKind::max_pool, LayerKind::relu, LayerKind::flatten, LayerKind::dense}) {
    if (name == to_string(k)) return k;
  }
  throw FormatError("unknown layer kind '" + name + "'");
}

LayerSpec LayerSpec::conv(std::size_t in, std::size_t out, std::size_t kernel) {
  LayerSpec s;
  s.kind = LayerKind::conv;
  s.in_channels = in;
  s.out_channels = out;
  s.kernel = kernel;
  return s;
}

LayerSpec LayerSpec::dense(std::size_t in, std::size_t out) {
  LayerSpec s;
  s.kind = LayerKind::dense;
  s.in_features = in;
  s.out_features = out;
  return s;
}

std::vector<Shape> ArchitectureDescriptor::output_shapes() const {
  if (input.size() != 3 || shape_size(input) == 0) throw DimensionError("architecture input must be {C,H,W}");
  if (layers.empty()) throw ContractError("architecture has no layers");
  std::vector<Shape> shapes;
  Shape cur = input;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const LayerSpec& l = layers[i];
    const std::string where = "layer " + std::to_string(i) + " (" + to_string(l.kind) + "): ";
    switch (l.kind) {
      case LayerKind::conv:
        if (cur.size() != 3) throw DimensionError(where + "expects a [C,H,W] input");
        if (cur[0] != l.in_channels) throw DimensionError(where + "input channels do not match");
        if (l.kernel == 0 || l.out_channels == 0) throw DimensionError(where + "empty kernel");
        if (l.kernel > cur[1] || l.kernel > cur[2]) throw DimensionError(where + "kernel larger than input");
        cur = Shape{l.out_channels, cur[1] - l.kernel + 1, cur[2] - l.kernel + 1};
        break;
      case LayerKind::max_pool:
        if (cur.size() != 3) throw DimensionError(where + "expects a [C,H,W] input");
        if (cur[1] % 2 || cur[2] % 2) throw DimensionError(where + "odd spatial extent");
        cur = Shape{cur[0], cur[1] / 2, cur[2] / 2};
        break;
      case LayerKind::relu:
        break;
      case LayerKind::flatten:
        cur = Shape{shape_size(cur)};
        break;
      case LayerKind::dense:
        if (cur.size() != 1 || cur[0] != l.in_features) throw DimensionError(where + "input features do not match");
        if (l.out_features == 0) throw DimensionError(where + "no outputs");
        cur = Shape{l.out_features};
        break;
    }
    shapes.push_back(cur);
  }
  if (cur.size() != 1) throw DimensionError("architecture must end in a vector of logits");
  return shapes;
}

void ArchitectureDescriptor::validate() const {
  output_shapes();
  if (explain_layer >= layers.size() || layers[explain_layer].kind != LayerKind::conv) {
    throw ContractError("the explanation layer must be a convolution");
  }
}

Shape ArchitectureDescriptor::explain_shape() const {
  validate();
  return output_shapes()[explain_layer];
}

std::size_t ArchitectureDescriptor::num_classes() const { return output_shapes().back()[0]; }

ArchitectureDescriptor ArchitectureDescriptor::lenet() {
  ArchitectureDescriptor a;
  a.input = Shape{1, 28, 28};
  a.layers = {LayerSpec::conv(1, 6, 5),    LayerSpec::relu(),          LayerSpec::max_pool(),
              LayerSpec::conv(6, 16, 5),   LayerSpec::relu(),          LayerSpec::max_pool(),
              LayerSpec::flatten(),        LayerSpec::dense(256, 120), LayerSpec::relu(),
              LayerSpec::dense(120, 84),   LayerSpec::relu(),          LayerSpec::dense(84, 10)};
  a.explain_layer = 3;
  return a;
}

BayesianNetwork::BayesianNetwork(ArchitectureDescriptor arch, std::uint64_t seed, Real init_sigma)
    : arch_(std::move(arch)) {
  arch_.validate();
  std::mt19937_64 rng(seed);
  weight_index_.assign(arch_.layers.size(), static_cast<std::size_t>(-1));
  for (std::size_t i = 0; i < arch_.layers.size(); ++i) {
    const LayerSpec& l = arch_.layers[i];
    if (l.kind == LayerKind::conv) {
      const std::size_t k2 = l.kernel * l.kernel;
      weight_index_[i] = params_.size();
      params_.push_back(init_variational(Shape{l.out_channels, l.in_channels, l.kernel, l.kernel},
                                         l.in_channels * k2, l.out_channels * k2, init_sigma, rng));
      params_.push_back(GaussianVariational(Tensor(Shape{l.out_channels}),
                                            Tensor(Shape{l.out_channels}, inverse_softplus(init_sigma))));
    } else if (l.kind == LayerKind::dense) {
      weight_index_[i] = params_.size();
      params_.push_back(init_variational(Shape{l.in_features, l.out_features}, l.in_features, l.out_features,
                                         init_sigma, rng));
      params_.push_back(GaussianVariational(Tensor(Shape{l.out_features}),
                                            Tensor(Shape{l.out_features}, inverse_softplus(init_sigma))));
    }
  }
}

BayesianNetwork::BayesianNetwork(ArchitectureDescriptor arch, std::vector<GaussianVariational> params)
    : arch_(std::move(arch)), params_(std::move(params)) {
  arch_.validate();
  weight_index_.assign(arch_.layers.size(), static_cast<std::size_t>(-1));
  std::size_t p = 0;
  for (std::size_t i = 0; i < arch_.layers.size(); ++i) {
    const LayerSpec& l = arch_.layers[i];
    if (!l.learnable()) continue;
    const Shape w = l.kind == LayerKind::conv ? Shape{l.out_channels, l.in_channels, l.kernel, l.kernel}
                                              : Shape{l.in_features, l.out_features};
    const Shape b = Shape{l.kind == LayerKind::conv ? l.out_channels : l.out_features};
    if (p + 2 > params_.size()) {
      throw DimensionError("too few parameter tensors for the architecture");
    }
    if (params_[p].shape() != w || params_[p + 1].shape() != b) {
      throw DimensionError("parameter shapes of layer " + std::to_string(i) + " do not match the architecture");
    }
    weight_index_[i] = p;
    p += 2;
  }
  if (p != params_.size()) throw DimensionError("more parameter tensors than the architecture uses");
}

std::vector<std::string> BayesianNetwork::parameter_names() const {
  std::vector<std::string> names;
  for (std::size_t i = 0; i < arch_.layers.size(); ++i) {
    if (!arch_.layers[i].learnable()) continue;
    names.push_back("layers." + std::to_string(i) + ".weight");
    names.push_back("layers." + std::to_string(i) + ".bias");
  }
  return names;
}

std::size_t BayesianNetwork::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += 2 * p.mu.size();
  return n;
}

std::size_t BayesianNetwork::weight_index(std::size_t layer) const {
  if (layer >= weight_index_.size() || weight_index_[layer] == static_cast<std::size_t>(-1)) {
    throw ContractError("layer " + std::to_string(layer) + " has no parameters");
  }
  return weight_index_[layer];
}

BoundParameters bind(Graph& graph, const BayesianNetwork& net, bool requires_grad) {
  BoundParameters b;
  b.vars.reserve(net.parameters().size());
  for (const auto& p : net.parameters()) b.vars.push_back(bind(graph, p, requires_grad));
  return b;
}

namespace {

Moments layer_moments(const LayerSpec& l, Var z, const VariationalVars& w, const VariationalVars& b, bool mean_only) {
  if (mean_only) {
    Var gamma = l.kind == LayerKind::conv ? conv2d_valid(z, w.mu, b.mu) : affine(z, w.mu, b.mu);
    return {gamma, Var{}};
  }
  return l.kind == LayerKind::conv ? lrt_conv_moments(z, w, b) : lrt_dense_moments(z, w, b);
}

Var sample_or_mean(const Moments& m, ForwardMode mode, NoiseSource* noise) {
  if (mode == ForwardMode::mean) return m.gamma;
  if (!noise) throw ContractError("sampled forward passes need a noise source");
  return lrt_sample(m, noise->normal(m.gamma.shape()));
}

}  // namespace

Var forward_range(Graph& graph, const BoundParameters& params, const BayesianNetwork& net, Var z,
                  std::size_t begin, std::size_t end, ForwardMode mode, NoiseSource* noise) {
  if (z.valid() && &z.graph() != &graph) throw ContractError("forward_range: input belongs to another graph");
  const auto& layers = net.architecture().layers;
  for (std::size_t i = begin; i < end; ++i) {
    const LayerSpec& l = layers[i];
    switch (l.kind) {
      case LayerKind::conv:
      case LayerKind::dense: {
        const std::size_t p = net.weight_index(i);
        Moments m = layer_moments(l, z, params.vars[p], params.vars[p + 1], mode == ForwardMode::mean);
        z = sample_or_mean(m, mode, noise);
        break;
      }
      case LayerKind::max_pool: z = max_pool2(z); break;
      case LayerKind::relu: z = relu(z); break;
      case LayerKind::flatten: z = flatten(z); break;
    }
  }
  return z;
}

ForwardRecord forward(Graph& graph, const BoundParameters& params, const BayesianNetwork& net, Var x,
                      ForwardMode mode, NoiseSource* noise, std::span<const std::size_t> clamp_positions) {
  const ArchitectureDescriptor& arch = net.architecture();
  const Shape& xs = x.shape();
  if (xs.size() != 4 || Shape(xs.begin() + 1, xs.end()) != arch.input) {
    throw DimensionError("forward: input " + shape_to_string(xs) + " does not match architecture input " +
                         shape_to_string(arch.input));
  }
  if (mode != ForwardMode::clamped && !clamp_positions.empty()) {
    throw ContractError("forward: clamp positions given outside clamped mode");
  }

  ForwardRecord rec;
  const std::size_t e = arch.explain_layer;
  Var z = forward_range(graph, params, net, x, 0, e, mode, noise);

  const std::size_t p = net.weight_index(e);
  rec.activation_moments =
      layer_moments(arch.layers[e], z, params.vars[p], params.vars[p + 1], mode == ForwardMode::mean);
  rec.activation = sample_or_mean(rec.activation_moments, mode, noise);

  Var a = rec.activation;
  if (mode == ForwardMode::clamped && !clamp_positions.empty()) {
    const std::size_t total = rec.activation.value().size();
    for (std::size_t pos : clamp_positions) {
      if (pos >= total) throw ContractError("forward: evidence position out of range");
    }
    rec.evidence_gamma = gather(rec.activation_moments.gamma, clamp_positions);
    rec.evidence_delta = gather(rec.activation_moments.delta, clamp_positions);
    a = clamp_zero(a, clamp_positions);
  }
  rec.logits = forward_range(graph, params, net, a, e + 1, arch.layers.size(), mode, noise);
  return rec;
}

Tensor mean_logits(const BayesianNetwork& net, const Tensor& images) {
  Graph g;
  BoundParameters p = bind(g, net, false);
  ForwardRecord r = forward(g, p, net, g.constant(images), ForwardMode::mean, nullptr);
  return r.logits.value();
}

Tensor predict(const BayesianNetwork& net, const Tensor& images, std::size_t m, NoiseSource& noise) {
  if (m == 0) throw ContractError("predict: need at least one Monte Carlo sample");
  Tensor acc;
  for (std::size_t t = 0; t < m; ++t) {
    Graph g;
    BoundParameters p = bind(g, net, false);
    ForwardRecord r = forward(g, p, net, g.constant(images), ForwardMode::sampled, &noise);
    Tensor probs = softmax_rows(r.logits.value());
    if (acc.empty()) {
      acc = std::move(probs);
    } else {
      for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += probs[i];
    }
  }
  for (Real& v : acc.values()) v /= static_cast<Real>(m);
  return acc;
}

ATTUNE_NAMESPACE_END
