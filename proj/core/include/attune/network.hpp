#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "attune/bayes.hpp"
#include "attune/graph.hpp"

ATTUNE_NAMESPACE_BEGIN

enum class LayerKind { conv, max_pool, relu, flatten, dense };

const char* to_string(LayerKind kind);
LayerKind layer_kind_from_string(const std::string& name);

struct LayerSpec {
  LayerKind kind = LayerKind::relu;
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
  std::size_t kernel = 0;
  std::size_t in_features = 0;
  std::size_t out_features = 0;

  static LayerSpec conv(std::size_t in, std::size_t out, std::size_t kernel);
  static LayerSpec max_pool() { return {LayerKind::max_pool}; }
  static LayerSpec relu() { return {LayerKind::relu}; }
  static LayerSpec flatten() { return {LayerKind::flatten}; }
  static LayerSpec dense(std::size_t in, std::size_t out);

  bool learnable() const noexcept { return kind == LayerKind::conv || kind == LayerKind::dense; }
  friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
};

/// Ordered layer list plus the index of the convolution whose
/// pre-activations are used for explanations and feedback.
struct ArchitectureDescriptor {
  Shape input;  // {C, H, W}
  std::vector<LayerSpec> layers;
  std::size_t explain_layer = 0;

  /// Throws DimensionError/ContractError if the chain does not conform.
  void validate() const;
  /// Per-sample output shape after each layer.
  std::vector<Shape> output_shapes() const;
  /// Per-sample shape [d,u,v] of the explanation layer's pre-activations.
  Shape explain_shape() const;
  std::size_t num_classes() const;

  /// conv(1->6,5)-relu-pool-conv(6->16,5)-relu-pool-flatten-dense(256,120)-
  /// relu-dense(120,84)-relu-dense(84,10) on 1x28x28; explains the second conv.
  static ArchitectureDescriptor lenet();

  friend bool operator==(const ArchitectureDescriptor&, const ArchitectureDescriptor&) = default;
};

/// Variational parameters of every learnable layer, in layer order, weight
/// before bias. Conv weights are [O,C,k,k] with bias [O]; dense weights are
/// [in,out] with bias [out].
class BayesianNetwork {
 public:
  BayesianNetwork(ArchitectureDescriptor arch, std::uint64_t seed, Real init_sigma = Real(0.05));
  BayesianNetwork(ArchitectureDescriptor arch, std::vector<GaussianVariational> params);

  const ArchitectureDescriptor& architecture() const noexcept { return arch_; }
  std::vector<GaussianVariational>& parameters() noexcept { return params_; }
  const std::vector<GaussianVariational>& parameters() const noexcept { return params_; }
  std::vector<std::string> parameter_names() const;
  std::size_t parameter_count() const;

  /// Index into parameters() of the weight of layer `layer`.
  std::size_t weight_index(std::size_t layer) const;

 private:
  ArchitectureDescriptor arch_;
  std::vector<GaussianVariational> params_;
  std::vector<std::size_t> weight_index_;
};

enum class ForwardMode { sampled, mean, clamped };

/// Network parameters placed on a graph.
struct BoundParameters {
  std::vector<VariationalVars> vars;
};

BoundParameters bind(Graph& graph, const BayesianNetwork& net, bool requires_grad);

struct ForwardRecord {
  Var logits;                      // [N,K]
  Var activation;                  // explanation-layer pre-activations [N,d,u,v]
  Moments activation_moments;      // their (gamma, delta); delta unset in mean mode
  Var evidence_gamma;              // gamma at clamped positions (clamped mode)
  Var evidence_delta;              // delta at clamped positions (clamped mode)
};

/// Runs the network on a batch x [N,C,H,W].
///
/// sampled: every learnable layer draws its pre-activations with lrt_sample.
/// mean: eps = 0 everywhere, so the pass is deterministic and no noise is drawn.
/// clamped: as sampled, but the listed flat positions of the explanation
/// layer's pre-activations are replaced by 0 before the next layer.
ForwardRecord forward(Graph& graph, const BoundParameters& params, const BayesianNetwork& net, Var x,
                      ForwardMode mode, NoiseSource* noise, std::span<const std::size_t> clamp_positions = {});

/// Runs layers [begin, end) on z. Learnable layers sample unless mode is mean.
Var forward_range(Graph& graph, const BoundParameters& params, const BayesianNetwork& net, Var z,
                  std::size_t begin, std::size_t end, ForwardMode mode, NoiseSource* noise);

/// Mean-mode logits for a batch, without keeping a graph.
Tensor mean_logits(const BayesianNetwork& net, const Tensor& images);

/// Posterior predictive estimate: the average of m sampled-mode softmax
/// outputs. images [N,C,H,W] -> [N,K].
Tensor predict(const BayesianNetwork& net, const Tensor& images, std::size_t m, NoiseSource& noise);

/// Flat index of (sample, channel, row, col) within a batched [N,d,u,v] tensor.
inline std::size_t flat_index(const Shape& per_sample, std::size_t sample, std::size_t c, std::size_t r,
                              std::size_t s) {
  return ((sample * per_sample[0] + c) * per_sample[1] + r) * per_sample[2] + s;
}

ATTUNE_NAMESPACE_END
