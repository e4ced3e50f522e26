#include "attune/bayes.hpp"

#include <cmath>

#include "attune/errors.hpp"
#include "attune/ops.hpp"

ATTUNE_NAMESPACE_BEGIN

GaussianVariational::GaussianVariational(Tensor mean, Tensor raw) : mu(std::move(mean)), raw_sigma(std::move(raw)) {
  if (mu.shape() != raw_sigma.shape()) {
    throw DimensionError("variational mu " + shape_to_string(mu.shape()) + " and raw_sigma " +
                         shape_to_string(raw_sigma.shape()) + " differ in shape");
  }
}

GaussianVariational GaussianVariational::from_sigma(Tensor mean, const Tensor& sigma) {
  Tensor raw(sigma.shape());
  for (std::size_t i = 0; i < sigma.size(); ++i) {
    if (!(sigma[i] > 0)) throw ContractError("from_sigma: sigma must be positive");
    raw[i] = inverse_softplus(sigma[i]);
  }
  return GaussianVariational(std::move(mean), std::move(raw));
}

Tensor GaussianVariational::sigma() const {
  Tensor out(raw_sigma.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = softplus(raw_sigma[i]);
  return out;
}

Tensor GaussianVariational::variance() const {
  Tensor out = sigma();
  for (Real& v : out.values()) v *= v;
  return out;
}

Real inverse_softplus(Real y) {
  if (!(y > 0)) throw ContractError("inverse_softplus: argument must be positive");
  // ln(exp(y) - 1) = y + ln(1 - exp(-y))
  return y + std::log(-std::expm1(-y));
}

GaussianVariational init_variational(const Shape& shape, std::size_t fan_in, std::size_t fan_out, Real init_sigma,
                                     std::mt19937_64& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::uniform_real_distribution<double> uni(-bound, bound);
  Tensor mu(shape);
  for (Real& v : mu.values()) v = static_cast<Real>(uni(rng));
  Tensor raw(shape, inverse_softplus(init_sigma));
  return GaussianVariational(std::move(mu), std::move(raw));
}

VariationalVars bind(Graph& graph, const GaussianVariational& params, bool requires_grad) {
  return {graph.leaf(params.mu, requires_grad), graph.leaf(params.raw_sigma, requires_grad)};
}

namespace {

Var variance_of(const VariationalVars& p) { return square(softplus(p.raw_sigma)); }

}  // namespace

Moments lrt_dense_moments(Var z, const VariationalVars& weight, const VariationalVars& bias) {
  Var gamma = affine(z, weight.mu, bias.mu);
  Var delta = affine(square(z), variance_of(weight), variance_of(bias));
  return {gamma, delta};
}

Moments lrt_conv_moments(Var z, const VariationalVars& kernels, const VariationalVars& bias) {
  Var gamma = conv2d_valid(z, kernels.mu, bias.mu);
  Var delta = conv2d_valid(square(z), variance_of(kernels), variance_of(bias));
  return {gamma, delta};
}

Var lrt_sample(const Moments& moments, const Tensor& eps) { return lrt_sample(moments.gamma, moments.delta, eps); }

Var kl_to_prior(const VariationalVars& params, const PriorSpec& prior) {
  return kl_to_prior(params.mu, params.raw_sigma, prior.std);
}

double kl_to_prior(const GaussianVariational& params, const PriorSpec& prior) {
  if (!(prior.std > 0)) throw ContractError("kl_to_prior: prior std must be positive");
  const double s = prior.std;
  double total = 0;
  for (std::size_t i = 0; i < params.mu.size(); ++i) {
    const double sigma = softplus(params.raw_sigma[i]);
    const double m = params.mu[i];
    total += std::log(s / sigma) + (sigma * sigma + m * m) / (2 * s * s) - 0.5;
  }
  return total;
}

Tensor NoiseSource::normal(const Shape& shape) {
  Tensor out(shape);
  for (Real& v : out.values()) v = static_cast<Real>(dist_(rng_));
  return out;
}

ATTUNE_NAMESPACE_END
