#pragma once

#include <cstdint>
#include <random>

#include <boost/random/normal_distribution.hpp>

#include "attune/graph.hpp"
#include "attune/tensor.hpp"

ATTUNE_NAMESPACE_BEGIN

/// Zero-mean isotropic Gaussian prior over every weight.
struct PriorSpec {
  Real std = Real(0.1);
};

/// Fully factorised Gaussian q(w) = N(mu, sigma^2) with
/// sigma = ln(1 + exp(raw_sigma)), so sigma > 0 for any finite raw_sigma.
struct GaussianVariational {
  Tensor mu;
  Tensor raw_sigma;

  GaussianVariational() = default;
  GaussianVariational(Tensor mean, Tensor raw);

  /// Builds the parameters from an explicit (positive) standard deviation.
  static GaussianVariational from_sigma(Tensor mean, const Tensor& sigma);

  const Shape& shape() const noexcept { return mu.shape(); }
  Tensor sigma() const;
  Tensor variance() const;
};

/// Inverse of softplus for y > 0.
Real inverse_softplus(Real y);

/// Glorot-uniform means in [-b, b], b = sqrt(6 / (fan_in + fan_out)), and a
/// constant initial sigma.
GaussianVariational init_variational(const Shape& shape, std::size_t fan_in, std::size_t fan_out, Real init_sigma,
                                     std::mt19937_64& rng);

/// A GaussianVariational placed on a graph.
struct VariationalVars {
  Var mu;
  Var raw_sigma;
};

VariationalVars bind(Graph& graph, const GaussianVariational& params, bool requires_grad);

/// Mean (gamma) and variance (delta) of the Gaussian pre-activations induced
/// by a Gaussian layer on a fixed input.
struct Moments {
  Var gamma;
  Var delta;
};

/// z [t,m], weight [m,r], bias [r]:
///   gamma = z mu_W + mu_B,   delta = z^2 sigma_W^2 + sigma_B^2.
Moments lrt_dense_moments(Var z, const VariationalVars& weight, const VariationalVars& bias);

/// z [C,H,W] or [N,C,H,W], kernels [O,C,kh,kw], bias [O]:
///   gamma = z * M + mu_B,   delta = z^2 * V^2 + sigma_B^2   (* = valid conv).
Moments lrt_conv_moments(Var z, const VariationalVars& kernels, const VariationalVars& bias);

/// gamma + sqrt(delta) * eps.
Var lrt_sample(const Moments& moments, const Tensor& eps);

Var kl_to_prior(const VariationalVars& params, const PriorSpec& prior);
/// sum_i ln(s / sigma_i) + (sigma_i^2 + mu_i^2) / (2 s^2) - 1/2, in double.
double kl_to_prior(const GaussianVariational& params, const PriorSpec& prior);

/// Deterministic stream of standard normal draws. Draws are produced in
/// double precision and rounded, so the float and double builds consume
/// identical streams. Subclasses may script the draws.
class NoiseSource {
 public:
  explicit NoiseSource(std::uint64_t seed) : rng_(seed) {}
  virtual ~NoiseSource() = default;

  virtual Tensor normal(const Shape& shape);
  double next() { return dist_(rng_); }

 private:
  std::mt19937_64 rng_;
  boost::random::normal_distribution<double> dist_{0.0, 1.0};
};

ATTUNE_NAMESPACE_END
