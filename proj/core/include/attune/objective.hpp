#pragma once

#include <cstdint>
#include <map>
#include <vector>

#include "attune/bayes.hpp"
#include "attune/feedback.hpp"
#include "attune/network.hpp"

ATTUNE_NAMESPACE_BEGIN

/// Terms of one minibatch loss.
///   total = kl * batch_size / n + nll_class + nll_evidence
struct LossReport {
  double total = 0;
  double nll_class = 0;     // -(1/m) sum_t sum_i log P(y_i | ...)
  double nll_evidence = 0;  // -(1/m) sum_t sum_{j in a_F} log N(0 | gamma_j, delta_j)
  double kl = 0;            // KL(q || prior) over all parameters
  std::size_t n = 0;        // training-set size
  std::size_t m = 0;        // Monte Carlo samples
  std::size_t batch_size = 0;

  friend bool operator==(const LossReport&, const LossReport&) = default;
};

struct Batch {
  Tensor images;                       // [B,C,H,W]
  std::vector<int> labels;             // B
  std::vector<std::int64_t> sample_ids;  // B
  std::vector<bool> annotated;         // B, or empty when no sample is annotated

  std::size_t size() const noexcept { return labels.size(); }
};

using EvidenceMap = std::map<std::int64_t, ActivationEvidence>;

/// Per-parameter gradients, laid out like BayesianNetwork::parameters():
/// `mu` holds d/d(mu), `raw_sigma` holds d/d(raw_sigma).
using ParameterGradients = std::vector<GaussianVariational>;

struct LossResult {
  LossReport report;
  ParameterGradients gradients;  // empty unless requested
};

struct ObjectiveOptions {
  PriorSpec prior;
  Real delta_floor = Real(1e-8);
  bool compute_gradients = true;
};

/// log N(0 | gamma, delta) = -ln(2 pi delta)/2 - gamma^2 / (2 delta).
/// Throws NumericError for delta <= 0.
double gaussian_logpdf_at_zero(double gamma, double delta);

/// Minibatch Monte Carlo estimate of the negative ELBO.
LossResult elbo_loss(const Batch& batch, const BayesianNetwork& net, std::size_t m, std::size_t n,
                     NoiseSource& noise, const ObjectiveOptions& options = {});

/// Negative ELBO with activation evidence: annotated samples run in clamped
/// mode, so their class likelihood is conditioned on a_F = 0, and the
/// Gaussian likelihood of a_F = 0 is added. With no evidence this is
/// elbo_loss. Throws ContractError if an annotated sample has no entry in
/// `evidence`.
LossResult augmented_loss(const Batch& batch, const EvidenceMap& evidence, const BayesianNetwork& net, std::size_t m,
                          std::size_t n, NoiseSource& noise, const ObjectiveOptions& options = {});

ATTUNE_NAMESPACE_END
