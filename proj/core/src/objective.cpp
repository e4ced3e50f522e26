#include "attune/objective.hpp"

#include <cmath>
#include <numbers>

#include "attune/errors.hpp"
#include "attune/ops.hpp"

ATTUNE_NAMESPACE_BEGIN

double gaussian_logpdf_at_zero(double gamma, double delta) {
  if (!(delta > 0)) throw NumericError("gaussian_logpdf_at_zero: delta must be positive");
  return -0.5 * std::log(2 * std::numbers::pi * delta) - gamma * gamma / (2 * delta);
}

namespace {

void check_batch(const Batch& batch, const BayesianNetwork& net, std::size_t m, std::size_t n) {
  if (batch.size() == 0) throw ContractError("loss: empty batch");
  if (m == 0) throw ContractError("loss: need at least one Monte Carlo sample");
  if (n < batch.size()) throw ContractError("loss: dataset size smaller than the batch");
  if (batch.images.rank() != 4 || batch.images.dim(0) != batch.size()) {
    throw DimensionError("loss: images must be [B,C,H,W] with one label per image");
  }
  if (!batch.sample_ids.empty() && batch.sample_ids.size() != batch.size()) {
    throw DimensionError("loss: sample ids do not match batch size");
  }
  if (!batch.annotated.empty() && batch.annotated.size() != batch.size()) {
    throw DimensionError("loss: annotation flags do not match batch size");
  }
  (void)net;
}

std::vector<std::size_t> clamp_positions(const Batch& batch, const EvidenceMap& evidence, const Shape& per_sample) {
  std::vector<std::size_t> positions;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const bool annotated = !batch.annotated.empty() && batch.annotated[i];
    const ActivationEvidence* ev = nullptr;
    if (!batch.sample_ids.empty()) {
      auto it = evidence.find(batch.sample_ids[i]);
      if (it != evidence.end()) ev = &it->second;
    }
    if (annotated && !ev) {
      throw ContractError("augmented_loss: annotated sample " + std::to_string(batch.sample_ids.at(i)) +
                          " has no activation evidence");
    }
    if (!ev) continue;
    for (const ActivationPosition& p : ev->positions) {
      if (p.channel >= per_sample[0] || p.row >= per_sample[1] || p.col >= per_sample[2]) {
        throw ContractError("augmented_loss: evidence position out of range");
      }
      positions.push_back(flat_index(per_sample, i, p.channel, p.row, p.col));
    }
  }
  return positions;
}

LossResult evaluate(const Batch& batch, const std::vector<std::size_t>& positions, const BayesianNetwork& net,
                    std::size_t m, std::size_t n, NoiseSource& noise, const ObjectiveOptions& options) {
  Graph g;
  BoundParameters params = bind(g, net, options.compute_gradients);
  Var x = g.constant(batch.images);
  const ForwardMode mode = positions.empty() ? ForwardMode::sampled : ForwardMode::clamped;

  Var nll_class;
  Var log_evidence;
  for (std::size_t t = 0; t < m; ++t) {
    ForwardRecord rec = forward(g, params, net, x, mode, &noise, positions);
    Var ce = softmax_cross_entropy(rec.logits, batch.labels);
    nll_class = nll_class.valid() ? add(nll_class, ce) : ce;
    if (!positions.empty()) {
      Var ev = sum(gaussian_logpdf_at_zero(rec.evidence_gamma, rec.evidence_delta, options.delta_floor));
      log_evidence = log_evidence.valid() ? add(log_evidence, ev) : ev;
    }
  }
  const Real inv_m = Real(1) / static_cast<Real>(m);
  nll_class = scale(nll_class, inv_m);

  Var kl;
  for (const VariationalVars& p : params.vars) {
    Var term = kl_to_prior(p, options.prior);
    kl = kl.valid() ? add(kl, term) : term;
  }
  Var total = add(scale(kl, static_cast<Real>(batch.size()) / static_cast<Real>(n)), nll_class);
  Var nll_evidence;
  if (log_evidence.valid()) {
    nll_evidence = scale(log_evidence, -inv_m);
    total = add(total, nll_evidence);
  }

  LossResult result;
  LossReport& r = result.report;
  r.total = total.value()[0];
  r.nll_class = nll_class.value()[0];
  r.nll_evidence = nll_evidence.valid() ? static_cast<double>(nll_evidence.value()[0]) : 0.0;
  r.kl = kl.value()[0];
  r.n = n;
  r.m = m;
  r.batch_size = batch.size();
  if (!std::isfinite(r.total)) throw NumericError("loss is not finite");

  if (options.compute_gradients) {
    g.backward(total);
    result.gradients.reserve(params.vars.size());
    for (const VariationalVars& p : params.vars) {
      result.gradients.emplace_back(g.grad(p.mu), g.grad(p.raw_sigma));
    }
  }
  return result;
}

}  // namespace

LossResult elbo_loss(const Batch& batch, const BayesianNetwork& net, std::size_t m, std::size_t n,
                     NoiseSource& noise, const ObjectiveOptions& options) {
  check_batch(batch, net, m, n);
  return evaluate(batch, {}, net, m, n, noise, options);
}

LossResult augmented_loss(const Batch& batch, const EvidenceMap& evidence, const BayesianNetwork& net, std::size_t m,
                          std::size_t n, NoiseSource& noise, const ObjectiveOptions& options) {
  check_batch(batch, net, m, n);
  const std::vector<std::size_t> positions = clamp_positions(batch, evidence, net.architecture().explain_shape());
  return evaluate(batch, positions, net, m, n, noise, options);
}

ATTUNE_NAMESPACE_END
