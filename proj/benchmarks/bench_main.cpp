#include <random>

#include <benchmark/benchmark.h>

#include "attune/explain.hpp"
#include "attune/feedback.hpp"
#include "attune/graph.hpp"
#include "attune/objective.hpp"
#include "attune/ops.hpp"

using namespace attune;

namespace {

Tensor random_images(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0, 1);
  Tensor t({n, 1, 28, 28});
  for (Real& v : t.values()) v = Real(u(rng));
  return t;
}

Batch random_batch(std::size_t n, bool annotate) {
  Batch b;
  b.images = random_images(n, 3);
  for (std::size_t i = 0; i < n; ++i) {
    b.labels.push_back(int(i % 10));
    b.sample_ids.push_back(std::int64_t(i));
    if (annotate) b.annotated.push_back(i % 4 == 0);
  }
  return b;
}

void BM_Conv2dValid(benchmark::State& state) {
  const std::size_t batch = std::size_t(state.range(0));
  Graph g;
  const Var x = g.constant(random_images(batch, 1));
  const Var k = g.constant(Tensor({6, 1, 5, 5}, Real(0.1)));
  const Var b = g.constant(Tensor({6}, Real(0)));
  for (auto _ : state) {
    benchmark::DoNotOptimize(conv2d_valid(x, k, b).value().data());
  }
  state.SetItemsProcessed(state.iterations() * std::int64_t(batch));
}
BENCHMARK(BM_Conv2dValid)->Arg(1)->Arg(32)->Arg(256);

void BM_MeanLogits(benchmark::State& state) {
  const BayesianNetwork net(ArchitectureDescriptor::lenet(), 1);
  const Tensor x = random_images(std::size_t(state.range(0)), 2);
  for (auto _ : state) benchmark::DoNotOptimize(mean_logits(net, x).data());
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_MeanLogits)->Arg(1)->Arg(256);

void BM_ElboStep(benchmark::State& state) {
  const BayesianNetwork net(ArchitectureDescriptor::lenet(), 1);
  const Batch b = random_batch(std::size_t(state.range(0)), false);
  NoiseSource noise(4);
  for (auto _ : state) benchmark::DoNotOptimize(elbo_loss(b, net, 1, 10000, noise).report.total);
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_ElboStep)->Arg(32)->Arg(256)->Unit(benchmark::kMillisecond);

void BM_AugmentedStep(benchmark::State& state) {
  const BayesianNetwork net(ArchitectureDescriptor::lenet(), 1);
  const Batch b = random_batch(std::size_t(state.range(0)), true);
  EvidenceMap evidence;
  for (std::size_t i = 0; i < b.size(); ++i) {
    if (!b.annotated[i]) continue;
    BinaryMask m(28, 28);
    for (std::size_t r = 0; r < 8; ++r)
      for (std::size_t c = 0; c < 8; ++c) m.set(r, c, true);
    Tensor image({1, 28, 28});
    std::copy_n(b.images.data() + i * 784, 784, image.data());
    evidence[b.sample_ids[i]] = extract_evidence(FeedbackMask{b.sample_ids[i], m}, net, image);
  }
  NoiseSource noise(4);
  for (auto _ : state) benchmark::DoNotOptimize(augmented_loss(b, evidence, net, 1, 10000, noise).report.total);
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_AugmentedStep)->Arg(256)->Unit(benchmark::kMillisecond);

void BM_AdaptiveMaxPool(benchmark::State& state) {
  std::mt19937_64 rng(5);
  BinaryMask m(28, 28);
  for (std::size_t i = 0; i < m.size(); ++i) m.set_bit(i, rng() % 5 == 0);
  for (auto _ : state) benchmark::DoNotOptimize(adaptive_max_pool(m, 8, 8));
}
BENCHMARK(BM_AdaptiveMaxPool);

void BM_Explain(benchmark::State& state) {
  const BayesianNetwork net(ArchitectureDescriptor::lenet(), 1);
  Tensor image = random_images(1, 6);
  image = image.reshaped({1, 28, 28});
  const auto method = AttributionMethod(state.range(0));
  state.SetLabel(to_string(method));
  for (auto _ : state) benchmark::DoNotOptimize(explain(method, net, image).values.data());
}
BENCHMARK(BM_Explain)->DenseRange(0, 2)->Unit(benchmark::kMicrosecond);

}  // namespace

BENCHMARK_MAIN();
