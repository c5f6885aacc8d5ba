#include <benchmark/benchmark.h>

#include "quanos/adversary.hpp"
#include "quanos/hardware.hpp"
#include "quanos/network.hpp"
#include "quanos/ops.hpp"
#include "quanos/quantizer.hpp"
#include "quanos/rng.hpp"

using namespace quanos;

namespace {

Tensor<float> random_tensor(const Shape& shape, std::uint64_t seed, bool requires_grad = false) {
  rng::Engine eng(seed);
  std::vector<float> v(numel(shape));
  for (auto& x : v) x = static_cast<float>(rng::uniform(eng, -1, 1));
  return Tensor<float>(shape, std::move(v), requires_grad);
}

void BM_Conv2dForward(benchmark::State& state) {
  const auto c = static_cast<std::size_t>(state.range(0));
  const auto x = random_tensor({32, c, 28, 28}, 1);
  const auto w = random_tensor({c, c, 3, 3}, 2);
  const auto b = random_tensor({c}, 3);
  NoGradGuard guard;
  for (auto _ : state) benchmark::DoNotOptimize(ops::conv2d(x, w, b, 1, 1));
  state.SetItemsProcessed(state.iterations() * 32);
}
BENCHMARK(BM_Conv2dForward)->Arg(8)->Arg(16)->Arg(32);

void BM_Conv2dBackward(benchmark::State& state) {
  const auto c = static_cast<std::size_t>(state.range(0));
  const auto x = random_tensor({32, c, 28, 28}, 1, true);
  const auto w = random_tensor({c, c, 3, 3}, 2, true);
  const auto b = random_tensor({c}, 3, true);
  for (auto _ : state) ops::sum(ops::conv2d(x, w, b, 1, 1)).backward();
  state.SetItemsProcessed(state.iterations() * 32);
}
BENCHMARK(BM_Conv2dBackward)->Arg(8)->Arg(16);

void BM_FakeQuantize(benchmark::State& state) {
  const auto x = random_tensor({64, 16, 14, 14}, 4);
  const int bits = static_cast<int>(state.range(0));
  NoGradGuard guard;
  for (auto _ : state) benchmark::DoNotOptimize(fake_quantize_per_sample(x, bits));
  state.SetBytesProcessed(state.iterations() * static_cast<std::int64_t>(x.size() * sizeof(float)));
}
BENCHMARK(BM_FakeQuantize)->Arg(1)->Arg(4)->Arg(8);

void BM_FgsmBatch(benchmark::State& state) {
  NetworkModel m(ArchSpec::parse(arch_preset("mnist-cnn")), 0);
  const auto x = random_tensor({64, 1, 28, 28}, 5);
  Tensor<float> xs(x.shape(), x.values());
  for (auto& v : xs.mutable_data()) v = (v + 1) / 2;
  std::vector<int> y(64);
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = static_cast<int>(i % 10);
  for (auto _ : state) benchmark::DoNotOptimize(fgsm(m, xs, y, AttackConfig::fgsm(0.1)));
  state.SetItemsProcessed(state.iterations() * 64);
}
BENCHMARK(BM_FgsmBatch)->Unit(benchmark::kMillisecond);

void BM_EnergyReport(benchmark::State& state) {
  const auto model = cost_preset("vgg19-cifar");
  const auto base = BitWidthPlan::uniform(model.slots(), 16);
  const auto plan = BitWidthPlan::uniform(model.slots(), 5);
  const std::vector<HardwareConfig> configs{HardwareConfig::standard()};
  for (auto _ : state) benchmark::DoNotOptimize(network_report(model, plan, configs, base).energy_ratio(0));
}
BENCHMARK(BM_EnergyReport);

}  // namespace

BENCHMARK_MAIN();
