#include <benchmark/benchmark.h>

#include <vector>

#include "mvl/data.hpp"
#include "mvl/encoders.hpp"
#include "mvl/fusion.hpp"
#include "mvl/metrics.hpp"
#include "mvl/training.hpp"

namespace {

using namespace mvl;

Tensor filled(Shape shape, std::uint64_t seed, bool grad = false) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  Rng rng(seed);
  std::vector<double> v(n);
  for (double& x : v) x = rng.normal();
  return Tensor::from(std::move(shape), std::move(v), grad);
}

void BM_Matmul(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const Tensor a = filled({n, n}, 1), b = filled({n, n}, 2);
  for (auto _ : state) benchmark::DoNotOptimize(matmul(a, b).data().data());
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(2 * n * n * n));
}
BENCHMARK(BM_Matmul)->Arg(64)->Arg(256);

void BM_Conv1d(benchmark::State& state) {
  const Tensor x = filled({64, 12, 10}, 3), w = filled({64, 10, 5}, 4), b = filled({64}, 5);
  for (auto _ : state) benchmark::DoNotOptimize(conv1d_same(x, w, b).data().data());
}
BENCHMARK(BM_Conv1d);

// Forward and backward through one encoder on a 64-sample optical batch.
void BM_EncoderStep(benchmark::State& state) {
  const auto arch = static_cast<Architecture>(state.range(0));
  EncoderConfig config;
  config.architecture = arch;
  const ViewSchema view = canonical_view("optical").value();
  auto encoder = make_encoder(config, view, "enc", 0);
  const Tensor x = filled({64, view.steps, view.channels}, 6);
  for (auto _ : state) {
    Tensor out = sum_all(encoder->forward(x, Mode::kTrain));
    backward(out);
    for (Parameter& p : encoder->parameters()) p.tensor.zero_grad();
  }
  state.SetLabel(std::string(to_string(arch)));
}
BENCHMARK(BM_EncoderStep)
    ->Arg(static_cast<int>(Architecture::kGru))
    ->Arg(static_cast<int>(Architecture::kLstm))
    ->Arg(static_cast<int>(Architecture::kTempCnn))
    ->Arg(static_cast<int>(Architecture::kTae))
    ->Arg(static_cast<int>(Architecture::kLtae));

void BM_FeatureFusionEpoch(benchmark::State& state) {
  const Dataset data = synth_generate(SynthSpec{SynthKind::kComplementary, 512, 64, 12, 0.3}, 0).by_test_flag().first;
  ModelSpec spec;
  spec.strategy = Strategy::kFeature;
  spec.views = data.schemas();
  TrainConfig config;
  config.max_epochs = 1;
  for (auto _ : state) {
    auto model = build_model(spec);
    benchmark::DoNotOptimize(train(*model, data, config).epochs.size());
  }
  state.SetItemsProcessed(state.iterations() * 512);
}
BENCHMARK(BM_FeatureFusionEpoch)->Unit(benchmark::kMillisecond);

void BM_SpectralEntropy(benchmark::State& state) {
  Rng rng(9);
  std::vector<double> x(static_cast<std::size_t>(state.range(0)));
  for (double& v : x) v = rng.normal();
  for (auto _ : state) benchmark::DoNotOptimize(spectral_entropy(x));
}
BENCHMARK(BM_SpectralEntropy)->Arg(12)->Arg(256);

void BM_Kappa(benchmark::State& state) {
  const auto k = static_cast<std::size_t>(state.range(0));
  ConfusionMatrix cm(k);
  Rng rng(10);
  for (std::size_t i = 0; i < k; ++i)
    for (std::size_t j = 0; j < k; ++j) cm.at(i, j) = rng.below(100);
  for (auto _ : state) benchmark::DoNotOptimize(cohen_kappa(cm));
}
BENCHMARK(BM_Kappa)->Arg(2)->Arg(10);

}  // namespace

int main(int argc, char** argv) {
  mvl::tune_allocator();
  benchmark::Initialize(&argc, argv);
  if (benchmark::ReportUnrecognizedArguments(argc, argv)) return 1;
  benchmark::RunSpecifiedBenchmarks();
  benchmark::Shutdown();
  return 0;
}
