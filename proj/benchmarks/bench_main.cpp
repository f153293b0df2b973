#include <benchmark/benchmark.h>

#include "latentswap/pipeline.hpp"

using namespace lswap;

namespace {

const Denoiser& denoiser() {
  static const Denoiser den(Weights::init(DenoiserConfig{}));
  return den;
}

ConditioningSet prompt() { return encode_prompt(split_words("a photo of a object"), DenoiserConfig{}.text_dim, 0); }

Tensor latent(std::size_t side) {
  SeededRng rng(1);
  return rng.uniform_tensor({side, side, 1}, -1.0, 1.0);
}

Tensor box(std::size_t side) {
  Tensor m({side, side});
  for (std::size_t i = side / 4; i < 3 * side / 4; ++i)
    for (std::size_t j = side / 4; j < 3 * side / 4; ++j) m.at(i, j) = 1.0f;
  return m;
}

void BM_PredictNoise(benchmark::State& state) {
  const auto side = static_cast<std::size_t>(state.range(0));
  const Tensor z = latent(side);
  const auto cond = prompt();
  for (auto _ : state) benchmark::DoNotOptimize(denoiser().predict_noise(z, 25, cond.tokens));
}
BENCHMARK(BM_PredictNoise)->Arg(16)->Arg(32)->Arg(64)->Unit(benchmark::kMillisecond);

void BM_EnergyGradient(benchmark::State& state) {
  const auto side = static_cast<std::size_t>(state.range(0));
  const Tensor z = latent(side);
  const auto cond = prompt();
  const auto energy = make_shape_energy(box(side), 4, ShapeConfig{});
  for (auto _ : state) benchmark::DoNotOptimize(denoiser().energy_gradient(z, 25, cond.tokens, energy));
}
BENCHMARK(BM_EnergyGradient)->Arg(16)->Arg(32)->Unit(benchmark::kMillisecond);

void BM_RecordSource(benchmark::State& state) {
  const auto sched = make_schedule(static_cast<int>(state.range(1)));
  const Tensor z = latent(static_cast<std::size_t>(state.range(0)));
  const auto cond = prompt();
  for (auto _ : state) benchmark::DoNotOptimize(record_source(denoiser(), sched, z, cond));
}
BENCHMARK(BM_RecordSource)->Args({32, 50})->Unit(benchmark::kMillisecond);

void BM_SwapGenerate(benchmark::State& state) {
  const auto side = static_cast<std::size_t>(state.range(0));
  const auto sched = make_schedule(50);
  const auto cond = prompt();
  const SourceTrace trace = record_source(denoiser(), sched, latent(side), cond);
  const SwapPlan plan{feather(BinaryMask(box(side)), FeatherParams{}),
                      cond.with_token(4, word_embedding("dog", DenoiserConfig{}.text_dim, 0)), 4};
  for (auto _ : state) benchmark::DoNotOptimize(swap_generate(denoiser(), sched, trace, plan));
}
BENCHMARK(BM_SwapGenerate)->Arg(32)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
