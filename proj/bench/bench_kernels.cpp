#include <benchmark/benchmark.h>

#include <omp.h>

#include "evtrack/kernels.hpp"
#include "evtrack/model.hpp"
#include "evtrack/quant.hpp"
#include "evtrack/rng.hpp"

using namespace evtrack;

namespace {

// conv2 of the default network: the heaviest layer.
const ConvGeometry kConv{16, 31, 31, 64, 3, 1, 1};

std::vector<float> random_vec(std::size_t n, std::uint64_t seed) {
  Rng r(seed);
  std::vector<float> v(n);
  for (auto& x : v) x = static_cast<float>(r.uniform(-1, 1));
  return v;
}

void BM_ConvRef(benchmark::State& state) {
  const int n = static_cast<int>(state.range(0));
  const auto x = random_vec(static_cast<std::size_t>(n) * kConv.in_c * kConv.in_h * kConv.in_w, 1);
  const auto w = random_vec(static_cast<std::size_t>(kConv.out_c) * kConv.patch(), 2);
  const auto b = random_vec(kConv.out_c, 3);
  std::vector<float> y(static_cast<std::size_t>(n) * kConv.out_c * kConv.out_h() * kConv.out_w());
  for (auto _ : state) {
    ref::conv2d(x.data(), w.data(), b.data(), y.data(), n, kConv);
    benchmark::DoNotOptimize(y.data());
  }
  state.counters["MAC/s"] = benchmark::Counter(
      static_cast<double>(y.size()) * kConv.patch(), benchmark::Counter::kIsIterationInvariantRate);
}

void BM_ConvFast(benchmark::State& state) {
  const int n = static_cast<int>(state.range(0));
  omp_set_num_threads(static_cast<int>(state.range(1)));
  const auto x = random_vec(static_cast<std::size_t>(n) * kConv.in_c * kConv.in_h * kConv.in_w, 1);
  const auto w = random_vec(static_cast<std::size_t>(kConv.out_c) * kConv.patch(), 2);
  const auto b = random_vec(kConv.out_c, 3);
  std::vector<float> y(static_cast<std::size_t>(n) * kConv.out_c * kConv.out_h() * kConv.out_w());
  for (auto _ : state) {
    fast::conv2d_forward(x.data(), w.data(), b.data(), y.data(), n, kConv);
    benchmark::DoNotOptimize(y.data());
  }
  state.counters["MAC/s"] = benchmark::Counter(
      static_cast<double>(y.size()) * kConv.patch(), benchmark::Counter::kIsIterationInvariantRate);
}

void BM_LinearRef(benchmark::State& state) {
  const int n = static_cast<int>(state.range(0));
  const auto x = random_vec(static_cast<std::size_t>(n) * 144, 1);
  const auto w = random_vec(144 * 128, 2);
  const auto b = random_vec(128, 3);
  std::vector<float> y(static_cast<std::size_t>(n) * 128);
  for (auto _ : state) {
    ref::linear(x.data(), w.data(), b.data(), y.data(), n, 144, 128);
    benchmark::DoNotOptimize(y.data());
  }
}

void BM_LinearFast(benchmark::State& state) {
  const int n = static_cast<int>(state.range(0));
  omp_set_num_threads(static_cast<int>(state.range(1)));
  const auto x = random_vec(static_cast<std::size_t>(n) * 144, 1);
  const auto w = random_vec(144 * 128, 2);
  const auto b = random_vec(128, 3);
  std::vector<float> y(static_cast<std::size_t>(n) * 128);
  for (auto _ : state) {
    fast::linear_forward(x.data(), w.data(), b.data(), y.data(), n, 144, 128);
    benchmark::DoNotOptimize(y.data());
  }
}

void BM_ForwardPath(benchmark::State& state) {
  const Model m = build_default_model(2, 1);
  Tensor x({1, 2, 64, 64});
  Rng r(5);
  for (auto& v : x.values()) v = r.below(4) == 0 ? static_cast<float>(r.below(5)) : 0.0f;
  ForwardOptions o;
  o.path = state.range(0) ? KernelPath::Fast : KernelPath::Reference;
  for (auto _ : state) benchmark::DoNotOptimize(forward(m, x, o)[0]);
  state.SetLabel(state.range(0) ? "fast" : "reference");
}

void BM_Int8Path(benchmark::State& state) {
  const Model folded = fold_batchnorm(build_default_model(2, 1));
  EventFrame f;
  Rng r(6);
  f.data.resize(2 * 64 * 64);
  for (auto& v : f.data) v = r.below(4) == 0 ? static_cast<float>(r.below(5)) : 0.0f;
  const std::vector<EventFrame> cal{f};
  const auto q = quantize_model(folded, calibrate(folded, cal));
  const KernelPath path = state.range(0) ? KernelPath::Fast : KernelPath::Reference;
  for (auto _ : state) benchmark::DoNotOptimize(quantized_forward(q, f, nullptr, nullptr, path)[0]);
  state.SetLabel(state.range(0) ? "fast" : "reference");
}

}  // namespace

BENCHMARK(BM_ConvRef)->Arg(1)->Arg(8)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_ConvFast)->Args({1, 1})->Args({8, 1})->Args({8, 4})->Unit(benchmark::kMillisecond);
BENCHMARK(BM_LinearRef)->Arg(1)->Arg(32)->Unit(benchmark::kMicrosecond);
BENCHMARK(BM_LinearFast)->Args({1, 1})->Args({32, 1})->Args({32, 4})->Unit(benchmark::kMicrosecond);
BENCHMARK(BM_ForwardPath)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_Int8Path)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
