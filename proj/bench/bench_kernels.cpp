// Serial reference vs OpenMP GEMM, plus one fused forward pass.
#include <benchmark/benchmark.h>

#include <vector>

#include "kgfuse/kernels.hpp"
#include "kgfuse/rng.hpp"
#include "kgfuse/transformer.hpp"

namespace {

std::vector<double> random_values(std::size_t n, std::uint64_t seed) {
  kgfuse::Rng rng(seed);
  std::vector<double> v(n);
  for (auto& x : v) x = kgfuse::uniform_real(rng) - 0.5;
  return v;
}

template <auto Kernel>
void bm_gemm(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto a = random_values(n * n, 1), b = random_values(n * n, 2);
  std::vector<double> c(n * n);
  for (auto _ : state) {
    Kernel(a, b, c, n, n, n, false);
    benchmark::DoNotOptimize(c.data());
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(2 * n * n * n));
}

BENCHMARK(bm_gemm<kgfuse::kernels::serial::gemm_nn>)->Name("gemm_nn/serial")->RangeMultiplier(2)->Range(32, 256);
BENCHMARK(bm_gemm<kgfuse::kernels::omp::gemm_nn>)->Name("gemm_nn/omp")->RangeMultiplier(2)->Range(32, 256);
BENCHMARK(bm_gemm<kgfuse::kernels::serial::gemm_nt>)->Name("gemm_nt/serial")->RangeMultiplier(2)->Range(32, 256);
BENCHMARK(bm_gemm<kgfuse::kernels::omp::gemm_nt>)->Name("gemm_nt/omp")->RangeMultiplier(2)->Range(32, 256);
BENCHMARK(bm_gemm<kgfuse::kernels::serial::gemm_tn>)->Name("gemm_tn/serial")->RangeMultiplier(2)->Range(32, 256);
BENCHMARK(bm_gemm<kgfuse::kernels::omp::gemm_tn>)->Name("gemm_tn/omp")->RangeMultiplier(2)->Range(32, 256);

void bm_lm_forward(benchmark::State& state) {
  kgfuse::ModelConfig c;
  c.vocab_size = 200;
  c.d_model = 32;
  c.n_layers = 2;
  c.n_heads = 4;
  c.d_ff = 64;
  c.max_seq = 24;
  kgfuse::Rng rng(3);
  kgfuse::TransformerModel model(c, rng);
  std::vector<std::vector<kgfuse::TokenId>> batch(16, std::vector<kgfuse::TokenId>(20, 7));
  for (auto _ : state) {
    kgfuse::NoGradGuard no_grad;
    benchmark::DoNotOptimize(model.forward(batch).logits.at(0));
  }
}
BENCHMARK(bm_lm_forward);

}  // namespace

BENCHMARK_MAIN();
