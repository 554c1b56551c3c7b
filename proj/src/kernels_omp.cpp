// SPDX-License-Identifier: Apache-2.0
#include <cstdint>

#include "kgfuse/kernels.hpp"

namespace kgfuse::kernels::omp {

namespace {
// Below this many multiply-adds the fork/join overhead dominates.
constexpr std::size_t kParallelWork = 1 << 15;
}  // namespace

// Rows of the output are distributed across threads; each element keeps the
// serial ascending-k order.

void gemm_nn(std::span<const double> a, std::span<const double> b, std::span<double> c,
             std::size_t m, std::size_t k, std::size_t n, bool accumulate) {
  const auto rows = static_cast<std::int64_t>(m);
#pragma omp parallel for schedule(static) if (m * k * n >= kParallelWork)
  for (std::int64_t ii = 0; ii < rows; ++ii) {
    const auto i = static_cast<std::size_t>(ii);
    double* crow = c.data() + i * n;
    if (!accumulate) {
      for (std::size_t j = 0; j < n; ++j) crow[j] = 0.0;
    }
    const double* arow = a.data() + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      const double* brow = b.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

void gemm_nt(std::span<const double> a, std::span<const double> b, std::span<double> c,
             std::size_t m, std::size_t k, std::size_t n, bool accumulate) {
  const auto rows = static_cast<std::int64_t>(m);
#pragma omp parallel for schedule(static) if (m * k * n >= kParallelWork)
  for (std::int64_t ii = 0; ii < rows; ++ii) {
    const auto i = static_cast<std::size_t>(ii);
    const double* arow = a.data() + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const double* brow = b.data() + j * k;
      double acc = accumulate ? c[i * n + j] : 0.0;
      for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
      c[i * n + j] = acc;
    }
  }
}

void gemm_tn(std::span<const double> a, std::span<const double> b, std::span<double> c,
             std::size_t m, std::size_t k, std::size_t n, bool accumulate) {
  const auto rows = static_cast<std::int64_t>(m);
#pragma omp parallel for schedule(static) if (m * k * n >= kParallelWork)
  for (std::int64_t ii = 0; ii < rows; ++ii) {
    const auto i = static_cast<std::size_t>(ii);
    double* crow = c.data() + i * n;
    if (!accumulate) {
      for (std::size_t j = 0; j < n; ++j) crow[j] = 0.0;
    }
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a[p * m + i];
      const double* brow = b.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

void batched_gemm_nn(std::span<const double> a, std::span<const double> b, std::span<double> c,
                     std::size_t batch, std::size_t m, std::size_t k, std::size_t n,
                     bool accumulate) {
  const auto slices = static_cast<std::int64_t>(batch);
#pragma omp parallel for schedule(static) if (batch * m * k * n >= kParallelWork)
  for (std::int64_t s = 0; s < slices; ++s) {
    const auto u = static_cast<std::size_t>(s);
    serial::gemm_nn(a.subspan(u * m * k, m * k), b.subspan(u * k * n, k * n),
                    c.subspan(u * m * n, m * n), m, k, n, accumulate);
  }
}

void batched_gemm_nt(std::span<const double> a, std::span<const double> b, std::span<double> c,
                     std::size_t batch, std::size_t m, std::size_t k, std::size_t n,
                     bool accumulate) {
  const auto slices = static_cast<std::int64_t>(batch);
#pragma omp parallel for schedule(static) if (batch * m * k * n >= kParallelWork)
  for (std::int64_t s = 0; s < slices; ++s) {
    const auto u = static_cast<std::size_t>(s);
    serial::gemm_nt(a.subspan(u * m * k, m * k), b.subspan(u * n * k, n * k),
                    c.subspan(u * m * n, m * n), m, k, n, accumulate);
  }
}

void batched_gemm_tn(std::span<const double> a, std::span<const double> b, std::span<double> c,
                     std::size_t batch, std::size_t m, std::size_t k, std::size_t n,
                     bool accumulate) {
  const auto slices = static_cast<std::int64_t>(batch);
#pragma omp parallel for schedule(static) if (batch * m * k * n >= kParallelWork)
  for (std::int64_t s = 0; s < slices; ++s) {
    const auto u = static_cast<std::size_t>(s);
    serial::gemm_tn(a.subspan(u * k * m, k * m), b.subspan(u * k * n, k * n),
                    c.subspan(u * m * n, m * n), m, k, n, accumulate);
  }
}

}  // namespace kgfuse::kernels::omp
