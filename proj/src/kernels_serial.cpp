// SPDX-License-Identifier: Apache-2.0
#include "kgfuse/kernels.hpp"

namespace kgfuse::kernels::serial {

void gemm_nn(std::span<const double> a, std::span<const double> b, std::span<double> c,
             std::size_t m, std::size_t k, std::size_t n, bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) {
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
  for (std::size_t i = 0; i < m; ++i) {
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
  for (std::size_t i = 0; i < m; ++i) {
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
  for (std::size_t s = 0; s < batch; ++s) {
    gemm_nn(a.subspan(s * m * k, m * k), b.subspan(s * k * n, k * n), c.subspan(s * m * n, m * n),
            m, k, n, accumulate);
  }
}

void batched_gemm_nt(std::span<const double> a, std::span<const double> b, std::span<double> c,
                     std::size_t batch, std::size_t m, std::size_t k, std::size_t n,
                     bool accumulate) {
  for (std::size_t s = 0; s < batch; ++s) {
    gemm_nt(a.subspan(s * m * k, m * k), b.subspan(s * n * k, n * k), c.subspan(s * m * n, m * n),
            m, k, n, accumulate);
  }
}

void batched_gemm_tn(std::span<const double> a, std::span<const double> b, std::span<double> c,
                     std::size_t batch, std::size_t m, std::size_t k, std::size_t n,
                     bool accumulate) {
  for (std::size_t s = 0; s < batch; ++s) {
    gemm_tn(a.subspan(s * k * m, k * m), b.subspan(s * k * n, k * n), c.subspan(s * m * n, m * n),
            m, k, n, accumulate);
  }
}

}  // namespace kgfuse::kernels::serial
