// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <span>

// Dense row-major GEMM kernels. Every kernel has a serial reference in
// kgfuse::kernels::serial and an OpenMP version in kgfuse::kernels::omp.
// Both compute each output element with the same ascending-k summation, so
// their results are bit-identical and the OpenMP build stays reproducible.
namespace kgfuse::kernels {

// When `accumulate` is false the output is overwritten, otherwise added to.
//   gemm_nn: c(m,n) = a(m,k) * b(k,n)
//   gemm_nt: c(m,n) = a(m,k) * b(n,k)^T
//   gemm_tn: c(m,n) = a(k,m)^T * b(k,n)
// The batched variants repeat the product over `batch` contiguous slices.
namespace serial {
void gemm_nn(std::span<const double> a, std::span<const double> b, std::span<double> c,
             std::size_t m, std::size_t k, std::size_t n, bool accumulate);
void gemm_nt(std::span<const double> a, std::span<const double> b, std::span<double> c,
             std::size_t m, std::size_t k, std::size_t n, bool accumulate);
void gemm_tn(std::span<const double> a, std::span<const double> b, std::span<double> c,
             std::size_t m, std::size_t k, std::size_t n, bool accumulate);
void batched_gemm_nn(std::span<const double> a, std::span<const double> b, std::span<double> c,
                     std::size_t batch, std::size_t m, std::size_t k, std::size_t n,
                     bool accumulate);
void batched_gemm_nt(std::span<const double> a, std::span<const double> b, std::span<double> c,
                     std::size_t batch, std::size_t m, std::size_t k, std::size_t n,
                     bool accumulate);
void batched_gemm_tn(std::span<const double> a, std::span<const double> b, std::span<double> c,
                     std::size_t batch, std::size_t m, std::size_t k, std::size_t n,
                     bool accumulate);
}  // namespace serial

namespace omp {
void gemm_nn(std::span<const double> a, std::span<const double> b, std::span<double> c,
             std::size_t m, std::size_t k, std::size_t n, bool accumulate);
void gemm_nt(std::span<const double> a, std::span<const double> b, std::span<double> c,
             std::size_t m, std::size_t k, std::size_t n, bool accumulate);
void gemm_tn(std::span<const double> a, std::span<const double> b, std::span<double> c,
             std::size_t m, std::size_t k, std::size_t n, bool accumulate);
void batched_gemm_nn(std::span<const double> a, std::span<const double> b, std::span<double> c,
                     std::size_t batch, std::size_t m, std::size_t k, std::size_t n,
                     bool accumulate);
void batched_gemm_nt(std::span<const double> a, std::span<const double> b, std::span<double> c,
                     std::size_t batch, std::size_t m, std::size_t k, std::size_t n,
                     bool accumulate);
void batched_gemm_tn(std::span<const double> a, std::span<const double> b, std::span<double> c,
                     std::size_t batch, std::size_t m, std::size_t k, std::size_t n,
                     bool accumulate);
}  // namespace omp

// The variants used by the autodiff ops.
using omp::batched_gemm_nn;
using omp::batched_gemm_nt;
using omp::batched_gemm_tn;
using omp::gemm_nn;
using omp::gemm_nt;
using omp::gemm_tn;

}  // namespace kgfuse::kernels
