#pragma once

#include <cstddef>

namespace anyad {

// Row-major GEMM: C = alpha * op(A) * op(B) + beta * C, with op(X) = X or X^T.
// op(A) is m x k, op(B) is k x n, C is m x n. Backed by CBLAS when the build
// finds it, otherwise by a native blocked loop with a fixed accumulation order.
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k,
          float alpha, const float* a, const float* b, float beta, float* c);
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k,
          double alpha, const double* a, const double* b, double beta, double* c);

// Pins BLAS to one compute thread; reductions then have a fixed order.
void configure_blas_single_thread();

}  // namespace anyad
