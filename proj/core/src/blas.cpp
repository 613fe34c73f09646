#include "anyad/blas.hpp"

#include <vector>

#ifdef ANYAD_USE_CBLAS
#include <cblas.h>
#endif

namespace anyad {

#ifdef ANYAD_USE_CBLAS

void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k,
          float alpha, const float* a, const float* b, float beta, float* c) {
    cblas_sgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans, trans_b ? CblasTrans : CblasNoTrans,
                static_cast<int>(m), static_cast<int>(n), static_cast<int>(k), alpha, a,
                static_cast<int>(trans_a ? m : k), b, static_cast<int>(trans_b ? k : n), beta, c,
                static_cast<int>(n));
}

void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k,
          double alpha, const double* a, const double* b, double beta, double* c) {
    cblas_dgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans, trans_b ? CblasTrans : CblasNoTrans,
                static_cast<int>(m), static_cast<int>(n), static_cast<int>(k), alpha, a,
                static_cast<int>(trans_a ? m : k), b, static_cast<int>(trans_b ? k : n), beta, c,
                static_cast<int>(n));
}

void configure_blas_single_thread() { openblas_set_num_threads(1); }

#else

namespace {

// Packs op(A) rows so the inner loop always walks contiguous memory.
template <typename T>
void gemm_native(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k,
                 T alpha, const T* a, const T* b, T beta, T* c) {
    std::vector<T> bt;
    const T* bmat = b;  // row-major k x n view of op(B)
    if (trans_b) {
        bt.resize(k * n);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < k; ++j) bt[j * n + i] = b[i * k + j];
        bmat = bt.data();
    }
    for (std::size_t i = 0; i < m; ++i) {
        T* crow = c + i * n;
        if (beta == T(0)) {
            for (std::size_t j = 0; j < n; ++j) crow[j] = T(0);
        } else if (beta != T(1)) {
            for (std::size_t j = 0; j < n; ++j) crow[j] *= beta;
        }
        for (std::size_t p = 0; p < k; ++p) {
            const T av = alpha * (trans_a ? a[p * m + i] : a[i * k + p]);
            if (av == T(0)) continue;
            const T* brow = bmat + p * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

}  // namespace

void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k,
          float alpha, const float* a, const float* b, float beta, float* c) {
    gemm_native(trans_a, trans_b, m, n, k, alpha, a, b, beta, c);
}

void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k,
          double alpha, const double* a, const double* b, double beta, double* c) {
    gemm_native(trans_a, trans_b, m, n, k, alpha, a, b, beta, c);
}

void configure_blas_single_thread() {}

#endif

}  // namespace anyad
