#pragma once

// GEMM dispatch. With SLUFUSE_USE_CBLAS the single-threaded OpenBLAS kernels
// are used (thread count pinned to 1 at startup so reduction order, and hence
// bitwise results, never depend on the host). Otherwise a blocked portable
// loop with a fixed accumulation order is used.

#include <cstddef>

#ifdef SLUFUSE_USE_CBLAS
#include <cblas.h>
extern "C" void openblas_set_num_threads(int);
#endif

namespace slufuse {

inline void pin_blas_threads() {
#ifdef SLUFUSE_USE_CBLAS
  openblas_set_num_threads(1);
#endif
}

#ifdef SLUFUSE_USE_CBLAS

// C (m x n) += or = op(A) * op(B); row-major throughout.
inline void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n,
                 std::size_t k, float alpha, const float* a, std::size_t lda,
                 const float* b, std::size_t ldb, float beta, float* c,
                 std::size_t ldc) {
  cblas_sgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans,
              trans_b ? CblasTrans : CblasNoTrans, static_cast<int>(m),
              static_cast<int>(n), static_cast<int>(k), alpha, a,
              static_cast<int>(lda), b, static_cast<int>(ldb), beta, c,
              static_cast<int>(ldc));
}

inline void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n,
                 std::size_t k, double alpha, const double* a, std::size_t lda,
                 const double* b, std::size_t ldb, double beta, double* c,
                 std::size_t ldc) {
  cblas_dgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans,
              trans_b ? CblasTrans : CblasNoTrans, static_cast<int>(m),
              static_cast<int>(n), static_cast<int>(k), alpha, a,
              static_cast<int>(lda), b, static_cast<int>(ldb), beta, c,
              static_cast<int>(ldc));
}

#else

template <class S>
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n,
          std::size_t k, S alpha, const S* a, std::size_t lda, const S* b,
          std::size_t ldb, S beta, S* c, std::size_t ldc) {
  auto A = [&](std::size_t i, std::size_t t) {
    return trans_a ? a[t * lda + i] : a[i * lda + t];
  };
  auto B = [&](std::size_t t, std::size_t j) {
    return trans_b ? b[j * ldb + t] : b[t * ldb + j];
  };
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      S acc = 0;
      for (std::size_t t = 0; t < k; ++t) acc += A(i, t) * B(t, j);
      c[i * ldc + j] = alpha * acc + beta * c[i * ldc + j];
    }
  }
}

#endif

}  // namespace slufuse
