#pragma once

// Row-major GEMM kernels for the tensor engine. All variants accumulate
// (C += ...) and take explicit leading dimensions so attention heads can
// operate on column slices without copying. The nn/tn forms use the
// broadcast-row pattern that compilers vectorize without reassociation; nt
// goes through a transposed scratch copy of B so its inner loop takes the
// same shape.

#include <cstddef>
#include <vector>

#include "lpt/common.hpp"

namespace lpt::detail {

// C(m x n) += A(m x k) * B(k x n)
inline void gemm_nn(size_t m, size_t n, size_t k, const real* A, size_t lda, const real* B,
                    size_t ldb, real* C, size_t ldc) {
    for (size_t i = 0; i < m; ++i) {
        const real* a_row = A + i * lda;
        real* c_row = C + i * ldc;
        for (size_t kk = 0; kk < k; ++kk) {
            real a = a_row[kk];
            const real* b_row = B + kk * ldb;
            for (size_t j = 0; j < n; ++j) c_row[j] += a * b_row[j];
        }
    }
}

// C(m x n) += A(k x m)^T * B(k x n)
inline void gemm_tn(size_t m, size_t n, size_t k, const real* A, size_t lda, const real* B,
                    size_t ldb, real* C, size_t ldc) {
    for (size_t kk = 0; kk < k; ++kk) {
        const real* a_row = A + kk * lda;
        const real* b_row = B + kk * ldb;
        for (size_t i = 0; i < m; ++i) {
            real a = a_row[i];
            real* c_row = C + i * ldc;
            for (size_t j = 0; j < n; ++j) c_row[j] += a * b_row[j];
        }
    }
}

// C(m x n) += A(m x k) * B(n x k)^T
inline void gemm_nt(size_t m, size_t n, size_t k, const real* A, size_t lda, const real* B,
                    size_t ldb, real* C, size_t ldc) {
    thread_local std::vector<real> scratch;
    if (scratch.size() < k * n) scratch.resize(k * n);
    for (size_t j = 0; j < n; ++j)
        for (size_t kk = 0; kk < k; ++kk) scratch[kk * n + j] = B[j * ldb + kk];
    gemm_nn(m, n, k, A, lda, scratch.data(), n, C, ldc);
}

// Contiguous convenience overloads (ld == column count).
inline void gemm_nn(size_t m, size_t n, size_t k, const real* A, const real* B, real* C) {
    gemm_nn(m, n, k, A, k, B, n, C, n);
}
inline void gemm_tn(size_t m, size_t n, size_t k, const real* A, const real* B, real* C) {
    gemm_tn(m, n, k, A, m, B, n, C, n);
}
inline void gemm_nt(size_t m, size_t n, size_t k, const real* A, const real* B, real* C) {
    gemm_nt(m, n, k, A, k, B, k, C, n);
}

// exp via degree-10 Taylor on the reduced argument plus exponent scaling.
// Relative error stays below ~1e-13; used on internal hot paths (attention
// softmax, gelu backward) where the loop must vectorize.
inline double fast_exp(double x) {
    if (x > 700.0) x = 700.0;
    if (x < -700.0) x = -700.0;
    double t = x * 1.4426950408889634;  // x / ln 2
    double n = t >= 0 ? static_cast<double>(static_cast<long long>(t + 0.5))
                      : static_cast<double>(static_cast<long long>(t - 0.5));
    double r = x - n * 0.6931471805599453 - n * 2.3190468138462996e-17;
    double p = 1.0 + r * (1.0 + r * (0.5 + r * (1.0 / 6 + r * (1.0 / 24 + r * (1.0 / 120 +
               r * (1.0 / 720 + r * (1.0 / 5040 + r * (1.0 / 40320 + r * (1.0 / 362880 +
               r * (1.0 / 3628800))))))))));
    long long biased = static_cast<long long>(n) + 1023;
    if (biased <= 0) return 0.0;
    if (biased >= 2047) biased = 2046;
    uint64_t bits = static_cast<uint64_t>(biased) << 52;
    double scale;
    __builtin_memcpy(&scale, &bits, sizeof scale);
    return p * scale;
}

}  // namespace lpt::detail
