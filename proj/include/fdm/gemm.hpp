#pragma once

#include <algorithm>
#include <cstring>
#include <vector>

#if defined(__AVX512F__)
#include <immintrin.h>
#endif

#ifdef _OPENMP
#include <omp.h>
#endif

namespace fdm::kernels {

// Global kernel selection. When use_reference is set, the dispatching entry
// points in kernels.hpp run the serial reference implementations instead of
// the optimized ones; tests use this to cross-check entire forward passes.
struct KernelConfig {
    bool use_reference = false;
};

inline KernelConfig& config() {
    static KernelConfig c;
    return c;
}

namespace ref {

// Serial reference GEMM: C = alpha * op(A) op(B) + beta * C, row-major.
// op(A) is M x K, op(B) is K x N. Plain triple loop, kept as the oracle
// for the packed implementation below.
template <typename T>
void gemm(bool ta, bool tb, int M, int N, int K, T alpha, const T* A, int lda, const T* B, int ldb,
          T beta, T* C, int ldc) {
    for (int i = 0; i < M; i++) {
        for (int j = 0; j < N; j++) {
            T acc = 0;
            for (int k = 0; k < K; k++) {
                T a = ta ? A[std::size_t(k) * lda + i] : A[std::size_t(i) * lda + k];
                T b = tb ? B[std::size_t(j) * ldb + k] : B[std::size_t(k) * ldb + j];
                acc += a * b;
            }
            T& c = C[std::size_t(i) * ldc + j];
            c = alpha * acc + (beta == T(0) ? T(0) : beta * c);
        }
    }
}

}  // namespace ref

namespace detail {

template <typename T>
struct GemmScratch {
    std::vector<T> a_pack;  // MR x K tile, k-contiguous rows
    std::vector<T> b_pack;  // K x NR panel
    std::vector<T> c_tile;  // MR x NR spill tile for edge panels
};

template <typename T>
inline GemmScratch<T>& gemm_scratch() {
    static thread_local GemmScratch<T> s;
    return s;
}

constexpr int kMR = 8;
constexpr int kNR = 32;

#if defined(__AVX512F__)
// 8x32 float microkernel: two zmm accumulators per row.
inline void micro_f32(const float* Ap, const float* Bp, float* C, int ldc, int K, int mh) {
    __m512 acc[kMR][2];
    for (int r = 0; r < mh; r++) {
        acc[r][0] = _mm512_setzero_ps();
        acc[r][1] = _mm512_setzero_ps();
    }
    for (int k = 0; k < K; k++) {
        __m512 b0 = _mm512_loadu_ps(Bp + std::size_t(k) * kNR);
        __m512 b1 = _mm512_loadu_ps(Bp + std::size_t(k) * kNR + 16);
        for (int r = 0; r < mh; r++) {
            __m512 a = _mm512_set1_ps(Ap[std::size_t(r) * K + k]);
            acc[r][0] = _mm512_fmadd_ps(a, b0, acc[r][0]);
            acc[r][1] = _mm512_fmadd_ps(a, b1, acc[r][1]);
        }
    }
    for (int r = 0; r < mh; r++) {
        float* c = C + std::size_t(r) * ldc;
        _mm512_storeu_ps(c, _mm512_add_ps(_mm512_loadu_ps(c), acc[r][0]));
        _mm512_storeu_ps(c + 16, _mm512_add_ps(_mm512_loadu_ps(c + 16), acc[r][1]));
    }
}
#endif

// Portable microkernel, written so the compiler can vectorize the j loop.
template <typename T>
inline void micro_generic(const T* Ap, const T* Bp, T* C, int ldc, int K, int mh) {
    T acc[kMR][kNR];
    for (int r = 0; r < mh; r++)
        for (int j = 0; j < kNR; j++) acc[r][j] = 0;
    for (int k = 0; k < K; k++) {
        const T* b = Bp + std::size_t(k) * kNR;
        for (int r = 0; r < mh; r++) {
            T a = Ap[std::size_t(r) * K + k];
#pragma omp simd
            for (int j = 0; j < kNR; j++) acc[r][j] += a * b[j];
        }
    }
    for (int r = 0; r < mh; r++) {
        T* c = C + std::size_t(r) * ldc;
#pragma omp simd
        for (int j = 0; j < kNR; j++) c[j] += acc[r][j];
    }
}

template <typename T>
inline void micro(const T* Ap, const T* Bp, T* C, int ldc, int K, int mh) {
    micro_generic(Ap, Bp, C, ldc, K, mh);
}

#if defined(__AVX512F__)
template <>
inline void micro<float>(const float* Ap, const float* Bp, float* C, int ldc, int K, int mh) {
    micro_f32(Ap, Bp, C, ldc, K, mh);
}
#endif

}  // namespace detail

// Optimized GEMM: packed panels with a SIMD microkernel, OpenMP-parallel over
// row tiles. Same contract as ref::gemm.
template <typename T>
void gemm(bool ta, bool tb, int M, int N, int K, T alpha, const T* A, int lda, const T* B, int ldb,
          T beta, T* C, int ldc) {
    using namespace detail;
    if (M <= 0 || N <= 0) return;

    if (beta == T(0)) {
        for (int i = 0; i < M; i++) std::fill(C + std::size_t(i) * ldc, C + std::size_t(i) * ldc + N, T(0));
    } else if (beta != T(1)) {
        for (int i = 0; i < M; i++)
            for (int j = 0; j < N; j++) C[std::size_t(i) * ldc + j] *= beta;
    }
    if (K <= 0) return;

    const int mtiles = (M + kMR - 1) / kMR;

#pragma omp parallel
    {
        auto& scratch = gemm_scratch<T>();
        scratch.a_pack.resize(std::size_t(kMR) * K);
        scratch.b_pack.resize(std::size_t(K) * kNR);
        scratch.c_tile.resize(std::size_t(kMR) * kNR);

        for (int j0 = 0; j0 < N; j0 += kNR) {
            const int jw = std::min(kNR, N - j0);
            // Pack the B panel (shared column block) per thread; redundant
            // across threads but keeps the loop free of synchronization.
            T* bp = scratch.b_pack.data();
            for (int k = 0; k < K; k++) {
                T* dst = bp + std::size_t(k) * kNR;
                if (tb) {
                    for (int j = 0; j < jw; j++) dst[j] = B[std::size_t(j0 + j) * ldb + k];
                } else {
                    const T* src = B + std::size_t(k) * ldb + j0;
                    for (int j = 0; j < jw; j++) dst[j] = src[j];
                }
                for (int j = jw; j < kNR; j++) dst[j] = 0;
            }

#pragma omp for schedule(static) nowait
            for (int ti = 0; ti < mtiles; ti++) {
                const int i0 = ti * kMR;
                const int mh = std::min(kMR, M - i0);
                T* ap = scratch.a_pack.data();
                for (int r = 0; r < mh; r++) {
                    if (ta) {
                        for (int k = 0; k < K; k++)
                            ap[std::size_t(r) * K + k] = A[std::size_t(k) * lda + (i0 + r)];
                    } else {
                        const T* src = A + std::size_t(i0 + r) * lda;
                        std::copy(src, src + K, ap + std::size_t(r) * K);
                    }
                }
                if (jw == kNR && alpha == T(1)) {
                    micro(ap, bp, C + std::size_t(i0) * ldc + j0, ldc, K, mh);
                } else {
                    T* ct = scratch.c_tile.data();
                    std::fill(ct, ct + std::size_t(kMR) * kNR, T(0));
                    micro(ap, bp, ct, kNR, K, mh);
                    for (int r = 0; r < mh; r++) {
                        T* c = C + std::size_t(i0 + r) * ldc + j0;
                        for (int j = 0; j < jw; j++) c[j] += alpha * ct[std::size_t(r) * kNR + j];
                    }
                }
            }
#pragma omp barrier
        }
    }
}

}  // namespace fdm::kernels
