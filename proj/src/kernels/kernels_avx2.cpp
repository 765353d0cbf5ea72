// Compiled with -mavx2 -mfma; only entered after a CPUID check in dispatch.cpp.
#include <immintrin.h>

#include <cmath>

#include "quantlens/kernels.hpp"

namespace qlens::kernels::avx2 {
namespace {

struct F32 {
  using T = float;
  using V = __m256;
  static constexpr std::size_t W = 8;
  static V zero() { return _mm256_setzero_ps(); }
  static V load(const T* p) { return _mm256_loadu_ps(p); }
  static void store(T* p, V v) { _mm256_storeu_ps(p, v); }
  static V set1(T x) { return _mm256_set1_ps(x); }
  static V fma(V a, V b, V c) { return _mm256_fmadd_ps(a, b, c); }
  static T hsum(V v) {
    __m128 lo = _mm256_castps256_ps128(v);
    __m128 hi = _mm256_extractf128_ps(v, 1);
    lo = _mm_add_ps(lo, hi);
    __m128 shuf = _mm_movehdup_ps(lo);
    __m128 sums = _mm_add_ps(lo, shuf);
    shuf = _mm_movehl_ps(shuf, sums);
    sums = _mm_add_ss(sums, shuf);
    return _mm_cvtss_f32(sums);
  }
};

struct F64 {
  using T = double;
  using V = __m256d;
  static constexpr std::size_t W = 4;
  static V zero() { return _mm256_setzero_pd(); }
  static V load(const T* p) { return _mm256_loadu_pd(p); }
  static void store(T* p, V v) { _mm256_storeu_pd(p, v); }
  static V set1(T x) { return _mm256_set1_pd(x); }
  static V fma(V a, V b, V c) { return _mm256_fmadd_pd(a, b, c); }
  static T hsum(V v) {
    __m128d lo = _mm256_castpd256_pd128(v);
    __m128d hi = _mm256_extractf128_pd(v, 1);
    lo = _mm_add_pd(lo, hi);
    __m128d high64 = _mm_unpackhi_pd(lo, lo);
    return _mm_cvtsd_f64(_mm_add_sd(lo, high64));
  }
};

// Canonical per-element dot: one vector accumulator, fixed horizontal sum,
// fused scalar tail. Tiled kernels below reproduce exactly this sequence.
template <typename S>
typename S::T dot_impl(const typename S::T* a, const typename S::T* b, std::size_t n) {
  using T = typename S::T;
  typename S::V acc = S::zero();
  std::size_t k = 0;
  for (; k + S::W <= n; k += S::W) acc = S::fma(S::load(a + k), S::load(b + k), acc);
  T s = S::hsum(acc);
  for (; k < n; ++k) s = std::fma(a[k], b[k], s);
  return s;
}

template <typename S>
void axpy_impl(typename S::T* y, typename S::T alpha, const typename S::T* x, std::size_t n) {
  const typename S::V va = S::set1(alpha);
  std::size_t k = 0;
  for (; k + S::W <= n; k += S::W) S::store(y + k, S::fma(va, S::load(x + k), S::load(y + k)));
  for (; k < n; ++k) y[k] = std::fma(alpha, x[k], y[k]);
}

template <typename S, int R, int C>
void nt_tile(ConstMatView<typename S::T> a, std::size_t i0, ConstMatView<typename S::T> b, std::size_t j0,
             MatView<typename S::T> c, bool accumulate) {
  using T = typename S::T;
  const std::size_t n = a.cols;
  typename S::V acc[R][C];
  for (int r = 0; r < R; ++r)
    for (int q = 0; q < C; ++q) acc[r][q] = S::zero();
  const T* ar[R];
  const T* bq[C];
  for (int r = 0; r < R; ++r) ar[r] = a.row(i0 + r);
  for (int q = 0; q < C; ++q) bq[q] = b.row(j0 + q);
  std::size_t k = 0;
  for (; k + S::W <= n; k += S::W) {
    typename S::V av[R];
    for (int r = 0; r < R; ++r) av[r] = S::load(ar[r] + k);
    for (int q = 0; q < C; ++q) {
      const typename S::V bv = S::load(bq[q] + k);
      for (int r = 0; r < R; ++r) acc[r][q] = S::fma(av[r], bv, acc[r][q]);
    }
  }
  for (int r = 0; r < R; ++r) {
    T* cr = c.row(i0 + r) + j0;
    for (int q = 0; q < C; ++q) {
      T s = S::hsum(acc[r][q]);
      for (std::size_t kk = k; kk < n; ++kk) s = std::fma(ar[r][kk], bq[q][kk], s);
      cr[q] = accumulate ? cr[q] + s : s;
    }
  }
}

template <typename S, int R>
void nt_row_block(ConstMatView<typename S::T> a, std::size_t i0, ConstMatView<typename S::T> b,
                  MatView<typename S::T> c, bool accumulate) {
  std::size_t j = 0;
  for (; j + 4 <= b.rows; j += 4) nt_tile<S, R, 4>(a, i0, b, j, c, accumulate);
  for (; j < b.rows; ++j) nt_tile<S, R, 1>(a, i0, b, j, c, accumulate);
}

template <typename S>
void gemm_nt_impl(ConstMatView<typename S::T> a, ConstMatView<typename S::T> b, MatView<typename S::T> c,
                  bool accumulate) {
  std::size_t i = 0;
  for (; i + 3 <= a.rows; i += 3) nt_row_block<S, 3>(a, i, b, c, accumulate);
  for (; i < a.rows; ++i) nt_row_block<S, 1>(a, i, b, c, accumulate);
}

// C[i, :] += sum_k A(i, k) * B[k, :], with A(i, k) read through `at`.
// Every element accumulates k = 0..K-1 in order with fused multiply-adds.
template <typename S, int R, typename Access>
void nn_rows(Access at, std::size_t kdim, ConstMatView<typename S::T> b, MatView<typename S::T> c, std::size_t i0) {
  using T = typename S::T;
  constexpr std::size_t kVecs = 2;
  constexpr std::size_t kSpan = kVecs * S::W;
  const std::size_t n = b.cols;
  std::size_t j = 0;
  for (; j + kSpan <= n; j += kSpan) {
    typename S::V acc[R][kVecs];
    for (int r = 0; r < R; ++r)
      for (std::size_t v = 0; v < kVecs; ++v) acc[r][v] = S::load(c.row(i0 + r) + j + v * S::W);
    for (std::size_t k = 0; k < kdim; ++k) {
      T coef[R];
      bool any = false;
      for (int r = 0; r < R; ++r) {
        coef[r] = at(i0 + r, k);
        any = any || coef[r] != T(0);
      }
      if (!any) continue;
      const T* bk = b.row(k) + j;
      typename S::V bv[kVecs];
      for (std::size_t v = 0; v < kVecs; ++v) bv[v] = S::load(bk + v * S::W);
      for (int r = 0; r < R; ++r) {
        if (coef[r] == T(0)) continue;
        const typename S::V av = S::set1(coef[r]);
        for (std::size_t v = 0; v < kVecs; ++v) acc[r][v] = S::fma(av, bv[v], acc[r][v]);
      }
    }
    for (int r = 0; r < R; ++r)
      for (std::size_t v = 0; v < kVecs; ++v) S::store(c.row(i0 + r) + j + v * S::W, acc[r][v]);
  }
  for (; j + S::W <= n; j += S::W) {
    typename S::V acc[R];
    for (int r = 0; r < R; ++r) acc[r] = S::load(c.row(i0 + r) + j);
    for (std::size_t k = 0; k < kdim; ++k) {
      const typename S::V bv = S::load(b.row(k) + j);
      for (int r = 0; r < R; ++r) {
        const T coef = at(i0 + r, k);
        if (coef != T(0)) acc[r] = S::fma(S::set1(coef), bv, acc[r]);
      }
    }
    for (int r = 0; r < R; ++r) S::store(c.row(i0 + r) + j, acc[r]);
  }
  for (; j < n; ++j) {
    for (int r = 0; r < R; ++r) {
      T s = c.row(i0 + r)[j];
      for (std::size_t k = 0; k < kdim; ++k) {
        const T coef = at(i0 + r, k);
        if (coef != T(0)) s = std::fma(coef, b.row(k)[j], s);
      }
      c.row(i0 + r)[j] = s;
    }
  }
}

template <typename S, typename Access>
void nn_driver(Access at, std::size_t m, std::size_t kdim, ConstMatView<typename S::T> b, MatView<typename S::T> c) {
  std::size_t i = 0;
  for (; i + 4 <= m; i += 4) nn_rows<S, 4>(at, kdim, b, c, i);
  for (; i < m; ++i) nn_rows<S, 1>(at, kdim, b, c, i);
}

template <typename S>
void gemm_nn_impl(ConstMatView<typename S::T> a, ConstMatView<typename S::T> b, MatView<typename S::T> c) {
  auto at = [a](std::size_t i, std::size_t k) { return a.row(i)[k]; };
  nn_driver<S>(at, a.rows, a.cols, b, c);
}

template <typename S>
void gemm_tn_impl(ConstMatView<typename S::T> a, ConstMatView<typename S::T> b, MatView<typename S::T> c) {
  auto at = [a](std::size_t i, std::size_t k) { return a.row(k)[i]; };
  nn_driver<S>(at, a.cols, a.rows, b, c);
}

}  // namespace

float dot(const float* a, const float* b, std::size_t n) { return dot_impl<F32>(a, b, n); }
double dot(const double* a, const double* b, std::size_t n) { return dot_impl<F64>(a, b, n); }
void axpy(float* y, float alpha, const float* x, std::size_t n) { axpy_impl<F32>(y, alpha, x, n); }
void axpy(double* y, double alpha, const double* x, std::size_t n) { axpy_impl<F64>(y, alpha, x, n); }
void gemm_nt(ConstMatView<float> a, ConstMatView<float> b, MatView<float> c, bool accumulate) {
  gemm_nt_impl<F32>(a, b, c, accumulate);
}
void gemm_nt(ConstMatView<double> a, ConstMatView<double> b, MatView<double> c, bool accumulate) {
  gemm_nt_impl<F64>(a, b, c, accumulate);
}
void gemm_nn(ConstMatView<float> a, ConstMatView<float> b, MatView<float> c) { gemm_nn_impl<F32>(a, b, c); }
void gemm_nn(ConstMatView<double> a, ConstMatView<double> b, MatView<double> c) { gemm_nn_impl<F64>(a, b, c); }
void gemm_tn(ConstMatView<float> a, ConstMatView<float> b, MatView<float> c) { gemm_tn_impl<F32>(a, b, c); }
void gemm_tn(ConstMatView<double> a, ConstMatView<double> b, MatView<double> c) { gemm_tn_impl<F64>(a, b, c); }

}  // namespace qlens::kernels::avx2
