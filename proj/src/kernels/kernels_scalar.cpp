#include "quantlens/kernels.hpp"

namespace qlens::kernels::scalar {
namespace {

template <typename T>
T dot_impl(const T* a, const T* b, std::size_t n) {
  T s = 0;
  for (std::size_t i = 0; i < n; ++i) s += a[i] * b[i];
  return s;
}

template <typename T>
void axpy_impl(T* y, T alpha, const T* x, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

template <typename T>
void gemm_nt_impl(ConstMatView<T> a, ConstMatView<T> b, MatView<T> c, bool accumulate) {
  for (std::size_t i = 0; i < a.rows; ++i) {
    T* ci = c.row(i);
    for (std::size_t j = 0; j < b.rows; ++j) {
      const T v = dot_impl(a.row(i), b.row(j), a.cols);
      ci[j] = accumulate ? ci[j] + v : v;
    }
  }
}

template <typename T>
void gemm_nn_impl(ConstMatView<T> a, ConstMatView<T> b, MatView<T> c) {
  for (std::size_t i = 0; i < a.rows; ++i) {
    const T* ai = a.row(i);
    for (std::size_t k = 0; k < a.cols; ++k) axpy_impl(c.row(i), ai[k], b.row(k), b.cols);
  }
}

template <typename T>
void gemm_tn_impl(ConstMatView<T> a, ConstMatView<T> b, MatView<T> c) {
  for (std::size_t k = 0; k < a.rows; ++k) {
    const T* ak = a.row(k);
    for (std::size_t i = 0; i < a.cols; ++i) {
      if (ak[i] != T(0)) axpy_impl(c.row(i), ak[i], b.row(k), b.cols);
    }
  }
}

}  // namespace

float dot(const float* a, const float* b, std::size_t n) { return dot_impl(a, b, n); }
double dot(const double* a, const double* b, std::size_t n) { return dot_impl(a, b, n); }
void axpy(float* y, float alpha, const float* x, std::size_t n) { axpy_impl(y, alpha, x, n); }
void axpy(double* y, double alpha, const double* x, std::size_t n) { axpy_impl(y, alpha, x, n); }
void gemm_nt(ConstMatView<float> a, ConstMatView<float> b, MatView<float> c, bool accumulate) {
  gemm_nt_impl(a, b, c, accumulate);
}
void gemm_nt(ConstMatView<double> a, ConstMatView<double> b, MatView<double> c, bool accumulate) {
  gemm_nt_impl(a, b, c, accumulate);
}
void gemm_nn(ConstMatView<float> a, ConstMatView<float> b, MatView<float> c) { gemm_nn_impl(a, b, c); }
void gemm_nn(ConstMatView<double> a, ConstMatView<double> b, MatView<double> c) { gemm_nn_impl(a, b, c); }
void gemm_tn(ConstMatView<float> a, ConstMatView<float> b, MatView<float> c) { gemm_tn_impl(a, b, c); }
void gemm_tn(ConstMatView<double> a, ConstMatView<double> b, MatView<double> c) { gemm_tn_impl(a, b, c); }

}  // namespace qlens::kernels::scalar
