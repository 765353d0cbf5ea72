#pragma once
// Dense inner-loop kernels shared by the model, quantizers and metrics.
//
// Every kernel has a scalar reference implementation and an AVX2+FMA variant.
// The variant is picked once at startup from CPUID and can be overridden
// (tests pin each ISA and compare). Within one ISA the arithmetic of every
// output element is independent of how the caller tiles or batches rows, so
// batched and unbatched evaluation give bit-identical results.

#include <cstddef>
#include <span>
#include <string_view>

namespace qlens::kernels {

enum class Isa { Scalar, Avx2 };

std::string_view to_string(Isa isa);
bool isa_supported(Isa isa);
Isa active_isa();
// Throws Error(InvalidConfig) when the CPU lacks the requested ISA.
void set_isa(Isa isa);

// Strided row-major views. `stride` is the distance between row starts.
template <typename T>
struct MatView {
  T* data;
  std::size_t rows;
  std::size_t cols;
  std::size_t stride;

  T* row(std::size_t r) const { return data + r * stride; }
};

template <typename T>
struct ConstMatView {
  const T* data;
  std::size_t rows;
  std::size_t cols;
  std::size_t stride;

  ConstMatView() = default;
  ConstMatView(const T* d, std::size_t r, std::size_t c, std::size_t s) : data(d), rows(r), cols(c), stride(s) {}
  ConstMatView(MatView<T> v) : data(v.data), rows(v.rows), cols(v.cols), stride(v.stride) {}

  const T* row(std::size_t r) const { return data + r * stride; }
};

float dot(std::span<const float> a, std::span<const float> b);
double dot(std::span<const double> a, std::span<const double> b);

// y += alpha * x
void axpy(std::span<float> y, float alpha, std::span<const float> x);
void axpy(std::span<double> y, double alpha, std::span<const double> x);

// C (+)= A * B^T     A: M x K, B: N x K, C: M x N
void gemm_nt(ConstMatView<float> a, ConstMatView<float> b, MatView<float> c, bool accumulate);
void gemm_nt(ConstMatView<double> a, ConstMatView<double> b, MatView<double> c, bool accumulate);

// C += A * B         A: M x K, B: K x N, C: M x N
void gemm_nn(ConstMatView<float> a, ConstMatView<float> b, MatView<float> c);
void gemm_nn(ConstMatView<double> a, ConstMatView<double> b, MatView<double> c);

// C += A^T * B       A: K x M, B: K x N, C: M x N
void gemm_tn(ConstMatView<float> a, ConstMatView<float> b, MatView<float> c);
void gemm_tn(ConstMatView<double> a, ConstMatView<double> b, MatView<double> c);

namespace scalar {
float dot(const float* a, const float* b, std::size_t n);
double dot(const double* a, const double* b, std::size_t n);
void axpy(float* y, float alpha, const float* x, std::size_t n);
void axpy(double* y, double alpha, const double* x, std::size_t n);
void gemm_nt(ConstMatView<float> a, ConstMatView<float> b, MatView<float> c, bool accumulate);
void gemm_nt(ConstMatView<double> a, ConstMatView<double> b, MatView<double> c, bool accumulate);
void gemm_nn(ConstMatView<float> a, ConstMatView<float> b, MatView<float> c);
void gemm_nn(ConstMatView<double> a, ConstMatView<double> b, MatView<double> c);
void gemm_tn(ConstMatView<float> a, ConstMatView<float> b, MatView<float> c);
void gemm_tn(ConstMatView<double> a, ConstMatView<double> b, MatView<double> c);
}  // namespace scalar

namespace avx2 {
float dot(const float* a, const float* b, std::size_t n);
double dot(const double* a, const double* b, std::size_t n);
void axpy(float* y, float alpha, const float* x, std::size_t n);
void axpy(double* y, double alpha, const double* x, std::size_t n);
void gemm_nt(ConstMatView<float> a, ConstMatView<float> b, MatView<float> c, bool accumulate);
void gemm_nt(ConstMatView<double> a, ConstMatView<double> b, MatView<double> c, bool accumulate);
void gemm_nn(ConstMatView<float> a, ConstMatView<float> b, MatView<float> c);
void gemm_nn(ConstMatView<double> a, ConstMatView<double> b, MatView<double> c);
void gemm_tn(ConstMatView<float> a, ConstMatView<float> b, MatView<float> c);
void gemm_tn(ConstMatView<double> a, ConstMatView<double> b, MatView<double> c);
}  // namespace avx2

}  // namespace qlens::kernels
