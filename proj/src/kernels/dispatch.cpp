#include <atomic>

#include "quantlens/error.hpp"
#include "quantlens/kernels.hpp"

namespace qlens::kernels {
namespace {

bool cpu_has_avx2() {
#if defined(__x86_64__) || defined(__i386__)
  __builtin_cpu_init();
  return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
  return false;
#endif
}

Isa detect() {
  if (cpu_has_avx2()) return Isa::Avx2;
  return Isa::Scalar;
}

std::atomic<Isa>& current() {
  static std::atomic<Isa> isa{detect()};
  return isa;
}

bool use_avx2() { return current().load(std::memory_order_relaxed) == Isa::Avx2; }

}  // namespace

std::string_view to_string(Isa isa) { return isa == Isa::Avx2 ? "avx2" : "scalar"; }

bool isa_supported(Isa isa) { return isa == Isa::Scalar || cpu_has_avx2(); }

Isa active_isa() { return current().load(); }

void set_isa(Isa isa) {
  require(isa_supported(isa), ErrorKind::InvalidConfig, "ISA not supported by this CPU: " + std::string(to_string(isa)));
  current().store(isa);
}

float dot(std::span<const float> a, std::span<const float> b) {
  require(a.size() == b.size(), ErrorKind::InvalidInput, "dot: length mismatch");
  return use_avx2() ? avx2::dot(a.data(), b.data(), a.size()) : scalar::dot(a.data(), b.data(), a.size());
}

double dot(std::span<const double> a, std::span<const double> b) {
  require(a.size() == b.size(), ErrorKind::InvalidInput, "dot: length mismatch");
  return use_avx2() ? avx2::dot(a.data(), b.data(), a.size()) : scalar::dot(a.data(), b.data(), a.size());
}

void axpy(std::span<float> y, float alpha, std::span<const float> x) {
  require(y.size() == x.size(), ErrorKind::InvalidInput, "axpy: length mismatch");
  use_avx2() ? avx2::axpy(y.data(), alpha, x.data(), x.size()) : scalar::axpy(y.data(), alpha, x.data(), x.size());
}

void axpy(std::span<double> y, double alpha, std::span<const double> x) {
  require(y.size() == x.size(), ErrorKind::InvalidInput, "axpy: length mismatch");
  use_avx2() ? avx2::axpy(y.data(), alpha, x.data(), x.size()) : scalar::axpy(y.data(), alpha, x.data(), x.size());
}

namespace {

template <typename T>
void check_nt(ConstMatView<T> a, ConstMatView<T> b, MatView<T> c) {
  require(a.cols == b.cols && c.rows == a.rows && c.cols == b.rows, ErrorKind::InvalidInput, "gemm_nt: shape mismatch");
}
template <typename T>
void check_nn(ConstMatView<T> a, ConstMatView<T> b, MatView<T> c) {
  require(a.cols == b.rows && c.rows == a.rows && c.cols == b.cols, ErrorKind::InvalidInput, "gemm_nn: shape mismatch");
}
template <typename T>
void check_tn(ConstMatView<T> a, ConstMatView<T> b, MatView<T> c) {
  require(a.rows == b.rows && c.rows == a.cols && c.cols == b.cols, ErrorKind::InvalidInput, "gemm_tn: shape mismatch");
}

}  // namespace

void gemm_nt(ConstMatView<float> a, ConstMatView<float> b, MatView<float> c, bool accumulate) {
  check_nt(a, b, c);
  use_avx2() ? avx2::gemm_nt(a, b, c, accumulate) : scalar::gemm_nt(a, b, c, accumulate);
}
void gemm_nt(ConstMatView<double> a, ConstMatView<double> b, MatView<double> c, bool accumulate) {
  check_nt(a, b, c);
  use_avx2() ? avx2::gemm_nt(a, b, c, accumulate) : scalar::gemm_nt(a, b, c, accumulate);
}
void gemm_nn(ConstMatView<float> a, ConstMatView<float> b, MatView<float> c) {
  check_nn(a, b, c);
  use_avx2() ? avx2::gemm_nn(a, b, c) : scalar::gemm_nn(a, b, c);
}
void gemm_nn(ConstMatView<double> a, ConstMatView<double> b, MatView<double> c) {
  check_nn(a, b, c);
  use_avx2() ? avx2::gemm_nn(a, b, c) : scalar::gemm_nn(a, b, c);
}
void gemm_tn(ConstMatView<float> a, ConstMatView<float> b, MatView<float> c) {
  check_tn(a, b, c);
  use_avx2() ? avx2::gemm_tn(a, b, c) : scalar::gemm_tn(a, b, c);
}
void gemm_tn(ConstMatView<double> a, ConstMatView<double> b, MatView<double> c) {
  check_tn(a, b, c);
  use_avx2() ? avx2::gemm_tn(a, b, c) : scalar::gemm_tn(a, b, c);
}

}  // namespace qlens::kernels
