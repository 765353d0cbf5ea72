#pragma once
// Dense linear algebra and statistics used across the lab. Metric math runs
// in double; model weights use the float instantiation of BasicMatrix.

#include <cstddef>
#include <span>
#include <vector>

#include "quantlens/error.hpp"
#include "quantlens/kernels.hpp"

namespace qlens {

template <typename T>
class BasicMatrix {
 public:
  BasicMatrix() = default;
  BasicMatrix(std::size_t rows, std::size_t cols, T fill = T(0)) : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  BasicMatrix(std::size_t rows, std::size_t cols, std::vector<T> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    require(data_.size() == rows_ * cols_, ErrorKind::InvalidInput, "matrix data length does not match shape");
  }

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  T& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  const T& operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<T> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const T> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::vector<T>& values() { return data_; }
  const std::vector<T>& values() const { return data_; }

  kernels::MatView<T> view() { return {data_.data(), rows_, cols_, cols_}; }
  kernels::ConstMatView<T> view() const { return {data_.data(), rows_, cols_, cols_}; }

  template <typename U>
  BasicMatrix<U> cast() const {
    BasicMatrix<U> out(rows_, cols_);
    for (std::size_t i = 0; i < data_.size(); ++i) out.data()[i] = static_cast<U>(data_[i]);
    return out;
  }

  bool operator==(const BasicMatrix&) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<T> data_;
};

using Matrix = BasicMatrix<double>;
using MatrixF = BasicMatrix<float>;

struct SvdResult {
  Matrix u;               // m x r
  std::vector<double> s;  // r, non-increasing
  Matrix v;               // n x r, right singular vectors as columns
};

Matrix identity(std::size_t n);
Matrix transpose(const Matrix& a);
Matrix matmul(const Matrix& a, const Matrix& b);
// a^T * b without materializing the transpose.
Matrix matmul_tn(const Matrix& a, const Matrix& b);
double frobenius_norm(const Matrix& a);
Matrix center_columns(const Matrix& a);
bool all_finite(const Matrix& a);

// Thin SVD by one-sided Jacobi. Sign convention: the largest-magnitude entry
// of every V column is positive.
SvdResult svd(const Matrix& a);

double shannon_entropy(std::span<const double> p, bool base2 = true);
// Jensen-Shannon divergence in bits.
double jsd(std::span<const double> p, std::span<const double> q);
// Returns 0 and sets *degenerate when either norm is below 1e-12.
double cosine_similarity(std::span<const double> a, std::span<const double> b, bool* degenerate = nullptr);
// Pearson kurtosis m4 / m2^2 with population moments (normal => 3).
double kurtosis(std::span<const double> x);

inline constexpr std::size_t kJaccardMinCount = 4;
// Indices of the k largest entries; ties go to the lower index.
std::vector<std::size_t> top_k_indices(std::span<const double> v, std::size_t k);
double jaccard_top_fraction(std::span<const double> a, std::span<const double> b, double fraction,
                            std::size_t k_min = kJaccardMinCount);

// Lower-triangular L with h = L L^T. Throws NumericalFailure if not PD.
Matrix cholesky(const Matrix& h);
Matrix cholesky_inverse(const Matrix& h);

}  // namespace qlens
