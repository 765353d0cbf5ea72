#include "quantlens/numkit.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

namespace qlens {

Matrix identity(std::size_t n) {
  Matrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
  return m;
}

Matrix transpose(const Matrix& a) {
  Matrix t(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) t(j, i) = a(i, j);
  return t;
}

Matrix matmul(const Matrix& a, const Matrix& b) {
  require(a.cols() == b.rows(), ErrorKind::InvalidInput, "matmul: inner dimension mismatch");
  Matrix c(a.rows(), b.cols());
  kernels::gemm_nn(a.view(), b.view(), c.view());
  return c;
}

Matrix matmul_tn(const Matrix& a, const Matrix& b) {
  require(a.rows() == b.rows(), ErrorKind::InvalidInput, "matmul_tn: row mismatch");
  Matrix c(a.cols(), b.cols());
  kernels::gemm_tn(a.view(), b.view(), c.view());
  return c;
}

double frobenius_norm(const Matrix& a) {
  const auto& v = a.values();
  return std::sqrt(kernels::dot(std::span<const double>(v), std::span<const double>(v)));
}

Matrix center_columns(const Matrix& a) {
  Matrix c = a;
  if (a.rows() == 0) return c;
  for (std::size_t j = 0; j < a.cols(); ++j) {
    double mean = 0.0;
    for (std::size_t i = 0; i < a.rows(); ++i) mean += a(i, j);
    mean /= static_cast<double>(a.rows());
    for (std::size_t i = 0; i < a.rows(); ++i) c(i, j) -= mean;
  }
  return c;
}

bool all_finite(const Matrix& a) {
  return std::all_of(a.values().begin(), a.values().end(), [](double x) { return std::isfinite(x); });
}

namespace {

constexpr int kMaxSweeps = 80;

// One-sided Jacobi on the columns of `a` (m >= n). Columns are held
// contiguously so each rotation touches two dense vectors.
SvdResult jacobi_tall(const Matrix& a) {
  const std::size_t m = a.rows();
  const std::size_t n = a.cols();
  std::vector<std::vector<double>> cols(n, std::vector<double>(m));
  std::vector<std::vector<double>> vcols(n, std::vector<double>(n, 0.0));
  for (std::size_t j = 0; j < n; ++j) {
    for (std::size_t i = 0; i < m; ++i) cols[j][i] = a(i, j);
    vcols[j][j] = 1.0;
  }

  const double tol = 1e-15;
  int sweep = 0;
  for (;; ++sweep) {
    if (sweep >= kMaxSweeps) {
      fail(ErrorKind::NumericalFailure, "svd did not converge after " + std::to_string(sweep) + " sweeps");
    }
    bool rotated = false;
    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        const double alpha = kernels::dot(std::span<const double>(cols[p]), std::span<const double>(cols[p]));
        const double beta = kernels::dot(std::span<const double>(cols[q]), std::span<const double>(cols[q]));
        const double gamma = kernels::dot(std::span<const double>(cols[p]), std::span<const double>(cols[q]));
        if (gamma == 0.0 || std::abs(gamma) <= tol * std::sqrt(alpha * beta)) continue;
        rotated = true;
        const double zeta = (beta - alpha) / (2.0 * gamma);
        const double t = std::copysign(1.0, zeta) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = c * t;
        auto rotate = [c, s](std::vector<double>& x, std::vector<double>& y) {
          for (std::size_t i = 0; i < x.size(); ++i) {
            const double xi = x[i];
            const double yi = y[i];
            x[i] = c * xi - s * yi;
            y[i] = s * xi + c * yi;
          }
        };
        rotate(cols[p], cols[q]);
        rotate(vcols[p], vcols[q]);
      }
    }
    if (!rotated) break;
  }

  std::vector<double> norms(n);
  for (std::size_t j = 0; j < n; ++j)
    norms[j] = std::sqrt(kernels::dot(std::span<const double>(cols[j]), std::span<const double>(cols[j])));
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) { return norms[x] > norms[y]; });

  SvdResult r{Matrix(m, n), std::vector<double>(n), Matrix(n, n)};
  const double smax = n > 0 ? norms[order[0]] : 0.0;
  const double rank_tol = std::max(1e-300, smax * 1e-13 * static_cast<double>(std::max(m, n)));
  std::vector<std::vector<double>> ucols;
  ucols.reserve(n);
  for (std::size_t k = 0; k < n; ++k) {
    const std::size_t j = order[k];
    r.s[k] = norms[j];
    std::vector<double> u(m, 0.0);
    if (norms[j] > rank_tol) {
      for (std::size_t i = 0; i < m; ++i) u[i] = cols[j][i] / norms[j];
    }
    ucols.push_back(std::move(u));
    for (std::size_t i = 0; i < n; ++i) r.v(i, k) = vcols[j][i];
  }

  // Complete U for (numerically) zero singular values with Gram-Schmidt
  // against the standard basis so the columns stay orthonormal.
  std::size_t next_basis = 0;
  for (std::size_t k = 0; k < n; ++k) {
    if (norms[order[k]] > rank_tol) continue;
    for (; next_basis < m; ++next_basis) {
      std::vector<double> e(m, 0.0);
      e[next_basis] = 1.0;
      for (int pass = 0; pass < 2; ++pass) {
        for (std::size_t o = 0; o < n; ++o) {
          if (o == k) continue;
          const auto& uo = ucols[o];
          const double d = kernels::dot(std::span<const double>(uo), std::span<const double>(e));
          if (d != 0.0) kernels::axpy(std::span<double>(e), -d, std::span<const double>(uo));
        }
      }
      const double nrm = std::sqrt(kernels::dot(std::span<const double>(e), std::span<const double>(e)));
      if (nrm > 1e-6) {
        for (auto& x : e) x /= nrm;
        ucols[k] = std::move(e);
        ++next_basis;
        break;
      }
    }
  }

  for (std::size_t k = 0; k < n; ++k) {
    // Deterministic sign: largest-magnitude entry of each V column positive.
    std::size_t arg = 0;
    for (std::size_t i = 1; i < n; ++i)
      if (std::abs(r.v(i, k)) > std::abs(r.v(arg, k))) arg = i;
    const double sign = r.v(arg, k) < 0.0 ? -1.0 : 1.0;
    for (std::size_t i = 0; i < n; ++i) r.v(i, k) *= sign;
    for (std::size_t i = 0; i < m; ++i) r.u(i, k) = ucols[k][i] * sign;
  }
  return r;
}

}  // namespace

SvdResult svd(const Matrix& a) {
  require(a.rows() >= 1 && a.cols() >= 1, ErrorKind::InvalidInput, "svd: empty matrix");
  require(all_finite(a), ErrorKind::InvalidInput, "svd: non-finite input");
  if (a.rows() >= a.cols()) return jacobi_tall(a);
  SvdResult t = jacobi_tall(transpose(a));
  SvdResult r{std::move(t.v), std::move(t.s), std::move(t.u)};
  // Re-apply the sign convention to the new V (old U).
  for (std::size_t k = 0; k < r.s.size(); ++k) {
    std::size_t arg = 0;
    for (std::size_t i = 1; i < r.v.rows(); ++i)
      if (std::abs(r.v(i, k)) > std::abs(r.v(arg, k))) arg = i;
    if (r.v(arg, k) < 0.0) {
      for (std::size_t i = 0; i < r.v.rows(); ++i) r.v(i, k) = -r.v(i, k);
      for (std::size_t i = 0; i < r.u.rows(); ++i) r.u(i, k) = -r.u(i, k);
    }
  }
  return r;
}

namespace {

std::vector<double> checked_distribution(std::span<const double> p, const char* what) {
  require(!p.empty(), ErrorKind::InvalidInput, std::string(what) + ": empty distribution");
  double sum = 0.0;
  for (double x : p) {
    require(std::isfinite(x) && x >= 0.0, ErrorKind::InvalidInput, std::string(what) + ": negative or non-finite entry");
    sum += x;
  }
  require(std::abs(sum - 1.0) <= 1e-6, ErrorKind::InvalidInput,
          std::string(what) + ": distribution does not sum to 1 (sum=" + std::to_string(sum) + ")");
  std::vector<double> out(p.begin(), p.end());
  for (auto& x : out) x /= sum;
  return out;
}

}  // namespace

double shannon_entropy(std::span<const double> p, bool base2) {
  const auto q = checked_distribution(p, "shannon_entropy");
  double h = 0.0;
  for (double x : q)
    if (x > 0.0) h -= x * std::log(x);
  return base2 ? h / std::log(2.0) : h;
}

double jsd(std::span<const double> p, std::span<const double> q) {
  require(p.size() == q.size(), ErrorKind::InvalidInput, "jsd: length mismatch");
  const auto a = checked_distribution(p, "jsd");
  const auto b = checked_distribution(q, "jsd");
  double d = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double m = 0.5 * (a[i] + b[i]);
    if (a[i] > 0.0) d += 0.5 * a[i] * std::log2(a[i] / m);
    if (b[i] > 0.0) d += 0.5 * b[i] * std::log2(b[i] / m);
  }
  return std::clamp(d, 0.0, 1.0);
}

double cosine_similarity(std::span<const double> a, std::span<const double> b, bool* degenerate) {
  require(a.size() == b.size(), ErrorKind::InvalidInput, "cosine_similarity: length mismatch");
  const double na = std::sqrt(kernels::dot(a, a));
  const double nb = std::sqrt(kernels::dot(b, b));
  if (na < 1e-12 || nb < 1e-12) {
    if (degenerate) *degenerate = true;
    return 0.0;
  }
  if (degenerate) *degenerate = false;
  return std::clamp(kernels::dot(a, b) / (na * nb), -1.0, 1.0);
}

double kurtosis(std::span<const double> x) {
  require(x.size() >= 4, ErrorKind::InvalidInput, "kurtosis: need at least 4 samples");
  const double n = static_cast<double>(x.size());
  double mean = 0.0;
  for (double v : x) mean += v;
  mean /= n;
  double m2 = 0.0;
  double m4 = 0.0;
  for (double v : x) {
    const double d = v - mean;
    const double d2 = d * d;
    m2 += d2;
    m4 += d2 * d2;
  }
  m2 /= n;
  m4 /= n;
  require(m2 > 1e-18, ErrorKind::DegenerateSample, "kurtosis: variance below 1e-18");
  return m4 / (m2 * m2);
}

std::vector<std::size_t> top_k_indices(std::span<const double> v, std::size_t k) {
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), 0);
  k = std::min(k, v.size());
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(),
                    [&](std::size_t a, std::size_t b) { return v[a] > v[b] || (v[a] == v[b] && a < b); });
  idx.resize(k);
  std::sort(idx.begin(), idx.end());
  return idx;
}

double jaccard_top_fraction(std::span<const double> a, std::span<const double> b, double fraction, std::size_t k_min) {
  require(a.size() == b.size(), ErrorKind::InvalidInput, "jaccard_top_fraction: length mismatch");
  require(fraction > 0.0 && fraction <= 1.0, ErrorKind::InvalidInput, "jaccard_top_fraction: fraction must be in (0, 1]");
  if (a.empty()) return 1.0;
  const auto n = a.size();
  std::size_t k = static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(n) - 1e-9));
  k = std::min(std::max(k, k_min), n);
  const auto ta = top_k_indices(a, k);
  const auto tb = top_k_indices(b, k);
  std::vector<std::size_t> inter;
  std::set_intersection(ta.begin(), ta.end(), tb.begin(), tb.end(), std::back_inserter(inter));
  const double uni = static_cast<double>(2 * k - inter.size());
  return static_cast<double>(inter.size()) / uni;
}

Matrix cholesky(const Matrix& h) {
  require(h.rows() == h.cols(), ErrorKind::InvalidInput, "cholesky: matrix not square");
  const std::size_t n = h.rows();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j)
      require(std::abs(h(i, j) - h(j, i)) <= 1e-8 * std::max(1.0, std::abs(h(i, j))), ErrorKind::InvalidInput,
              "cholesky: matrix not symmetric");
  Matrix l(n, n);
  for (std::size_t j = 0; j < n; ++j) {
    double d = h(j, j);
    for (std::size_t k = 0; k < j; ++k) d -= l(j, k) * l(j, k);
    if (!(d > 0.0) || !std::isfinite(d)) {
      fail(ErrorKind::NumericalFailure, "cholesky: matrix not positive definite at pivot " + std::to_string(j));
    }
    const double ljj = std::sqrt(d);
    l(j, j) = ljj;
    for (std::size_t i = j + 1; i < n; ++i) {
      double s = h(i, j);
      for (std::size_t k = 0; k < j; ++k) s -= l(i, k) * l(j, k);
      l(i, j) = s / ljj;
    }
  }
  return l;
}

Matrix cholesky_inverse(const Matrix& h) {
  const Matrix l = cholesky(h);
  const std::size_t n = l.rows();
  // Linv = L^{-1} (lower), then H^{-1} = Linv^T Linv.
  Matrix linv(n, n);
  for (std::size_t j = 0; j < n; ++j) {
    linv(j, j) = 1.0 / l(j, j);
    for (std::size_t i = j + 1; i < n; ++i) {
      double s = 0.0;
      for (std::size_t k = j; k < i; ++k) s -= l(i, k) * linv(k, j);
      linv(i, j) = s / l(i, i);
    }
  }
  Matrix inv = matmul_tn(linv, linv);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) {
      const double avg = 0.5 * (inv(i, j) + inv(j, i));
      inv(i, j) = avg;
      inv(j, i) = avg;
    }
  return inv;
}

}  // namespace qlens
