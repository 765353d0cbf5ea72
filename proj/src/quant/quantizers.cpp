#include <algorithm>
#include <cmath>
#include <limits>

#include "quantlens/error.hpp"
#include "quantlens/quant.hpp"
#include "quantlens/util.hpp"

namespace qlens {

std::string_view to_string(Algorithm a) {
  switch (a) {
    case Algorithm::Rtn: return "rtn";
    case Algorithm::Gptq: return "gptq";
    case Algorithm::AwqGptq: return "awq+gptq";
  }
  return "?";
}

Algorithm parse_algorithm(std::string_view s) {
  for (Algorithm a : {Algorithm::Rtn, Algorithm::Gptq, Algorithm::AwqGptq})
    if (to_string(a) == s) return a;
  fail(ErrorKind::InvalidConfig, "unknown quantization algorithm '" + std::string(s) + "'");
}

void QuantSpec::validate() const {
  if (bits != 2 && bits != 3 && bits != 4 && bits != 8 && bits != 16)
    fail(ErrorKind::InvalidConfig, "bits must be one of 2, 3, 4, 8, 16 (got " + std::to_string(bits) + ")");
  require(group_size > 0, ErrorKind::InvalidConfig, "group_size must be positive");
}

GroupParams group_params(std::span<const double> w, int bits) {
  require(!w.empty(), ErrorKind::InvalidInput, "group_params: empty group");
  const auto [mn, mx] = std::minmax_element(w.begin(), w.end());
  const double maxq = static_cast<double>((1 << bits) - 1);
  double scale = (*mx - *mn) / maxq;
  if (!(scale >= 1e-12)) scale = 1e-12;
  return {scale, std::llround(-*mn / scale)};
}

std::int32_t quantize_code(double w, const GroupParams& g, int bits) {
  const std::int64_t maxq = (std::int64_t{1} << bits) - 1;
  const std::int64_t q = std::llround(w / g.scale) + g.zero;
  return static_cast<std::int32_t>(std::clamp<std::int64_t>(q, 0, maxq));
}

double dequantize_code(std::int32_t q, const GroupParams& g) {
  return g.scale * static_cast<double>(static_cast<std::int64_t>(q) - g.zero);
}

namespace {

void check_finite(const Matrix& w) {
  require(all_finite(w), ErrorKind::InvalidInput, "quantizer: weights must be finite");
}

std::vector<char> protected_mask(std::size_t rows, std::span<const int> protected_rows) {
  std::vector<char> mask(rows, 0);
  for (int r : protected_rows) {
    if (r < 0 || static_cast<std::size_t>(r) >= rows)
      fail(ErrorKind::InvalidConfig, "protected row " + std::to_string(r) + " out of range");
    mask[r] = 1;
  }
  return mask;
}

Codebook empty_codebook(const Matrix& w, const QuantSpec& spec) {
  Codebook cb;
  cb.rows = w.rows();
  cb.cols = w.cols();
  cb.group_size = static_cast<std::size_t>(spec.group_size);
  cb.scales.assign(cb.rows * cb.n_groups(), 0.0);
  cb.zeros.assign(cb.rows * cb.n_groups(), 0);
  cb.codes.assign(cb.rows * cb.cols, 0);
  cb.row_bits.assign(cb.rows, spec.bits);
  return cb;
}

// Plain RTN of one row into `out` and the codebook.
void rtn_row(const Matrix& w, std::size_t r, int bits, Codebook& cb, Matrix& out) {
  const std::size_t cols = w.cols(), g = cb.group_size;
  const auto row = w.row(r);
  for (std::size_t j0 = 0, gi = 0; j0 < cols; j0 += g, ++gi) {
    const std::size_t len = std::min(g, cols - j0);
    const GroupParams p = group_params(row.subspan(j0, len), bits);
    cb.scales[r * cb.n_groups() + gi] = p.scale;
    cb.zeros[r * cb.n_groups() + gi] = p.zero;
    for (std::size_t j = j0; j < j0 + len; ++j) {
      const std::int32_t q = quantize_code(row[j], p, bits);
      cb.codes[r * cols + j] = q;
      out(r, j) = dequantize_code(q, p);
    }
  }
  cb.row_bits[r] = bits;
}

void overwrite_protected(const Matrix& w, std::span<const int> protected_rows, QuantResult& res) {
  for (int r : protected_rows) rtn_row(w, static_cast<std::size_t>(r), 8, res.codebook, res.dequant);
}

QuantResult passthrough(const Matrix& w, const QuantSpec& spec) {
  QuantResult r{w, {}};
  r.codebook.rows = w.rows();
  r.codebook.cols = w.cols();
  r.codebook.group_size = static_cast<std::size_t>(spec.group_size);
  r.codebook.row_bits.assign(w.rows(), 16);
  return r;
}

// Upper factor U with H^-1 = U^T U. One retry with ten times the default damping.
Matrix inverse_upper_factor(const Matrix& h) {
  try {
    return transpose(cholesky(cholesky_inverse(h)));
  } catch (const Error& e) {
    if (e.kind() != ErrorKind::NumericalFailure) throw;
  }
  double mean_diag = 0.0;
  for (std::size_t i = 0; i < h.rows(); ++i) mean_diag += h(i, i);
  mean_diag /= static_cast<double>(h.rows());
  Matrix damped = h;
  const double lambda = 10.0 * 0.01 * std::max(mean_diag, 1e-12);
  for (std::size_t i = 0; i < h.rows(); ++i) damped(i, i) += lambda;
  warn("gptq: Cholesky failed, retrying with damping " + std::to_string(lambda));
  try {
    return transpose(cholesky(cholesky_inverse(damped)));
  } catch (const Error& e) {
    if (e.kind() == ErrorKind::NumericalFailure)
      fail(ErrorKind::NumericalFailure, std::string("gptq: Cholesky failed after damping retry: ") + e.what());
    throw;
  }
}

}  // namespace

QuantResult rtn_quantize(const Matrix& w, const QuantSpec& spec, std::span<const int> protected_rows) {
  spec.validate();
  check_finite(w);
  const auto mask = protected_mask(w.rows(), protected_rows);
  if (spec.passthrough()) {
    QuantResult r = passthrough(w, spec);
    if (!protected_rows.empty()) {
      r.codebook = empty_codebook(w, spec);
      r.codebook.row_bits.assign(w.rows(), 16);
      overwrite_protected(w, protected_rows, r);
    }
    return r;
  }
  QuantResult res{Matrix(w.rows(), w.cols()), empty_codebook(w, spec)};
  for (std::size_t r = 0; r < w.rows(); ++r) rtn_row(w, r, mask[r] ? 8 : spec.bits, res.codebook, res.dequant);
  return res;
}

QuantResult gptq_quantize(const Matrix& w, const Matrix& h, const QuantSpec& spec, std::span<const int> protected_rows) {
  spec.validate();
  check_finite(w);
  protected_mask(w.rows(), protected_rows);
  if (spec.passthrough()) return rtn_quantize(w, spec, protected_rows);
  require(h.rows() == w.cols() && h.cols() == w.cols(), ErrorKind::InvalidInput,
          "gptq: Hessian dimension must equal the input dimension of W");

  const Matrix U = inverse_upper_factor(h);
  const std::size_t rows = w.rows(), cols = w.cols();
  const std::size_t G = static_cast<std::size_t>(spec.group_size);
  const std::size_t B = std::min<std::size_t>(G, 32);
  const int bits = spec.bits;

  Matrix W = w;
  QuantResult res{Matrix(rows, cols), empty_codebook(w, spec)};
  Codebook& cb = res.codebook;
  std::vector<GroupParams> cur(rows, GroupParams{1.0, 0});
  Matrix err;

  for (std::size_t i1 = 0; i1 < cols; i1 += B) {
    const std::size_t i2 = std::min(i1 + B, cols), count = i2 - i1;
    err = Matrix(rows, count);
    for (std::size_t i = i1; i < i2; ++i) {
      if (i % G == 0) {
        const std::size_t len = std::min(G, cols - i);
        for (std::size_t r = 0; r < rows; ++r) {
          cur[r] = group_params(W.row(r).subspan(i, len), bits);
          cb.scales[r * cb.n_groups() + i / G] = cur[r].scale;
          cb.zeros[r * cb.n_groups() + i / G] = cur[r].zero;
        }
      }
      const double d = U(i, i);
      for (std::size_t r = 0; r < rows; ++r) {
        const double wv = W(r, i);
        const std::int32_t q = quantize_code(wv, cur[r], bits);
        const double dq = dequantize_code(q, cur[r]);
        cb.codes[r * cols + i] = q;
        res.dequant(r, i) = dq;
        const double e = (wv - dq) / d;
        err(r, i - i1) = e;
        for (std::size_t j = i + 1; j < i2; ++j) W(r, j) -= e * U(i, j);
      }
    }
    // Lazy batch update of the columns after the block.
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t j = i2; j < cols; ++j) {
        double acc = 0.0;
        for (std::size_t i = i1; i < i2; ++i) acc += err(r, i - i1) * U(i, j);
        W(r, j) -= acc;
      }
    }
  }
  overwrite_protected(w, protected_rows, res);
  return res;
}

Matrix hessian_from_inputs(const Matrix& x, double damping_frac) {
  require(x.rows() > 0, ErrorKind::InvalidInput, "hessian: no calibration rows");
  Matrix h = matmul_tn(x, x);
  const double f = 2.0 / static_cast<double>(x.rows());
  for (auto& v : h.values()) v *= f;
  double mean_diag = 0.0;
  for (std::size_t i = 0; i < h.rows(); ++i) mean_diag += h(i, i);
  mean_diag /= static_cast<double>(h.rows());
  double lambda = damping_frac * mean_diag;
  if (!(lambda > 0.0)) {
    warn("hessian: degenerate calibration activations, using unit damping");
    lambda = std::max(damping_frac, 1e-8);
  }
  for (std::size_t i = 0; i < h.rows(); ++i) h(i, i) += lambda;
  return h;
}

double output_error(const Matrix& w, const Matrix& w_hat, const Matrix& h) {
  require(w.rows() == w_hat.rows() && w.cols() == w_hat.cols() && h.rows() == w.cols(), ErrorKind::InvalidInput,
          "output_error: shape mismatch");
  double total = 0.0;
  std::vector<double> d(w.cols());
  for (std::size_t r = 0; r < w.rows(); ++r) {
    for (std::size_t j = 0; j < w.cols(); ++j) d[j] = w_hat(r, j) - w(r, j);
    for (std::size_t i = 0; i < w.cols(); ++i) {
      if (d[i] == 0.0) continue;
      total += d[i] * kernels::dot(std::span<const double>(h.row(i)), std::span<const double>(d));
    }
  }
  return total;
}

ActivationStats activation_stats(const Matrix& x, double damping_frac) {
  require(x.rows() > 0, ErrorKind::InvalidInput, "activation_stats: no calibration rows");
  ActivationStats s;
  s.mean_abs.assign(x.cols(), 0.0);
  for (std::size_t i = 0; i < x.rows(); ++i)
    for (std::size_t j = 0; j < x.cols(); ++j) s.mean_abs[j] += std::abs(x(i, j));
  for (auto& v : s.mean_abs) v /= static_cast<double>(x.rows());
  s.second_moment = matmul_tn(x, x);
  for (auto& v : s.second_moment.values()) v /= static_cast<double>(x.rows());
  s.hessian = hessian_from_inputs(x, damping_frac);
  return s;
}

namespace {

std::vector<double> awq_scales(const std::vector<double>& mean_abs, double beta) {
  std::vector<double> s(mean_abs.size(), 1.0);
  if (beta == 0.0) return s;
  for (std::size_t j = 0; j < s.size(); ++j) s[j] = std::max(std::pow(std::max(mean_abs[j], 1e-8), beta), 1e-4);
  const auto [mn, mx] = std::minmax_element(s.begin(), s.end());
  const double norm = std::sqrt(*mn * *mx);
  for (auto& v : s) v /= norm;
  return s;
}

Matrix scale_columns(const Matrix& w, const std::vector<double>& s, bool inverse) {
  Matrix out = w;
  for (std::size_t r = 0; r < w.rows(); ++r)
    for (std::size_t j = 0; j < w.cols(); ++j) out(r, j) = inverse ? w(r, j) / s[j] : w(r, j) * s[j];
  return out;
}

}  // namespace

AwqResult awq_scale_search(const Matrix& w, const ActivationStats& stats, const QuantSpec& spec,
                           std::span<const int> protected_rows) {
  spec.validate();
  check_finite(w);
  require(stats.mean_abs.size() == w.cols(), ErrorKind::InvalidInput, "awq: activation statistics dimension mismatch");
  AwqResult best;
  if (spec.passthrough()) {
    best.scales.assign(w.cols(), 1.0);
    best.quant = rtn_quantize(w, spec, protected_rows);
    return best;
  }
  QuantSpec rtn = spec;
  rtn.algorithm = Algorithm::Rtn;
  double best_loss = std::numeric_limits<double>::infinity();
  for (double beta : kAwqBetaGrid) {
    const auto s = awq_scales(stats.mean_abs, beta);
    const QuantResult q = rtn_quantize(scale_columns(w, s, false), rtn);
    const double loss = output_error(w, scale_columns(q.dequant, s, true), stats.second_moment);
    best.loss_by_beta.push_back(loss);
    if (loss < best_loss) {
      best_loss = loss;
      best.beta = beta;
      best.scales = s;
    }
  }
  const Matrix ws = scale_columns(w, best.scales, false);
  if (spec.algorithm == Algorithm::Rtn) {
    best.quant = rtn_quantize(ws, rtn);
  } else {
    // Inputs become x / s, so the Hessian transforms as diag(1/s) H diag(1/s).
    Matrix hs = stats.hessian;
    for (std::size_t i = 0; i < hs.rows(); ++i)
      for (std::size_t j = 0; j < hs.cols(); ++j) hs(i, j) /= best.scales[i] * best.scales[j];
    best.quant = gptq_quantize(ws, hs, spec);
  }
  best.quant.dequant = scale_columns(best.quant.dequant, best.scales, true);
  overwrite_protected(w, protected_rows, best.quant);
  return best;
}

namespace {

// PSD square root and its pseudo-inverse from a symmetric eigendecomposition.
void psd_sqrt(const Matrix& m, Matrix& root, Matrix& pinv_root) {
  const SvdResult e = svd(m);
  const std::size_t n = m.rows();
  root = Matrix(n, n);
  pinv_root = Matrix(n, n);
  const double tol = (e.s.empty() ? 0.0 : e.s.front()) * 1e-10;
  for (std::size_t k = 0; k < e.s.size(); ++k) {
    const double sq = std::sqrt(std::max(e.s[k], 0.0));
    const double inv = e.s[k] > tol ? 1.0 / sq : 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double vi = e.v(i, k);
      if (vi == 0.0) continue;
      for (std::size_t j = 0; j < n; ++j) {
        root(i, j) += sq * vi * e.v(j, k);
        pinv_root(i, j) += inv * vi * e.v(j, k);
      }
    }
  }
}

}  // namespace

LowRankCompensator::LowRankCompensator(const Matrix& w_fp, const Matrix& w_q, const Matrix* second_moment) {
  require(w_fp.rows() == w_q.rows() && w_fp.cols() == w_q.cols(), ErrorKind::InvalidInput,
          "lowrank: weight shapes differ");
  Matrix e = w_fp;
  for (std::size_t i = 0; i < e.size(); ++i) e.data()[i] -= w_q.data()[i];
  if (second_moment) {
    require(second_moment->rows() == w_fp.cols() && second_moment->cols() == w_fp.cols(), ErrorKind::InvalidInput,
            "lowrank: second-moment dimension mismatch");
    Matrix root;
    psd_sqrt(*second_moment, root, unweight_);
    e = matmul(e, root);
  }
  svd_ = svd(e);
}

Matrix LowRankCompensator::correction(int rank) const {
  require(rank >= 0, ErrorKind::InvalidInput, "lowrank: rank must be non-negative");
  if (rank > max_rank()) {
    warn("lowrank: rank " + std::to_string(rank) + " exceeds min(dims) = " + std::to_string(max_rank()) + ", clamping");
    rank = max_rank();
  }
  const std::size_t m = svd_.u.rows(), n = svd_.v.rows();
  Matrix out(m, n);
  for (int k = 0; k < rank; ++k) {
    const double s = svd_.s[k];
    for (std::size_t i = 0; i < m; ++i) {
      const double a = s * svd_.u(i, k);
      if (a == 0.0) continue;
      for (std::size_t j = 0; j < n; ++j) out(i, j) += a * svd_.v(j, k);
    }
  }
  if (!unweight_.empty()) out = matmul(out, unweight_);
  return out;
}

Matrix lowrank_compensate(const Matrix& w_fp, const Matrix& w_q, int rank, const Matrix* second_moment) {
  require(rank >= 1, ErrorKind::InvalidInput, "lowrank: rank must be >= 1");
  return LowRankCompensator(w_fp, w_q, second_moment).correction(rank);
}

}  // namespace qlens
