#include "quantlens/diagnostics.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "quantlens/error.hpp"
#include "quantlens/util.hpp"

namespace qlens {

using nlohmann::json;

namespace {

const MatrixF& site_of(const LayerTrace& t, PatchSite s) {
  switch (s) {
    case PatchSite::ResidualOut: return t.residual_out;
    case PatchSite::AttnOut: return t.attn_out;
    case PatchSite::FfnOut: return t.ffn_out;
  }
  return t.residual_out;
}

const char* site_name(PatchSite s) {
  switch (s) {
    case PatchSite::ResidualOut: return "residual_out";
    case PatchSite::AttnOut: return "attn_out";
    case PatchSite::FfnOut: return "ffn_out";
  }
  return "?";
}

std::vector<double> row_of(const MatrixF& m, int position) {
  require(position >= 0 && static_cast<std::size_t>(position) < m.rows(), ErrorKind::InvalidInput,
          "diagnostics: position out of range");
  const auto r = m.row(position);
  return {r.begin(), r.end()};
}

void check_pair(const ForwardTrace& fp, const ForwardTrace& q) {
  require(fp.layers.size() == q.layers.size() && fp.seq_len == q.seq_len, ErrorKind::InvalidInput,
          "diagnostics: trace shapes differ");
}

const MatrixF& need(const MatrixF& m, const char* what, std::size_t layer) {
  if (m.empty()) fail(ErrorKind::TraceIncomplete, std::string(what) + " not captured at layer " + std::to_string(layer));
  return m;
}

LayerCurve make_curve(std::string metric, std::string position, std::size_t L) {
  LayerCurve c;
  c.metric = std::move(metric);
  c.position = std::move(position);
  c.mean.assign(L, 0.0);
  c.dispersion.assign(L, 0.0);
  c.n.assign(L, 0);
  return c;
}

void mean_std(const std::vector<double>& v, double& mean, double& sd) {
  mean = sd = 0.0;
  if (v.empty()) return;
  for (double x : v) mean += x;
  mean /= static_cast<double>(v.size());
  double s = 0.0;
  for (double x : v) s += (x - mean) * (x - mean);
  sd = std::sqrt(s / static_cast<double>(v.size()));
}

}  // namespace

double LayerCurve::overall_mean() const {
  if (mean.empty()) return 0.0;
  double s = 0.0;
  for (double v : mean) s += v;
  return s / static_cast<double>(mean.size());
}

std::string LayerCurve::to_csv() const {
  std::ostringstream os;
  os.precision(10);
  os << "layer,mean,std,n\n";
  for (std::size_t l = 0; l < mean.size(); ++l) os << l << ',' << mean[l] << ',' << dispersion[l] << ',' << n[l] << '\n';
  return os.str();
}

json LayerCurve::to_json() const {
  return json{{"metric", metric}, {"position", position}, {"mean", mean}, {"std", dispersion}, {"n", n}};
}

LayerCurve mean_curves(std::span<const LayerCurve> curves) {
  require(!curves.empty(), ErrorKind::InvalidInput, "mean_curves: no curves");
  const std::size_t L = curves[0].n_layers();
  LayerCurve out = make_curve(curves[0].metric, curves[0].position, L);
  for (std::size_t l = 0; l < L; ++l) {
    std::vector<double> v;
    for (const auto& c : curves) {
      require(c.n_layers() == L, ErrorKind::InvalidInput, "mean_curves: layer count mismatch");
      v.push_back(c.mean[l]);
    }
    mean_std(v, out.mean[l], out.dispersion[l]);
    out.n[l] = v.size();
  }
  return out;
}

LayerCurve attn_entropy_profile(const ForwardTrace& trace, std::span<const int> positions) {
  require(trace.captured.attention, ErrorKind::TraceIncomplete, "entropy profile needs attention captures");
  const std::size_t L = trace.layers.size();
  std::vector<int> pos(positions.begin(), positions.end());
  if (pos.empty())
    for (std::size_t t = 0; t < trace.seq_len; ++t) pos.push_back(static_cast<int>(t));
  LayerCurve c = make_curve("attn_entropy", positions.empty() ? "all" : "selected", L);
  for (std::size_t l = 0; l < L; ++l) {
    const auto& heads = trace.layers[l].attention;
    if (heads.empty()) fail(ErrorKind::TraceIncomplete, "attention not captured at layer " + std::to_string(l));
    std::vector<double> per_pos;
    for (int t : pos) {
      require(t >= 0 && static_cast<std::size_t>(t) < trace.seq_len, ErrorKind::InvalidInput, "entropy: position out of range");
      if (t == 0) continue;
      double acc = 0.0;
      for (const auto& a : heads) {
        std::vector<double> row(a.row(t).begin(), a.row(t).begin() + t + 1);
        acc += shannon_entropy(row, true) / std::log2(static_cast<double>(t + 1));
      }
      per_pos.push_back(acc / static_cast<double>(heads.size()));
    }
    mean_std(per_pos, c.mean[l], c.dispersion[l]);
    c.n[l] = per_pos.size();
  }
  return c;
}

LayerCurve attn_jsd_profile(const ForwardTrace& fp, const ForwardTrace& q, int position, JsdMode mode) {
  check_pair(fp, q);
  const std::size_t L = fp.layers.size();
  require(position >= 0 && static_cast<std::size_t>(position) < fp.seq_len, ErrorKind::InvalidInput,
          "jsd: position out of range");
  LayerCurve c = make_curve("attn_jsd", std::to_string(position), L);
  const std::size_t width = static_cast<std::size_t>(position) + 1;
  for (std::size_t l = 0; l < L; ++l) {
    const auto& hf = fp.layers[l].attention;
    const auto& hq = q.layers[l].attention;
    if (hf.empty() || hq.empty()) fail(ErrorKind::TraceIncomplete, "attention not captured at layer " + std::to_string(l));
    require(hf.size() == hq.size(), ErrorKind::InvalidInput, "jsd: head count mismatch");
    std::vector<double> vals;
    std::vector<double> avg_f(width, 0.0), avg_q(width, 0.0);
    for (std::size_t h = 0; h < hf.size(); ++h) {
      require(hf[h].rows() == hq[h].rows() && hf[h].cols() == hq[h].cols(), ErrorKind::InvalidInput,
              "jsd: attention shape mismatch");
      std::vector<double> pf(hf[h].row(position).begin(), hf[h].row(position).begin() + width);
      std::vector<double> pq(hq[h].row(position).begin(), hq[h].row(position).begin() + width);
      if (mode == JsdMode::PerHeadMean) {
        vals.push_back(jsd(pf, pq));
      } else {
        for (std::size_t i = 0; i < width; ++i) {
          avg_f[i] += pf[i] / static_cast<double>(hf.size());
          avg_q[i] += pq[i] / static_cast<double>(hf.size());
        }
      }
    }
    if (mode == JsdMode::HeadAveragedDistribution) vals.push_back(jsd(avg_f, avg_q));
    mean_std(vals, c.mean[l], c.dispersion[l]);
    c.n[l] = vals.size();
  }
  return c;
}

SignFlipCurve gate_sign_flip_rate(const ForwardTrace& fp, const ForwardTrace& q, int position) {
  check_pair(fp, q);
  const std::size_t L = fp.layers.size();
  SignFlipCurve out{make_curve("gate_sfr", std::to_string(position), L), std::vector<double>(L, 0.0)};
  for (std::size_t l = 0; l < L; ++l) {
    const auto a = row_of(need(fp.layers[l].gate_preact, "gate_preact", l), position);
    const auto b = row_of(need(q.layers[l].gate_preact, "gate_preact", l), position);
    require(a.size() == b.size(), ErrorKind::InvalidInput, "sfr: width mismatch");
    std::size_t flips = 0, used = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
      if (std::abs(a[i]) < 1e-9 || std::abs(b[i]) < 1e-9) continue;
      ++used;
      if ((a[i] > 0) != (b[i] > 0)) ++flips;
    }
    out.curve.mean[l] = used ? static_cast<double>(flips) / static_cast<double>(used) : 0.0;
    out.curve.n[l] = used;
    out.excluded_fraction[l] = a.empty() ? 0.0 : static_cast<double>(a.size() - used) / static_cast<double>(a.size());
  }
  return out;
}

LayerCurve expert_jaccard_profile(const ForwardTrace& fp, const ForwardTrace& q, int position, double fraction) {
  check_pair(fp, q);
  const std::size_t L = fp.layers.size();
  LayerCurve c = make_curve("expert_jaccard", std::to_string(position), L);
  for (std::size_t l = 0; l < L; ++l) {
    auto a = row_of(need(fp.layers[l].h_key, "h_key", l), position);
    auto b = row_of(need(q.layers[l].h_key, "h_key", l), position);
    for (auto& v : a) v = std::abs(v);
    for (auto& v : b) v = std::abs(v);
    c.mean[l] = jaccard_top_fraction(a, b, fraction);
    c.n[l] = 1;
  }
  return c;
}

LayerCurve value_cosine_profile(const ForwardTrace& fp, const ForwardTrace& q, int position, PatchSite site) {
  check_pair(fp, q);
  const std::size_t L = fp.layers.size();
  LayerCurve c = make_curve(std::string("cosine_") + site_name(site), std::to_string(position), L);
  for (std::size_t l = 0; l < L; ++l) {
    const auto a = row_of(need(site_of(fp.layers[l], site), site_name(site), l), position);
    const auto b = row_of(need(site_of(q.layers[l], site), site_name(site), l), position);
    c.mean[l] = cosine_similarity(a, b);
    c.n[l] = 1;
  }
  return c;
}

double linear_cka(const Matrix& x, const Matrix& y) {
  require(x.rows() == y.rows(), ErrorKind::InvalidInput, "linear_cka: sample counts differ");
  const Matrix xc = center_columns(x), yc = center_columns(y);
  const double num = std::pow(frobenius_norm(matmul_tn(yc, xc)), 2);
  const double dx = frobenius_norm(matmul_tn(xc, xc));
  const double dy = frobenius_norm(matmul_tn(yc, yc));
  if (dx < 1e-12 || dy < 1e-12) return 0.0;
  return std::clamp(num / (dx * dy), 0.0, 1.0);
}

Matrix activation_matrix(std::span<const ForwardTrace> traces, int layer, PatchSite site, std::span<const int> positions) {
  require(traces.size() == positions.size(), ErrorKind::InvalidInput, "activation_matrix: one position per trace required");
  require(!traces.empty(), ErrorKind::InsufficientSamples, "activation_matrix: no traces");
  Matrix m;
  for (std::size_t i = 0; i < traces.size(); ++i) {
    require(layer >= 0 && static_cast<std::size_t>(layer) < traces[i].layers.size(), ErrorKind::InvalidInput,
            "activation_matrix: layer out of range");
    const auto r = row_of(need(site_of(traces[i].layers[layer], site), site_name(site), layer), positions[i]);
    if (i == 0) m = Matrix(traces.size(), r.size());
    require(r.size() == m.cols(), ErrorKind::InvalidInput, "activation_matrix: width mismatch");
    std::copy(r.begin(), r.end(), m.row(i).begin());
  }
  return m;
}

double CkaHeatmap::diagonal_mean() const {
  const std::size_t n = std::min(values.rows(), values.cols());
  if (n == 0) return 0.0;
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += values(i, i);
  return s / static_cast<double>(n);
}

std::string CkaHeatmap::to_csv() const {
  std::ostringstream os;
  os.precision(10);
  os << "fp_layer";
  for (std::size_t j = 0; j < values.cols(); ++j) os << ",q" << j;
  os << '\n';
  for (std::size_t i = 0; i < values.rows(); ++i) {
    os << i;
    for (std::size_t j = 0; j < values.cols(); ++j) os << ',' << values(i, j);
    os << '\n';
  }
  return os.str();
}

json CkaHeatmap::to_json() const {
  json rows = json::array();
  for (std::size_t i = 0; i < values.rows(); ++i) rows.push_back(std::vector<double>(values.row(i).begin(), values.row(i).end()));
  return json{{"site", site_name(site)}, {"position", position}, {"diagonal_mean", diagonal_mean()}, {"values", rows}};
}

CkaHeatmap cka_heatmap(std::span<const ForwardTrace> fp, std::span<const ForwardTrace> q, PatchSite site,
                       std::span<const int> positions, const std::string& position_label) {
  require(fp.size() == q.size(), ErrorKind::InvalidInput, "cka_heatmap: prompt counts differ");
  if (fp.size() < kMinCkaSamples)
    fail(ErrorKind::InsufficientSamples,
         "cka_heatmap: " + std::to_string(fp.size()) + " prompts, need " + std::to_string(kMinCkaSamples));
  const std::size_t L = fp[0].layers.size();
  std::vector<Matrix> xf(L), xq(L);
  for (std::size_t l = 0; l < L; ++l) {
    xf[l] = center_columns(activation_matrix(fp, static_cast<int>(l), site, positions));
    xq[l] = center_columns(activation_matrix(q, static_cast<int>(l), site, positions));
  }
  std::vector<double> self_f(L), self_q(L);
  for (std::size_t l = 0; l < L; ++l) {
    self_f[l] = frobenius_norm(matmul_tn(xf[l], xf[l]));
    self_q[l] = frobenius_norm(matmul_tn(xq[l], xq[l]));
  }
  CkaHeatmap h;
  h.values = Matrix(L, L);
  h.site = site;
  h.position = position_label;
  parallel_for(L * L, resolve_threads(0), [&](std::size_t lo, std::size_t hi) {
    for (std::size_t k = lo; k < hi; ++k) {
      const std::size_t i = k / L, j = k % L;
      if (self_f[i] < 1e-12 || self_q[j] < 1e-12) continue;
      const double num = std::pow(frobenius_norm(matmul_tn(xq[j], xf[i])), 2);
      h.values(i, j) = std::clamp(num / (self_f[i] * self_q[j]), 0.0, 1.0);
    }
  });
  return h;
}

namespace {

struct Basis {
  Matrix v;  // n x rank
  std::vector<double> s;
  std::size_t rank = 0;
};

Basis right_basis(const Matrix& a, bool centered) {
  Basis b;
  auto r = svd(centered ? center_columns(a) : a);
  const double s0 = r.s.empty() ? 0.0 : r.s[0];
  for (double s : r.s)
    if (s > 1e-10 * s0 && s > 1e-300) ++b.rank;
  b.v = std::move(r.v);
  b.s = std::move(r.s);
  return b;
}

double energy(const std::vector<double>& s, std::size_t k) {
  double top = 0.0, all = 0.0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    all += s[i] * s[i];
    if (i < k) top += s[i] * s[i];
  }
  return all > 0 ? top / all : 0.0;
}

SubspaceResult compare(const Basis& a, const Basis& b, std::size_t k) {
  require(k >= 1, ErrorKind::InvalidInput, "subspace: k must be >= 1");
  require(a.v.rows() == b.v.rows(), ErrorKind::InvalidInput, "subspace: feature dimensions differ");
  SubspaceResult r;
  const std::size_t eff = std::min(a.rank, b.rank);
  r.k = std::min(k, eff);
  if (r.k < k) {
    r.clamped = true;
    warn("subspace similarity: k=" + std::to_string(k) + " clamped to effective rank " + std::to_string(r.k));
  }
  r.energy_a = energy(a.s, r.k);
  r.energy_b = energy(b.s, r.k);
  if (r.k == 0) return r;
  // ||V_a,k^T V_b,k||_F^2 = sum of squared singular values of the product.
  double s = 0.0;
  for (std::size_t i = 0; i < r.k; ++i)
    for (std::size_t j = 0; j < r.k; ++j) {
      double dot = 0.0;
      for (std::size_t f = 0; f < a.v.rows(); ++f) dot += a.v(f, i) * b.v(f, j);
      s += dot * dot;
    }
  r.value = std::clamp(s / static_cast<double>(r.k), 0.0, 1.0);
  return r;
}

}  // namespace

SubspaceResult subspace_similarity(const Matrix& a_fp, const Matrix& a_q, std::size_t k, bool centered) {
  require(a_fp.rows() == a_q.rows() && a_fp.cols() == a_q.cols(), ErrorKind::InvalidInput,
          "subspace_similarity: shapes differ");
  require(k <= a_fp.cols(), ErrorKind::InvalidInput, "subspace_similarity: k exceeds feature dimension");
  return compare(right_basis(a_fp, centered), right_basis(a_q, centered), k);
}

SubspaceResult error_subspace_alignment(const Matrix& a_fp, const Matrix& a_q, std::size_t k, bool centered) {
  require(a_fp.rows() == a_q.rows() && a_fp.cols() == a_q.cols(), ErrorKind::InvalidInput,
          "error_subspace_alignment: shapes differ");
  require(k <= a_fp.cols(), ErrorKind::InvalidInput, "error_subspace_alignment: k exceeds feature dimension");
  Matrix e(a_fp.rows(), a_fp.cols());
  for (std::size_t i = 0; i < e.size(); ++i) e.data()[i] = a_q.data()[i] - a_fp.data()[i];
  if (frobenius_norm(e) < 1e-12) {
    SubspaceResult r;
    r.no_error = true;
    return r;
  }
  return compare(right_basis(a_fp, centered), right_basis(e, centered), k);
}

LayerCurve subspace_profile(std::span<const ForwardTrace> fp, std::span<const ForwardTrace> q, PatchSite site,
                            std::span<const int> positions, std::size_t k, bool error_alignment) {
  require(fp.size() == q.size() && !fp.empty(), ErrorKind::InvalidInput, "subspace_profile: prompt counts differ");
  const std::size_t L = fp[0].layers.size();
  LayerCurve c = make_curve(error_alignment ? "error_alignment" : "subspace_similarity", site_name(site), L);
  for (std::size_t l = 0; l < L; ++l) {
    const Matrix a = activation_matrix(fp, static_cast<int>(l), site, positions);
    const Matrix b = activation_matrix(q, static_cast<int>(l), site, positions);
    const std::size_t kk = std::min(k, a.cols());
    const SubspaceResult r = error_alignment ? error_subspace_alignment(a, b, kk) : subspace_similarity(a, b, kk);
    if (!r.no_error && r.energy_a < 0.9)
      warn("subspace: top-" + std::to_string(r.k) + " directions capture " + std::to_string(r.energy_a) +
           " of spectral energy at layer " + std::to_string(l));
    c.mean[l] = r.value;
    c.n[l] = r.k;
  }
  return c;
}

}  // namespace qlens
