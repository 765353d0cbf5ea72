#include <cmath>
#include <numeric>

#include "helpers.hpp"
#include "quantlens/quant.hpp"
#include "quantlens/util.hpp"

using namespace qlens;
using qtest::kind_of;
using qtest::random_matrix;

namespace {

QuantSpec spec_of(int bits, int group = 32, Algorithm a = Algorithm::Rtn) {
  QuantSpec s;
  s.bits = bits;
  s.group_size = group;
  s.algorithm = a;
  return s;
}

double frob_diff(const Matrix& a, const Matrix& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a.data()[i] - b.data()[i]) * (a.data()[i] - b.data()[i]);
  return std::sqrt(s);
}

CalibSet fixture_calib(const qtest::Fixture& fx) {
  CalibSet c;
  for (const auto& p : render_all(fx.world, fx.facts)) {
    if (c.sequences.size() >= 64) break;
    c.sequences.push_back(p.tokens);
  }
  return c;
}

}  // namespace

TEST_CASE("rtn per-group error bound holds exactly") {
  for (int bits : {2, 3, 4, 8}) {
    const Matrix w = random_matrix(12, 70, bits);
    const QuantResult q = rtn_quantize(w, spec_of(bits));
    const auto& cb = q.codebook;
    CHECK(cb.n_groups() == 3);
    for (std::size_t r = 0; r < w.rows(); ++r)
      for (std::size_t j = 0; j < w.cols(); ++j) {
        const double scale = cb.scales[r * cb.n_groups() + j / 32];
        // Independent recomputation of the group range.
        double mn = 1e300, mx = -1e300;
        for (std::size_t k = (j / 32) * 32; k < std::min<std::size_t>((j / 32 + 1) * 32, 70); ++k)
          mn = std::min(mn, w(r, k)), mx = std::max(mx, w(r, k));
        CHECK(scale == doctest::Approx((mx - mn) / ((1 << bits) - 1)).epsilon(1e-14));
        CHECK(std::abs(q.dequant(r, j) - w(r, j)) <= scale / 2 + 1e-12);
        CHECK(q.dequant(r, j) == doctest::Approx(scale * (cb.codes[r * 70 + j] - cb.zeros[r * cb.n_groups() + j / 32])));
      }
  }
}

TEST_CASE("rtn representable grid and passthrough") {
  // Every group spans exactly 0..15 scaled codes, so the grid is exact.
  Matrix w(3, 32);
  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t j = 0; j < 32; ++j) w(r, j) = 0.25 * static_cast<double>((j * 7 + r) % 16) - 1.0;
  for (std::size_t r = 0; r < 3; ++r) w(r, 0) = -1.0, w(r, 1) = 2.75;
  const QuantResult q = rtn_quantize(w, spec_of(4));
  CHECK(q.dequant == w);
  CHECK(rtn_quantize(w, spec_of(16)).dequant == w);

  Matrix flat(1, 8, 0.5);
  const QuantResult fq = rtn_quantize(flat, spec_of(2, 8));
  CHECK(fq.codebook.scales[0] == 1e-12);
  for (double v : fq.dequant.values()) CHECK(std::isfinite(v));
  CHECK(kind_of([] { spec_of(5).validate(); }) == ErrorKind::InvalidConfig);
}

TEST_CASE("protected rows equal their 8-bit rtn quantization") {
  const Matrix w = random_matrix(10, 64, 3);
  const std::vector<int> rows{1, 7};
  const QuantResult q8 = rtn_quantize(w, spec_of(8));
  for (Algorithm a : {Algorithm::Rtn, Algorithm::Gptq}) {
    Matrix h = identity(64);
    const QuantResult q = a == Algorithm::Rtn ? rtn_quantize(w, spec_of(2), rows) : gptq_quantize(w, h, spec_of(2), rows);
    for (int r : rows)
      for (std::size_t j = 0; j < 64; ++j) CHECK(q.dequant(r, j) == q8.dequant(r, j));
    CHECK(q.codebook.row_bits[1] == 8);
    CHECK(q.codebook.row_bits[0] == 2);
  }
  const std::vector<int> bad{10};
  CHECK(kind_of([&] { rtn_quantize(w, spec_of(4), bad); }) == ErrorKind::InvalidConfig);
}

TEST_CASE("gptq with identity hessian is bit-identical to rtn") {
  for (int bits : {2, 3, 4, 8})
    for (int group : {8, 32, 48}) {
      const Matrix w = random_matrix(9, 96, bits * 100 + group);
      const QuantResult r = rtn_quantize(w, spec_of(bits, group));
      const QuantResult g = gptq_quantize(w, identity(96), spec_of(bits, group, Algorithm::Gptq));
      CHECK(r.dequant == g.dequant);
      CHECK(r.codebook.codes == g.codebook.codes);
      CHECK(r.codebook.scales == g.codebook.scales);
    }
}

TEST_CASE("gptq lowers calibration error on correlated inputs") {
  Matrix x = random_matrix(400, 48, 5);
  for (std::size_t i = 0; i < x.rows(); ++i)
    for (std::size_t j = 1; j < 48; ++j) x(i, j) = 0.8 * x(i, j - 1) + 0.6 * x(i, j);
  const Matrix h = hessian_from_inputs(x);
  const Matrix w = random_matrix(16, 48, 6);
  for (int bits : {2, 3, 4}) {
    const double e_rtn = output_error(w, rtn_quantize(w, spec_of(bits, 16)).dequant, h);
    const double e_gptq = output_error(w, gptq_quantize(w, h, spec_of(bits, 16, Algorithm::Gptq)).dequant, h);
    CHECK(e_gptq < e_rtn);
  }
  const double e8 = output_error(w, gptq_quantize(w, h, spec_of(8, 16, Algorithm::Gptq)).dequant, h);
  CHECK(e8 <= 1e-3 * output_error(w, Matrix(16, 48), h));
}

TEST_CASE("hessian construction") {
  Matrix x(1, 3);
  x(0, 0) = 1.0, x(0, 1) = 2.0, x(0, 2) = -1.0;
  const Matrix h = hessian_from_inputs(x, 0.0);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 3; ++j) CHECK(h(i, j) == doctest::Approx(2.0 * x(0, i) * x(0, j)));
  const Matrix hd = hessian_from_inputs(x, 0.01);
  CHECK(hd(0, 0) - h(0, 0) == doctest::Approx(0.01 * (2.0 + 8.0 + 2.0) / 3.0));

  const Matrix o = identity(4);  // orthonormal rows, n = 4
  const Matrix ho = hessian_from_inputs(o, 0.0);
  for (std::size_t i = 0; i < 4; ++i) CHECK(ho(i, i) == doctest::Approx(0.5));
}

TEST_CASE("awq scale search") {
  Matrix x = random_matrix(200, 32, 8);
  for (std::size_t i = 0; i < x.rows(); ++i) x(i, 5) *= 30.0;
  const ActivationStats st = activation_stats(x);
  const Matrix w = random_matrix(8, 32, 9);
  const AwqResult r = awq_scale_search(w, st, spec_of(3, 16, Algorithm::AwqGptq));
  CHECK(r.loss_by_beta.size() == kAwqBetaGrid.size());
  if (r.beta > 0.0) {
    const auto mx = std::max_element(r.scales.begin(), r.scales.end());
    CHECK(mx - r.scales.begin() == 5);
  }
  CHECK(*std::min_element(r.loss_by_beta.begin(), r.loss_by_beta.end()) ==
        r.loss_by_beta[static_cast<std::size_t>(std::find(kAwqBetaGrid.begin(), kAwqBetaGrid.end(), r.beta) - kAwqBetaGrid.begin())]);
  // beta = 0 means unit scales, so the entry equals the plain grid loss.
  const QuantResult plain = rtn_quantize(w, spec_of(3, 16));
  CHECK(r.loss_by_beta[0] == doctest::Approx(output_error(w, plain.dequant, st.second_moment)).epsilon(1e-9));
}

TEST_CASE("plan construction and average bits") {
  ModelConfig c32;
  c32.n_layers = 32;
  const std::vector<PlanDirective> d{PlanDirective::uniform(4), PlanDirective::first_k(2, 8)};
  CHECK(build_plan(c32, d).average_bits(c32) == doctest::Approx(4.25));

  ModelConfig c;
  for (int b : {2, 3, 4, 8}) {
    const std::vector<PlanDirective> u{PlanDirective::uniform(b)};
    const QuantPlan p = build_plan(c, u);
    CHECK(p.average_bits(c) == doctest::Approx(b));
    for (int l = 0; l < c.n_layers; ++l)
      for (Component comp : kAllComponents) CHECK(p.at(l, comp).spec.bits == b);
  }

  const std::vector<PlanDirective> attn{PlanDirective::masked(ComponentMask::Attn, 4)};
  const QuantPlan pa = build_plan(c, attn);
  CHECK(pa.at(3, Component::Q).spec.bits == 4);
  CHECK(pa.at(3, Component::O).spec.bits == 4);
  CHECK(pa.at(3, Component::Gate).spec.bits == 16);

  const std::vector<PlanDirective> range{PlanDirective::uniform(16), PlanDirective::layer_range(0, 2, 2)};
  const QuantPlan pr = build_plan(c, range);
  CHECK(pr.at(2, Component::Down).spec.bits == 2);
  CHECK(pr.at(3, Component::Down).spec.bits == 16);

  const std::vector<PlanDirective> conflict{PlanDirective::uniform(4), PlanDirective::uniform(2)};
  CHECK(kind_of([&] { build_plan(c, conflict); }) == ErrorKind::InvalidConfig);

  const std::vector<PlanDirective> prot{PlanDirective::uniform(4), PlanDirective::protect(1, Component::V, {0, 3})};
  const QuantPlan pp = build_plan(c, prot);
  CHECK(QuantPlan::from_json(pp.to_json(), c).to_json() == pp.to_json());
  const std::vector<PlanDirective> oob{PlanDirective::uniform(4), PlanDirective::protect(1, Component::V, {999})};
  CHECK(kind_of([&] { build_plan(c, oob).validate(c); }) == ErrorKind::InvalidConfig);
}

TEST_CASE("kurtosis protection budget") {
  const auto& fx = qtest::trained_fixture();
  const QuantPlan none = kurtosis_protect_plan(fx.model, 4, 4.0);
  std::size_t prot = 0;
  for (const auto& l : none.layers)
    for (const auto& mp : l) prot += mp.protected_rows.size();
  CHECK(prot == 0);

  const QuantPlan p = kurtosis_protect_plan(fx.model, 4, 4.1);
  // f solves 4 + 4 f = 4.1, so the protected fraction of parameters is 0.025.
  CHECK(p.average_bits(fx.model.config) == doctest::Approx(4.1).epsilon(0.01));
  CHECK(p.average_bits(fx.model.config) >= 4.1 - 1e-9);
  CHECK(kind_of([&] { kurtosis_protect_plan(fx.model, 4, 3.5); }) == ErrorKind::InvalidConfig);
  CHECK(kind_of([&] { kurtosis_protect_plan(fx.model, 4, 9.0); }) == ErrorKind::InvalidConfig);

  // The highest-kurtosis row is protected.
  auto rk = row_kurtosis(fx.model);
  const auto top = *std::max_element(rk.begin(), rk.end(), [](const auto& a, const auto& b) { return a.kurtosis < b.kurtosis; });
  const auto& rows = p.at(top.layer, top.component).protected_rows;
  CHECK(std::find(rows.begin(), rows.end(), top.row) != rows.end());
}

TEST_CASE("kurtosis protection at tensor granularity") {
  const auto& fx = qtest::trained_fixture();
  const ModelConfig& c = fx.model.config;
  const QuantPlan p = kurtosis_protect_plan(fx.model, 4, 4.1, {}, KurtosisGranularity::Tensor);
  CHECK(p.average_bits(c) >= 4.1 - 1e-9);
  // Whole tensors are protected or left alone, and the first pick has the
  // highest tensor kurtosis.
  double best = -1;
  int best_l = -1;
  Component best_c = Component::Q;
  for (int l = 0; l < c.n_layers; ++l)
    for (Component comp : kAllComponents) {
      const auto& m = fx.model.weights.layers[l].matrix(comp);
      const std::size_t n = p.at(l, comp).protected_rows.size();
      CHECK((n == 0 || n == m.rows()));
      const std::vector<double> v(m.values().begin(), m.values().end());
      const double k = kurtosis(v);
      if (k > best) {
        best = k;
        best_l = l;
        best_c = comp;
      }
    }
  CHECK(p.at(best_l, best_c).protected_rows.size() == fx.model.weights.layers[best_l].matrix(best_c).rows());
  CHECK(parse_granularity("tensor") == KurtosisGranularity::Tensor);
  CHECK(to_string(KurtosisGranularity::Row) == "row");
  CHECK(kind_of([] { parse_granularity("group"); }) == ErrorKind::InvalidConfig);
}

TEST_CASE("low-rank compensation") {
  const Matrix w = random_matrix(20, 12, 1);
  const Matrix wq = rtn_quantize(w, spec_of(2, 4)).dequant;
  const LowRankCompensator comp(w, wq);
  double prev = 1e300;
  for (int r = 0; r <= 12; ++r) {
    Matrix fixed = wq;
    if (r > 0) {
      const Matrix d = comp.correction(r);
      for (std::size_t i = 0; i < fixed.size(); ++i) fixed.data()[i] += d.data()[i];
    }
    const double e = frob_diff(w, fixed);
    CHECK(e <= prev + 1e-12);
    prev = e;
  }
  CHECK(prev < 1e-5);

  // Rank-1 error is recovered exactly at rank 1.
  Matrix rank1 = w;
  for (std::size_t i = 0; i < 20; ++i)
    for (std::size_t j = 0; j < 12; ++j) rank1(i, j) += 0.1 * (i + 1.0) * (j % 3 - 1.0);
  Matrix fixed = rank1;
  const Matrix d = lowrank_compensate(w, rank1, 1);
  for (std::size_t i = 0; i < fixed.size(); ++i) fixed.data()[i] += d.data()[i];
  CHECK(frob_diff(w, fixed) < 1e-9);

  // Activation-weighted mode: full rank still recovers the weights.
  const Matrix x = random_matrix(100, 12, 4);
  const Matrix m2 = matmul_tn(x, x);
  const Matrix dw = lowrank_compensate(w, wq, 12, &m2);
  Matrix fw = wq;
  for (std::size_t i = 0; i < fw.size(); ++i) fw.data()[i] += dw.data()[i];
  CHECK(frob_diff(w, fw) < 1e-5);

  drain_warnings();
  const Matrix clamped = lowrank_compensate(w, wq, 50);
  CHECK(!drain_warnings().empty());
}

TEST_CASE("apply_plan on a trained model") {
  const auto& fx = qtest::trained_fixture();
  const CalibSet calib = fixture_calib(fx);
  const ModelConfig& c = fx.model.config;

  const std::vector<PlanDirective> fp{PlanDirective::uniform(16)};
  CHECK(apply_plan(fx.model, build_plan(c, fp), calib).model.digest() == fx.model.digest());

  const std::vector<PlanDirective> u4{PlanDirective::uniform(4)};
  QuantSpec rtn = spec_of(16, 32, Algorithm::Rtn);
  QuantSpec gptq = spec_of(16, 32, Algorithm::Gptq);
  const QuantizedModel qr = apply_plan(fx.model, build_plan(c, u4, rtn), calib);
  const QuantizedModel qg = apply_plan(fx.model, build_plan(c, u4, gptq), calib);
  CHECK(qg.report.average_bits == doctest::Approx(4.0));
  REQUIRE(qr.report.matrices.size() == qg.report.matrices.size());

  // Same-input comparison per matrix: Hessians from the FP model.
  std::size_t wins = 0, total = 0;
  for (int l = 0; l < c.n_layers; ++l)
    for (Component comp : kAllComponents) {
      const Matrix w = fx.model.weights.layers[l].matrix(comp).cast<double>();
      const Matrix h = collect_hessian(fx.model, l, comp, calib);
      const double er = output_error(w, rtn_quantize(w, spec_of(4)).dequant, h);
      const double eg = output_error(w, gptq_quantize(w, h, spec_of(4, 32, Algorithm::Gptq)).dequant, h);
      wins += eg <= er;
      ++total;
    }
  CHECK(static_cast<double>(wins) >= 0.9 * static_cast<double>(total));

  // Embeddings, norms and unembedding are untouched.
  CHECK(qg.model.weights.embed == fx.model.weights.embed);
  CHECK(qg.model.weights.unembed == fx.model.weights.unembed);
  CHECK(qg.model.weights.final_norm == fx.model.weights.final_norm);
  CHECK(qg.model.weights.layers[0].attn_norm == fx.model.weights.layers[0].attn_norm);
  CHECK(!qg.model.codebook.empty());

  QuantSpec awq = spec_of(16, 32, Algorithm::AwqGptq);
  const QuantizedModel qa = apply_plan(fx.model, build_plan(c, u4, awq), calib);
  for (const auto& m : qa.report.matrices) CHECK(std::isfinite(m.output_error));
}
