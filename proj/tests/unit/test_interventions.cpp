#include <cmath>

#include "helpers.hpp"
#include "quantlens/interventions.hpp"
#include "quantlens/util.hpp"

using namespace qlens;
using qtest::kind_of;

namespace {

SweepContext fixture_context() {
  const auto& fx = qtest::trained_fixture();
  SweepContext ctx;
  ctx.fp = &fx.model;
  ctx.eval = EvalSet{&fx.world, fx.facts, "all"};
  ctx.calib = sample_calibration(fx.world, fx.facts, 32, 3);
  ctx.stamp = {{"test", true}};
  return ctx;
}

}  // namespace

TEST_CASE("calibration sampling is deterministic and within bounds") {
  const auto& fx = qtest::trained_fixture();
  const CalibSet a = sample_calibration(fx.world, fx.facts, 20, 9);
  const CalibSet b = sample_calibration(fx.world, fx.facts, 20, 9);
  CHECK(a.sequences == b.sequences);
  CHECK(a.sequences.size() == 20);
  for (const auto& s : a.sequences) CHECK(static_cast<int>(s.size()) <= fx.model.config.max_seq_len);
  CHECK(sample_calibration(fx.world, fx.facts, 20, 10).sequences != a.sequences);
}

TEST_CASE("domino, single-layer and component sweeps reduce to FP at their limits") {
  const SweepContext ctx = fixture_context();
  const double fp = eval_accuracy(*ctx.fp, ctx.eval);
  const std::vector<int> ks{-1, 0, 3};
  const SweepResult dom = domino_sweep(ctx, 2, ks);
  CHECK(dom.points.size() == 3);
  CHECK(dom.points[0].accuracy == fp);
  CHECK(dom.points[0].average_bits == 16.0);
  // k = n_layers - 1 is the uniform low-bit model.
  CHECK(dom.points[2].average_bits == doctest::Approx(2.0));
  CHECK(dom.to_csv().rfind("label,x,accuracy,average_bits\n", 0) == 0);

  const SweepResult flat = single_layer_sweep(ctx, 16);
  CHECK(flat.points.size() == static_cast<std::size_t>(ctx.fp->config.n_layers));
  for (const auto& p : flat.points) CHECK(p.accuracy == fp);

  const std::vector<ComponentMask> masks{ComponentMask::None, ComponentMask::All, ComponentMask::Attn, ComponentMask::QK};
  const SweepResult comp = component_sweep(ctx, 2, masks);
  CHECK(comp.at("none").accuracy == fp);
  CHECK(comp.at("all").average_bits == doctest::Approx(2.0));
  CHECK(kind_of([&] { comp.at("nope"); }) == ErrorKind::NotFound);
}

TEST_CASE("source protection limits") {
  const SweepContext ctx = fixture_context();
  const ModelBundle& fp = *ctx.fp;
  const int L = fp.config.n_layers;
  const QuantPlan all_hi = protect_plan(fp, ProtectStrategy::early_layers(L, 8), 4);
  const std::vector<PlanDirective> u8{PlanDirective::uniform(8)};
  CHECK(all_hi.to_json() == build_plan(fp.config, u8).to_json());
  ModelConfig c32 = fp.config;
  c32.n_layers = 32;
  ModelBundle shape_only;
  shape_only.config = c32;
  CHECK(protect_plan(shape_only, ProtectStrategy::early_layers(2, 8), 4).average_bits(c32) == doctest::Approx(4.25));
  CHECK(ProtectStrategy::early_layers(2, 8).label() != ProtectStrategy::kurtosis(4.1).label());
  const QuantizedModel k = source_protect(fp, ProtectStrategy::kurtosis(4.25), 4, ctx.calib);
  CHECK(k.report.average_bits >= 4.25 - 1e-9);
}

TEST_CASE("amplification continuity at alpha -> 1") {
  const auto& fx = qtest::trained_fixture();
  const auto prompts = render_primary(fx.world, fx.facts);
  AmplifyConfig cfg;
  cfg.alpha = 1.0 + 1e-6;
  for (AmplifyMode mode : {AmplifyMode::ResidualScale, AmplifyMode::LensLogits}) {
    cfg.mode = mode;
    const auto out = amplified_batch(fx.model, prompts, cfg);
    for (std::size_t i = 0; i < out.size(); ++i) {
      CHECK(out[i].amplified_prediction == out[i].base_prediction);
      CHECK(out[i].layer >= fx.model.config.n_layers / 2);
      CHECK(out[i].layer == peak_confidence_layer(out[i].trajectory));
    }
  }
  AmplifyConfig bad;
  bad.alpha = 1.0;
  CHECK(kind_of([&] { amplified_forward(fx.model, prompts[0], bad); }) == ErrorKind::InvalidConfig);

  // Fixed layer: the second pass equals a forward with an explicit scale patch.
  AmplifyConfig fixed;
  fixed.alpha = 3.0;
  fixed.layer = 2;
  const AmplifiedPrediction a = amplified_forward(fx.model, prompts[0], fixed);
  PatchSpec p;
  p.directives.push_back({PatchSite::ResidualOut, 2, prompts[0].positions.last_token, PatchAction::Scale, {}, 3.0f});
  CHECK(a.logits == forward(fx.model, prompts[0].tokens, {}, &p).logits);
  CHECK(a.layer == 2);
}

TEST_CASE("signal injection") {
  const SweepContext ctx = fixture_context();
  const int L = ctx.fp->config.n_layers;
  const std::vector<int> ks{0, L - 1};
  const InjectionResult r = signal_injection_sweep(ctx, 8, 2, ks);
  REQUIRE(r.curves.size() == 2);
  // k = L - 1 has no low-bit region: it is the pure high-precision model,
  // whose residual cosine against FP is near 1 at every layer.
  for (double v : r.curves[1].cosine.mean) CHECK(v > 0.98);
  // Layers at high precision up to k behave identically whatever follows.
  CHECK(r.curves[0].cosine.mean[0] == doctest::Approx(r.curves[1].cosine.mean[0]).epsilon(1e-9));
  CHECK(r.to_csv().rfind("k,layer,mean,std,n\n", 0) == 0);
}

TEST_CASE("compensation battery: full rank recovers FP accuracy") {
  const SweepContext ctx = fixture_context();
  const double fp = eval_accuracy(*ctx.fp, ctx.eval);
  const std::vector<int> ranks{1, 64};
  const std::vector<ProtectStrategy> strategies{ProtectStrategy::early_layers(1, 8)};
  drain_warnings();
  const SweepResult r = compensation_battery(ctx, 2, ranks, strategies);
  drain_warnings();
  CHECK(r.at("rank=64").accuracy == doctest::Approx(fp));
  CHECK(r.points.size() == 4);
  CHECK(r.at("plain").average_bits == doctest::Approx(2.0));
}
