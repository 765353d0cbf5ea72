#include <cmath>
#include <set>

#include "helpers.hpp"
#include "quantlens/causal.hpp"
#include "quantlens/quant.hpp"

using namespace qlens;
using qtest::kind_of;

namespace {

std::vector<Prompt> fixture_prompts(std::size_t n) {
  const auto& fx = qtest::trained_fixture();
  auto p = render_all(fx.world, fx.facts);
  p.resize(std::min(n, p.size()));
  return p;
}

}  // namespace

TEST_CASE("position groups") {
  const World w = generate_world(7, 32, 2, 8);
  const Prompt p = render_prompt(w, w.facts[0], 0);  // [BOS the capital of S1 S2 is]
  CHECK(group_positions(p, PositionGroup::FirstSubject) == std::vector<int>{4});
  CHECK(group_positions(p, PositionGroup::MidSubject).empty());
  CHECK(group_positions(p, PositionGroup::LastSubject) == std::vector<int>{5});
  CHECK(group_positions(p, PositionGroup::Relation) == std::vector<int>{1, 2, 3});
  CHECK(group_positions(p, PositionGroup::LastToken) == std::vector<int>{6});
  for (int t = 0; t < 4; ++t) {
    const Prompt q = render_prompt(w, w.facts[1], t);
    std::set<int> seen;
    for (PositionGroup g : kPositionGroups)
      for (int pos : group_positions(q, g)) CHECK(seen.insert(pos).second);
  }
}

TEST_CASE("clean store") {
  const auto& fx = qtest::trained_fixture();
  const auto prompts = fixture_prompts(6);
  const CleanStore a = capture_clean_traces(fx.model, prompts);
  const CleanStore b = capture_clean_traces(fx.model, prompts);
  CHECK(a.size() == 6);
  CHECK(a.get(key_of(prompts[2])).residual_out[1] == b.get(key_of(prompts[2])).residual_out[1]);
  CHECK(kind_of([&] { a.get({999, 0}); }) == ErrorKind::NotFound);
}

TEST_CASE("self-patching the source model has zero effect") {
  const auto& fx = qtest::trained_fixture();
  const auto prompts = fixture_prompts(24);
  const CleanStore clean = capture_clean_traces(fx.model, prompts);
  const PatchGrid g = cross_model_repair(fx.model, clean, prompts);
  CHECK(g.kind == "aie");
  for (int l = 0; l < g.n_layers; ++l)
    for (PositionGroup pg : kPositionGroups) {
      const GridCell& c = g.at(l, pg);
      CHECK(std::abs(c.effect) < 1e-6);
      if (pg == PositionGroup::MidSubject) CHECK(c.n == 0);
      else CHECK(c.n == 24);
    }
  CausalOptions wide;
  wide.window = 3;
  for (const auto& row : cross_model_repair(fx.model, clean, prompts, wide).cells)
    for (const auto& c : row) CHECK(std::abs(c.effect) < 1e-6);
}

TEST_CASE("repair of a quantized model and incomplete traces") {
  const auto& fx = qtest::trained_fixture();
  const auto prompts = fixture_prompts(16);
  CalibSet calib;
  for (const auto& p : prompts) calib.sequences.push_back(p.tokens);
  const std::vector<PlanDirective> d{PlanDirective::uniform(2)};
  const QuantizedModel q = apply_plan(fx.model, build_plan(fx.model.config, d), calib);
  const CleanStore clean = capture_clean_traces(fx.model, prompts);
  const PatchGrid g = cross_model_repair(q.model, clean, prompts);
  // Patching every layer's last-token state from FP at the final layer
  // reproduces the FP output exactly, so the gain equals P_fp - P_q.
  const int last = g.n_layers - 1;
  double expect = 0.0;
  for (const auto& p : prompts) {
    const auto pf = softmax(forward(fx.model, p.tokens).logits);
    const auto pq = softmax(forward(q.model, p.tokens).logits);
    expect += pf[static_cast<std::size_t>(p.target)] - pq[static_cast<std::size_t>(p.target)];
  }
  CHECK(g.at(last, PositionGroup::LastToken).effect == doctest::Approx(expect / prompts.size()).epsilon(1e-5));

  // Shuffling prompt order does not change the grid.
  auto rev = prompts;
  std::reverse(rev.begin(), rev.end());
  const PatchGrid gr = cross_model_repair(q.model, clean, rev);
  for (int l = 0; l < g.n_layers; ++l)
    for (PositionGroup pg : kPositionGroups) CHECK(gr.at(l, pg).effect == doctest::Approx(g.at(l, pg).effect).epsilon(1e-9));

  const CleanStore partial = capture_clean_traces(fx.model, std::span<const Prompt>(prompts).first(3));
  CHECK(kind_of([&] { cross_model_repair(q.model, partial, prompts); }) == ErrorKind::TraceIncomplete);

  const std::string csv = g.to_csv();
  CHECK(csv.rfind("layer,group,effect,stderr,n\n", 0) == 0);
  CHECK(g.to_json()["kind"] == "aie");
}

TEST_CASE("zero ablation bounds") {
  const auto& fx = qtest::trained_fixture();
  const auto prompts = fixture_prompts(20);
  const PatchGrid g = zero_ablation(fx.model, prompts);
  CHECK(g.kind == "aae");
  for (int l = 0; l < g.n_layers; ++l)
    for (PositionGroup pg : kPositionGroups) {
      const GridCell& c = g.at(l, pg);
      CHECK(std::isfinite(c.effect));
      CHECK(c.effect <= g.mean_base_prob + 1e-12);
    }
}

TEST_CASE("effect concentration") {
  const std::vector<double> one{0.0, 0.0, 0.7, 0.0};
  CHECK(effect_concentration(one).value == doctest::Approx(1.0));
  const std::vector<double> flat{0.2, 0.2, 0.2, 0.2};
  CHECK(effect_concentration(flat).value == doctest::Approx(0.0));
  const std::vector<double> hand{3.0, 1.0, 0.0, 0.0};
  CHECK(effect_concentration(hand).value == doctest::Approx(0.5));
  const std::vector<double> signs{-3.0, 1.0, 0.0, 0.0};
  CHECK(effect_concentration(signs).value == doctest::Approx(0.5));
  const std::vector<double> zero(5, 0.0);
  const Concentration z = effect_concentration(zero);
  CHECK(z.value == 0.0);
  CHECK(z.degenerate);
}
