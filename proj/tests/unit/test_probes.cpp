#include <cmath>
#include <numeric>

#include "helpers.hpp"
#include "quantlens/probes.hpp"

using namespace qlens;
using qtest::kind_of;

TEST_CASE("logit lens at the final layer matches the output distribution") {
  const auto& fx = qtest::trained_fixture();
  const auto prompts = render_primary(fx.world, fx.facts);
  CaptureFlags cap;
  cap.residual = true;
  for (std::size_t i = 0; i < 10; ++i) {
    const auto r = forward(fx.model, prompts[i].tokens, cap);
    const int last = static_cast<int>(prompts[i].tokens.size()) - 1;
    const auto lens = logit_lens(r.trace, fx.model, fx.model.config.n_layers - 1, last);
    const auto out = softmax(r.logits);
    double worst = 0.0, sum = 0.0;
    for (std::size_t v = 0; v < out.size(); ++v) worst = std::max(worst, std::abs(lens[v] - out[v])), sum += lens[v];
    CHECK(worst < 1e-6);
    CHECK(std::abs(sum - 1.0) < 1e-9);
    for (int l = 0; l < fx.model.config.n_layers; ++l) {
      const auto d = logit_lens(r.trace, fx.model, l, 0);
      CHECK(std::abs(std::accumulate(d.begin(), d.end(), 0.0) - 1.0) < 1e-9);
    }
  }
  const auto bare = forward(fx.model, prompts[0].tokens);
  CHECK(kind_of([&] { logit_lens(bare.trace, fx.model, 0, 0); }) == ErrorKind::TraceIncomplete);
}

TEST_CASE("zero hidden state gives a uniform lens distribution") {
  const auto& fx = qtest::trained_fixture();
  CaptureFlags cap;
  cap.residual = true;
  auto r = forward(fx.model, render_primary(fx.world, fx.facts)[0].tokens, cap);
  for (auto& x : r.trace.layers[0].residual_out.row(0)) x = 0.0f;
  const auto d = logit_lens(r.trace, fx.model, 0, 0);
  for (double p : d) CHECK(p == doctest::Approx(1.0 / static_cast<double>(d.size())).epsilon(1e-9));
}

TEST_CASE("target rank") {
  const std::vector<double> p{0.1, 0.4, 0.4, 0.1};
  CHECK(target_rank(p, 1) == 1);
  CHECK(target_rank(p, 2) == 2);
  CHECK(target_rank(p, 0) == 3);
  CHECK(target_rank(p, 3) == 4);
}

TEST_CASE("trajectories on trained and untrained models") {
  const auto& fx = qtest::trained_fixture();
  const auto prompts = render_primary(fx.world, fx.facts);
  const auto trajs = target_trajectories(fx.model, prompts);
  REQUIRE(trajs.size() == prompts.size());
  std::size_t top1 = 0, correct = 0;
  const auto preds = batch_predict(fx.model, [&] {
    std::vector<std::vector<int>> s;
    for (const auto& p : prompts) s.push_back(p.tokens);
    return s;
  }());
  for (std::size_t i = 0; i < prompts.size(); ++i) {
    const bool is_top = trajs[i].layers.back().rank == 1;
    top1 += is_top;
    correct += preds[i] == prompts[i].target;
    CHECK(is_top == (preds[i] == prompts[i].target));
    const auto single = target_trajectory(fx.model, prompts[i].tokens, prompts[i].target);
    CHECK(single.layers.back().prob == doctest::Approx(trajs[i].layers.back().prob).epsilon(1e-12));
  }
  CHECK(top1 == correct);
  CHECK(static_cast<double>(correct) / prompts.size() > 0.8);

  const ModelBundle fresh = init_model(fx.model.config, 99);
  const auto t = target_trajectory(fresh, prompts[0].tokens, prompts[0].target);
  const double uniform = 1.0 / fx.model.config.vocab_size;
  for (const auto& pt : t.layers) {
    CHECK(pt.prob < 5.0 * uniform);
    CHECK(pt.prob > 0.2 * uniform);
  }
  CHECK(trajectory_csv(t).rfind("layer,prob,rank,entropy_bits\n", 0) == 0);
}

TEST_CASE("rank histogram") {
  const std::vector<int> r{1, 1, 3};
  const auto h = rank_histogram(r);
  CHECK(h[0] == 2);
  CHECK(h[1] == 1);
  for (int i = 2; i < 6; ++i) CHECK(h[i] == 0);
  const std::vector<int> big{1001, 5000, 20000};
  CHECK(rank_histogram(big)[5] == 3);
  const std::vector<int> edges{1, 2, 5, 6, 10, 11, 100, 101, 1000, 1001};
  const auto e = rank_histogram(edges);
  for (int i = 0; i < 5; ++i) CHECK(e[i] == (i == 0 ? 1 : 2));
  CHECK(e[5] == 1);
  std::mt19937_64 g(2);
  std::vector<int> rnd(500);
  for (auto& x : rnd) x = 1 + static_cast<int>(g() % 3000);
  const auto rh = rank_histogram(rnd);
  CHECK(std::accumulate(rh.begin(), rh.end(), std::size_t{0}) == 500);
  const std::vector<int> zero{0};
  CHECK(kind_of([&] { rank_histogram(zero); }) == ErrorKind::InvalidInput);
}

TEST_CASE("peak confidence layer") {
  auto traj = [](std::vector<double> ent) {
    LensTrajectory t;
    for (std::size_t i = 0; i < ent.size(); ++i) t.layers.push_back({static_cast<int>(i), 0.0, 1, ent[i]});
    return t;
  };
  CHECK(peak_confidence_layer(traj({5, 4, 1, 2}), 0) == 2);
  CHECK(peak_confidence_layer(traj({5, 4, 3, 2}), 0) == 3);
  CHECK(peak_confidence_layer(traj({3, 1, 1}), 0) == 2);
  CHECK(peak_confidence_layer(traj({0, 4, 3, 5}), -1) == 2);  // default min layer = n/2
}

TEST_CASE("accuracy aggregates") {
  std::vector<FactAccuracy> f(2);
  f[0].correct = {true, true, false};
  f[1].correct = {true, false};
  CHECK(f[0].any());
  CHECK(f[0].majority());
  CHECK(!f[0].all());
  CHECK(f[1].any());
  CHECK(!f[1].majority());

  std::mt19937_64 g(6);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<FactAccuracy> facts(1 + g() % 20);
    for (auto& fa : facts) {
      fa.relation = static_cast<int>(g() % 2);
      fa.correct.resize(1 + g() % 5);
      for (std::size_t i = 0; i < fa.correct.size(); ++i) fa.correct[i] = g() & 1;
    }
    const AccuracyReport r = summarize_accuracy(facts, 2);
    CHECK(r.acc_all <= r.acc_majority);
    CHECK(r.acc_majority <= r.acc_any);
  }

  const auto& fx = qtest::trained_fixture();
  const AccuracyReport rep = accuracy_suite(fx.model, fx.world, fx.facts);
  CHECK(rep.facts.size() == fx.facts.size());
  CHECK(rep.facts[0].correct.size() == 4);
  CHECK(rep.acc_any >= rep.acc_majority);
  const std::vector<int> primary{0};
  CHECK(accuracy_suite(fx.model, fx.world, fx.facts, primary).facts[0].correct.size() == 1);
}
