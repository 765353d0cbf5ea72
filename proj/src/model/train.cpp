#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <random>

#include "engine.hpp"
#include "quantlens/error.hpp"
#include "quantlens/model.hpp"
#include "quantlens/util.hpp"

namespace qlens {

using nlohmann::json;

json TrainHyperparams::to_json() const {
  return json{{"lr", lr},       {"steps", steps},           {"batch", batch},
              {"seed", seed},   {"beta1", beta1},           {"beta2", beta2},
              {"eps", eps},     {"grad_clip", grad_clip},   {"warmup_steps", warmup_steps},
              {"final_lr_fraction", final_lr_fraction}, {"weight_decay", weight_decay}};
}

TrainHyperparams TrainHyperparams::from_json(const json& j) {
  TrainHyperparams h;
  try {
    h.lr = j.value("lr", h.lr);
    h.steps = j.value("steps", h.steps);
    h.batch = j.value("batch", h.batch);
    h.seed = j.value("seed", h.seed);
    h.beta1 = j.value("beta1", h.beta1);
    h.beta2 = j.value("beta2", h.beta2);
    h.eps = j.value("eps", h.eps);
    h.grad_clip = j.value("grad_clip", h.grad_clip);
    h.warmup_steps = j.value("warmup_steps", h.warmup_steps);
    h.final_lr_fraction = j.value("final_lr_fraction", h.final_lr_fraction);
    h.weight_decay = j.value("weight_decay", h.weight_decay);
  } catch (const json::exception& e) {
    fail(ErrorKind::InvalidConfig, std::string("train hyperparams: ") + e.what());
  }
  require(h.lr >= 0 && h.steps >= 0 && h.batch > 0 && h.grad_clip > 0, ErrorKind::InvalidConfig,
          "train hyperparams: lr/steps must be non-negative, batch and grad_clip positive");
  return h;
}

namespace {

double lr_at(const TrainHyperparams& hp, int step) {
  if (hp.warmup_steps > 0 && step < hp.warmup_steps) return hp.lr * (step + 1) / hp.warmup_steps;
  const int span = std::max(1, hp.steps - hp.warmup_steps);
  const double t = std::min(1.0, static_cast<double>(step - hp.warmup_steps) / span);
  const double floor = hp.final_lr_fraction;
  return hp.lr * (floor + (1.0 - floor) * 0.5 * (1.0 + std::cos(M_PI * t)));
}

void validate_sample(const ModelConfig& c, const TrainSample& s) {
  require(!s.tokens.empty() && s.tokens.size() <= static_cast<std::size_t>(c.max_seq_len), ErrorKind::InvalidInput,
          "train: sample length out of range");
  for (int t : s.tokens) require(t >= 0 && t < c.vocab_size, ErrorKind::InvalidInput, "train: token out of range");
  require(s.target >= 0 && s.target < c.vocab_size, ErrorKind::InvalidInput, "train: target out of range");
}

template <typename T>
void zero(Weights<T>& w) {
  w.for_each([](const std::string&, BasicMatrix<T>& m) { std::fill(m.values().begin(), m.values().end(), T(0)); });
}

}  // namespace

TrainReport train(ModelBundle& model, std::span<const TrainSample> train_set, const TrainHyperparams& hp,
                  const TrainProgress& progress) {
  require(!train_set.empty(), ErrorKind::InvalidInput, "train: empty training set");
  const ModelConfig& c = model.config;
  c.validate();
  for (const auto& s : train_set) validate_sample(c, s);

  const auto t0 = std::chrono::steady_clock::now();
  const engine::Rope<float> rope(c);
  auto rng = substream(hp.seed, "train");
  std::vector<std::size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);

  Weights<float> grads = Weights<float>::zeros(c), m1 = Weights<float>::zeros(c), m2 = Weights<float>::zeros(c);
  std::vector<MatrixF*> wp, gp, m1p, m2p;
  std::vector<char> decays;
  model.weights.for_each([&](const std::string& n, MatrixF& m) {
    wp.push_back(&m);
    decays.push_back(n.find(".w") != std::string::npos);
  });
  grads.for_each([&](const std::string&, MatrixF& m) { gp.push_back(&m); });
  m1.for_each([&](const std::string&, MatrixF& m) { m1p.push_back(&m); });
  m2.for_each([&](const std::string&, MatrixF& m) { m2p.push_back(&m); });

  TrainReport rep;
  std::size_t cursor = 0, epoch_correct = 0, epoch_seen = 0;
  const std::size_t batch = static_cast<std::size_t>(hp.batch);
  std::vector<bool> correct;
  std::vector<int> targets;
  double b1t = 1.0, b2t = 1.0;

  for (int step = 0; step < hp.steps; ++step) {
    engine::Packing p;
    targets.clear();
    for (std::size_t i = 0; i < batch && cursor < order.size(); ++i, ++cursor) {
      const auto& s = train_set[order[cursor]];
      p.add(s.tokens, c.n_heads);
      targets.push_back(s.target);
    }
    zero(grads);
    const float loss = engine::loss_and_backward(c, model.weights, rope, p, targets, grads, &correct);
    if (!std::isfinite(loss))
      fail(ErrorKind::TrainingFailure, "training diverged: loss is " + std::to_string(loss) + " at step " + std::to_string(step));
    rep.loss_curve.push_back(loss);
    epoch_correct += static_cast<std::size_t>(std::count(correct.begin(), correct.end(), true));
    epoch_seen += correct.size();

    double norm2 = 0.0;
    for (auto* g : gp)
      for (float x : g->values()) norm2 += static_cast<double>(x) * x;
    const double norm = std::sqrt(norm2);
    const float clip = norm > hp.grad_clip ? static_cast<float>(hp.grad_clip / norm) : 1.0f;

    b1t *= hp.beta1;
    b2t *= hp.beta2;
    const float lr = static_cast<float>(lr_at(hp, step));
    const float b1 = static_cast<float>(hp.beta1), b2 = static_cast<float>(hp.beta2);
    const float c1 = static_cast<float>(1.0 / (1.0 - b1t)), c2 = static_cast<float>(1.0 / (1.0 - b2t));
    const float eps = static_cast<float>(hp.eps);
    for (std::size_t t = 0; t < wp.size(); ++t) {
      float* w = wp[t]->data();
      const float keep = decays[t] ? static_cast<float>(1.0 - lr * hp.weight_decay) : 1.0f;
      const float* g = gp[t]->data();
      float* a = m1p[t]->data();
      float* v = m2p[t]->data();
      for (std::size_t i = 0, n = wp[t]->size(); i < n; ++i) {
        const float gi = g[i] * clip;
        a[i] = b1 * a[i] + (1.0f - b1) * gi;
        v[i] = b2 * v[i] + (1.0f - b2) * gi * gi;
        w[i] = w[i] * keep - lr * (a[i] * c1) / (std::sqrt(v[i] * c2) + eps);
      }
    }
    if (progress) progress(step, loss);

    if (cursor >= order.size()) {
      rep.epoch_recall.push_back(static_cast<double>(epoch_correct) / static_cast<double>(epoch_seen));
      epoch_correct = epoch_seen = 0;
      cursor = 0;
      std::shuffle(order.begin(), order.end(), rng);
    }
  }
  if (epoch_seen > 0) rep.epoch_recall.push_back(static_cast<double>(epoch_correct) / static_cast<double>(epoch_seen));
  rep.steps = hp.steps;
  rep.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return rep;
}

double evaluate_loss(const ModelBundle& model, std::span<const TrainSample> samples) {
  require(!samples.empty(), ErrorKind::InvalidInput, "evaluate_loss: no samples");
  const engine::Rope<float> rope(model.config);
  double total = 0.0;
  for (std::size_t lo = 0; lo < samples.size(); lo += 64) {
    const std::size_t hi = std::min(samples.size(), lo + 64);
    engine::Packing p;
    std::vector<int> targets;
    for (std::size_t i = lo; i < hi; ++i) {
      validate_sample(model.config, samples[i]);
      p.add(samples[i].tokens, model.config.n_heads);
      targets.push_back(samples[i].target);
    }
    total += static_cast<double>(engine::loss_only(model.config, model.weights, rope, p, targets)) * (hi - lo);
  }
  return total / static_cast<double>(samples.size());
}

namespace {

template <typename T>
GradCheckResult grad_check_impl(const ModelBundle& model, const TrainSample& sample, double epsilon, int coords) {
  const ModelConfig& c = model.config;
  Weights<T> w = model.weights.template cast<T>();
  const engine::Rope<T> rope(c);
  engine::Packing p;
  p.add(sample.tokens, c.n_heads);
  const std::vector<int> targets{sample.target};
  Weights<T> g = Weights<T>::zeros(c);
  engine::loss_and_backward(c, w, rope, p, targets, g, nullptr);

  std::vector<std::pair<std::string, BasicMatrix<T>*>> wt, gt;
  w.for_each([&](const std::string& n, BasicMatrix<T>& m) { wt.emplace_back(n, &m); });
  g.for_each([&](const std::string& n, BasicMatrix<T>& m) { gt.emplace_back(n, &m); });

  auto rng = substream(0x9c, "grad_check");
  GradCheckResult res;
  for (std::size_t t = 0; t < wt.size(); ++t) {
    BasicMatrix<T>& m = *wt[t].second;
    const BasicMatrix<T>& gm = *gt[t].second;
    // Probe the largest-gradient coordinates plus a random sample, so that
    // tensors with sparse gradients (embedding rows) are exercised.
    std::vector<std::size_t> idx(m.size());
    std::iota(idx.begin(), idx.end(), 0);
    const std::size_t k = std::min<std::size_t>(coords, m.size());
    std::partial_sort(idx.begin(), idx.begin() + k / 2, idx.end(),
                      [&](std::size_t a, std::size_t b) { return std::abs(gm.data()[a]) > std::abs(gm.data()[b]); });
    std::vector<std::size_t> picks(idx.begin(), idx.begin() + k / 2);
    std::uniform_int_distribution<std::size_t> pick(0, m.size() - 1);
    while (picks.size() < k) picks.push_back(pick(rng));

    double num = 0.0, den_a = 0.0, den_f = 0.0;
    for (std::size_t i : picks) {
      const T orig = m.data()[i];
      m.data()[i] = orig + static_cast<T>(epsilon);
      const double lp = engine::loss_only(c, w, rope, p, targets);
      m.data()[i] = orig - static_cast<T>(epsilon);
      const double lm = engine::loss_only(c, w, rope, p, targets);
      m.data()[i] = orig;
      const double fd = (lp - lm) / (2.0 * epsilon);
      const double an = gm.data()[i];
      num += (an - fd) * (an - fd);
      den_a += an * an;
      den_f += fd * fd;
    }
    const double scale = std::max(std::sqrt(den_a), std::sqrt(den_f));
    const double err = scale < 1e-10 ? 0.0 : std::sqrt(num) / scale;
    res.per_group[wt[t].first] = err;
    res.max_relative_error = std::max(res.max_relative_error, err);
  }
  return res;
}

}  // namespace

GradCheckResult grad_check(const ModelBundle& model, const TrainSample& sample, double epsilon, int coords_per_group,
                           bool float_precision) {
  model.config.validate();
  validate_sample(model.config, sample);
  require(epsilon > 0, ErrorKind::InvalidInput, "grad_check: epsilon must be positive");
  if (float_precision) return grad_check_impl<float>(model, sample, epsilon, coords_per_group);
  return grad_check_impl<double>(model, sample, epsilon, coords_per_group);
}

}  // namespace qlens
