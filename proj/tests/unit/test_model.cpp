#include <cmath>
#include <fstream>

#include "helpers.hpp"
#include "quantlens/container.hpp"
#include "quantlens/model.hpp"

using namespace qlens;
using qtest::kind_of;
using qtest::tiny_config;

namespace {

std::vector<int> random_tokens(std::size_t n, int vocab, std::uint64_t seed) {
  std::mt19937_64 g(seed);
  std::vector<int> t(n);
  for (auto& x : t) x = 2 + static_cast<int>(g() % static_cast<std::uint64_t>(vocab - 2));
  return t;
}

double max_abs_diff(std::span<const float> a, std::span<const float> b) {
  double d = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) d = std::max(d, std::abs(double(a[i]) - double(b[i])));
  return d;
}

}  // namespace

TEST_CASE("init is deterministic with unit norm scales and finite logits") {
  const ModelBundle a = init_model(tiny_config(), 3);
  const ModelBundle b = init_model(tiny_config(), 3);
  CHECK(a.digest() == b.digest());
  CHECK(init_model(tiny_config(), 4).digest() != a.digest());
  for (const auto& l : a.weights.layers) {
    for (float x : l.attn_norm.values()) CHECK(x == 1.0f);
    for (float x : l.ffn_norm.values()) CHECK(x == 1.0f);
  }
  for (float x : a.weights.final_norm.values()) CHECK(x == 1.0f);
  const auto r = forward(a, random_tokens(10, 64, 1));
  for (float x : r.logits) CHECK(std::isfinite(x));
  CHECK(r.logits.size() == 64);
}

TEST_CASE("attention rows are distributions over the causal prefix") {
  const ModelBundle m = init_model(tiny_config(), 1);
  CaptureFlags cap;
  cap.attention = true;
  const auto one = forward(m, random_tokens(1, 64, 2), cap);
  for (const auto& l : one.trace.layers)
    for (const auto& h : l.attention) CHECK(h(0, 0) == doctest::Approx(1.0).epsilon(1e-7));

  const auto r = forward(m, random_tokens(12, 64, 3), cap);
  for (const auto& l : r.trace.layers)
    for (const auto& h : l.attention)
      for (std::size_t t = 0; t < 12; ++t) {
        double s = 0.0;
        for (std::size_t u = 0; u <= t; ++u) s += h(t, u);
        CHECK(std::abs(s - 1.0) < 1e-6);
        for (std::size_t u = t + 1; u < 12; ++u) CHECK(h(t, u) == 0.0f);
      }
}

TEST_CASE("causality: later tokens do not change earlier logits") {
  const ModelBundle m = init_model(tiny_config(), 7);
  CaptureFlags cap;
  cap.all_logits = true;
  std::mt19937_64 g(5);
  for (int trial = 0; trial < 20; ++trial) {
    auto toks = random_tokens(10, 64, 100 + trial);
    const auto base = forward(m, toks, cap);
    const std::size_t cut = 1 + g() % 9;
    for (std::size_t i = cut; i < toks.size(); ++i) toks[i] = 2 + static_cast<int>(g() % 62);
    const auto changed = forward(m, toks, cap);
    for (std::size_t t = 0; t < cut; ++t) CHECK(max_abs_diff(base.trace.all_logits.row(t), changed.trace.all_logits.row(t)) == 0.0);
  }
}

TEST_CASE("patching semantics") {
  const ModelBundle m = init_model(tiny_config(), 9);
  const auto toks = random_tokens(8, 64, 4);
  CaptureFlags cap;
  cap.residual = cap.attn_out = cap.ffn_out = cap.h_key = true;
  const auto base = forward(m, toks, cap);

  const PatchSpec empty;
  CHECK(forward(m, toks, {}, &empty).logits == base.logits);

  PatchSpec self;
  for (int l = 0; l < 2; ++l)
    for (int t = 0; t < 8; ++t) {
      const auto row = base.trace.layers[l].residual_out.row(t);
      self.directives.push_back({PatchSite::ResidualOut, l, t, PatchAction::Replace, {row.begin(), row.end()}, 1.0f});
    }
  CHECK(max_abs_diff(forward(m, toks, {}, &self).logits, base.logits) < 1e-6);

  for (PatchSite site : {PatchSite::ResidualOut, PatchSite::AttnOut, PatchSite::FfnOut}) {
    PatchSpec z;
    z.directives.push_back({site, 1, 3, PatchAction::Zero, {}, 1.0f});
    const auto r = forward(m, toks, cap, &z);
    const auto& L = r.trace.layers[1];
    const MatrixF& mat = site == PatchSite::ResidualOut ? L.residual_out : site == PatchSite::AttnOut ? L.attn_out : L.ffn_out;
    for (float x : mat.row(3)) CHECK(x == 0.0f);
  }

  PatchSpec one;
  one.directives.push_back({PatchSite::AttnOut, 0, 2, PatchAction::Scale, {}, 1.0f});
  CHECK(forward(m, toks, {}, &one).logits == base.logits);

  PatchSpec bad;
  bad.directives.push_back({PatchSite::ResidualOut, 5, 0, PatchAction::Zero, {}, 1.0f});
  CHECK(kind_of([&] { forward(m, toks, {}, &bad); }) == ErrorKind::InvalidPatch);
  PatchSpec dup;
  dup.directives.push_back({PatchSite::ResidualOut, 0, 0, PatchAction::Zero, {}, 1.0f});
  dup.directives.push_back({PatchSite::ResidualOut, 0, 0, PatchAction::Scale, {}, 2.0f});
  CHECK(kind_of([&] { forward(m, toks, {}, &dup); }) == ErrorKind::InvalidPatch);
  PatchSpec short_vec;
  short_vec.directives.push_back({PatchSite::ResidualOut, 0, 0, PatchAction::Replace, {1.0f}, 1.0f});
  CHECK(kind_of([&] { forward(m, toks, {}, &short_vec); }) == ErrorKind::InvalidPatch);

  const std::vector<int> oob{1, 64};
  CHECK(kind_of([&] { forward(m, oob); }) == ErrorKind::InvalidInput);
  CHECK(kind_of([&] { forward(m, random_tokens(13, 64, 1)); }) == ErrorKind::InvalidInput);
}

TEST_CASE("h_value equals W_down h_key") {
  const ModelBundle m = init_model(tiny_config(), 2);
  CaptureFlags cap;
  cap.ffn_out = cap.h_key = true;
  const auto r = forward(m, random_tokens(6, 64, 8), cap);
  for (std::size_t l = 0; l < 2; ++l) {
    const auto& L = r.trace.layers[l];
    const auto& wd = m.weights.layers[l].w_down;
    for (std::size_t t = 0; t < 6; ++t)
      for (std::size_t i = 0; i < wd.rows(); ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < wd.cols(); ++j) s += double(wd(i, j)) * L.h_key(t, j);
        CHECK(std::abs(s - L.ffn_out(t, i)) < 1e-5);
      }
  }
}

TEST_CASE("packed batch is bit-identical to single forwards") {
  const ModelBundle m = init_model(tiny_config(), 4);
  std::vector<std::vector<int>> seqs;
  for (int i = 0; i < 7; ++i) seqs.push_back(random_tokens(3 + i, 64, 50 + i));
  PatchSpec p;
  p.directives.push_back({PatchSite::FfnOut, 1, 1, PatchAction::Scale, {}, 2.5f});
  std::vector<SequenceJob> jobs;
  for (std::size_t i = 0; i < seqs.size(); ++i) jobs.push_back({seqs[i], i % 2 ? &p : nullptr});
  CaptureFlags cap;
  cap.residual = true;
  const auto batch = forward_batch(m, jobs, cap);
  for (std::size_t i = 0; i < seqs.size(); ++i) {
    const auto single = forward(m, seqs[i], cap, i % 2 ? &p : nullptr);
    CHECK(single.logits == batch[i].logits);
    CHECK(single.trace.layers[1].residual_out == batch[i].trace.layers[1].residual_out);
  }
}

TEST_CASE("greedy tie-break and argmax") {
  std::vector<float> v(32, 0.0f);
  v[17] = 3.0f;
  CHECK(argmax_lowest(v) == 17);
  v[5] = 3.0f;
  CHECK(argmax_lowest(v) == 5);
  const auto p = softmax(v);
  double s = 0.0;
  for (double x : p) s += x;
  CHECK(s == doctest::Approx(1.0));
}

TEST_CASE("training: lr=0 leaves weights unchanged, default recipe lowers loss") {
  ModelBundle m = init_model(tiny_config(), 1);
  const std::string before = m.digest();
  std::vector<TrainSample> samples;
  for (int i = 0; i < 16; ++i) samples.push_back({random_tokens(5, 64, 200 + i), 2 + i});
  TrainHyperparams hp;
  hp.lr = 0.0;
  hp.steps = 5;
  train(m, samples, hp);
  CHECK(m.digest() == before);
  CHECK(kind_of([&] { train(m, std::span<const TrainSample>{}, hp); }) == ErrorKind::InvalidInput);

  // Default config and world, default hyperparameters: the loss on a fixed
  // probe set falls after each of the first ten steps.
  const World w = generate_world(WorldConfig{});
  std::vector<int> ids(w.facts.size());
  std::iota(ids.begin(), ids.end(), 0);
  std::vector<TrainSample> full;
  for (const auto& pr : render_all(w, ids)) full.push_back({pr.tokens, pr.target});
  ModelConfig c;
  c.vocab_size = static_cast<int>(w.vocab.size());
  ModelBundle big = init_model(c, 1);
  TrainHyperparams dh;
  dh.steps = 10;
  const std::vector<TrainSample> probe(full.begin(), full.begin() + 512);
  std::vector<double> losses{evaluate_loss(big, probe)};
  train(big, full, dh, [&](int, double) { losses.push_back(evaluate_loss(big, probe)); });
  REQUIRE(losses.size() == 11);
  for (std::size_t i = 1; i < losses.size(); ++i) CHECK(losses[i] < losses[i - 1]);
}

TEST_CASE("gradient check") {
  ModelConfig c = tiny_config(40);
  c.d_model = 16;
  const ModelBundle m = init_model(c, 11);
  const TrainSample s{{1, 5, 9, 12, 7, 3}, 20};
  const GradCheckResult r = grad_check(m, s, 1e-4, 12);
  CHECK(r.max_relative_error < 1e-3);
  CHECK(r.per_group.count("embed") == 1);

  // Truncation error shrinks with epsilon until round-off takes over.
  const double e3 = grad_check(m, s, 1e-3, 12).max_relative_error;
  const double e5 = grad_check(m, s, 1e-5, 12).max_relative_error;
  const double e10 = grad_check(m, s, 1e-10, 12).max_relative_error;
  CHECK(e5 < e3);
  CHECK(e10 > e5);
}

TEST_CASE("checkpoint round trip and corruption") {
  const auto dir = qtest::temp_dir("model");
  ModelBundle m = init_model(tiny_config(), 6);
  m.metadata["note"] = "x";
  m.codebook["layers.0.wq.scales"] = MatrixF(2, 3, 0.5f);
  const std::string path = (dir / "m.qlck").string();
  save_checkpoint(m, path);
  const ModelBundle back = load_checkpoint(path);
  CHECK(back.digest() == m.digest());
  CHECK(back.codebook.at("layers.0.wq.scales") == m.codebook.at("layers.0.wq.scales"));
  CHECK(back.metadata["note"] == "x");

  std::string bytes;
  {
    std::ifstream in(path, std::ios::binary);
    bytes.assign(std::istreambuf_iterator<char>(in), {});
  }
  auto write = [&](const std::string& b) { std::ofstream(path, std::ios::binary | std::ios::trunc) << b; };

  std::string flipped = bytes;
  flipped[80] ^= 0x20;  // inside the JSON header
  write(flipped);
  CHECK(kind_of([&] { load_checkpoint(path); }) == ErrorKind::CorruptCheckpoint);

  flipped = bytes;
  flipped[0] = 'X';
  write(flipped);
  CHECK(kind_of([&] { load_checkpoint(path); }) == ErrorKind::CorruptCheckpoint);

  write(bytes.substr(0, bytes.size() - 100));
  CHECK(kind_of([&] { load_checkpoint(path); }) == ErrorKind::CorruptCheckpoint);

  flipped = bytes;
  flipped[bytes.size() - 3] ^= 0x01;  // payload byte
  write(flipped);
  CHECK(kind_of([&] { load_checkpoint(path); }) == ErrorKind::CorruptCheckpoint);

  // Well-formed file whose declared d_model disagrees with the tensors.
  ModelConfig wrong = m.config;
  wrong.d_model = 20;
  wrong.head_dim = 10;
  std::vector<TensorRef> refs;
  m.weights.for_each([&](const std::string& n, const MatrixF& t) { refs.push_back({n, "weights", &t}); });
  write_container(path, "QLCK1", {{"config", wrong.to_json()}, {"metadata", nlohmann::json::object()}}, refs);
  try {
    load_checkpoint(path);
    FAIL("expected shape mismatch");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::CorruptCheckpoint);
    CHECK(std::string(e.what()).find("shape mismatch") != std::string::npos);
  }
  CHECK(kind_of([&] { load_checkpoint((dir / "missing.qlck").string()); }) == ErrorKind::NotFound);
}
