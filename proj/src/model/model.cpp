#include "quantlens/model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <set>
#include <tuple>

#include "engine.hpp"
#include "quantlens/error.hpp"
#include "quantlens/util.hpp"

namespace qlens {

using nlohmann::json;

void ModelConfig::validate() const {
  auto pos = [](auto v, const char* name) {
    if (!(v > 0)) fail(ErrorKind::InvalidConfig, std::string("model config: ") + name + " must be positive");
  };
  pos(n_layers, "n_layers");
  pos(d_model, "d_model");
  pos(n_heads, "n_heads");
  pos(head_dim, "head_dim");
  pos(d_ff, "d_ff");
  pos(vocab_size, "vocab_size");
  pos(max_seq_len, "max_seq_len");
  pos(rope_theta, "rope_theta");
  pos(rmsnorm_eps, "rmsnorm_eps");
  require(d_model == n_heads * head_dim, ErrorKind::InvalidConfig, "model config: d_model must equal n_heads * head_dim");
  require(head_dim % 2 == 0, ErrorKind::InvalidConfig, "model config: head_dim must be even for RoPE");
  require(d_ff >= d_model, ErrorKind::InvalidConfig, "model config: d_ff must be >= d_model");
}

json ModelConfig::to_json() const {
  return json{{"n_layers", n_layers},       {"d_model", d_model},         {"n_heads", n_heads},
              {"head_dim", head_dim},       {"d_ff", d_ff},               {"vocab_size", vocab_size},
              {"max_seq_len", max_seq_len}, {"rope_theta", rope_theta},   {"rmsnorm_eps", rmsnorm_eps}};
}

ModelConfig ModelConfig::from_json(const json& j) {
  ModelConfig c;
  try {
    c.n_layers = j.value("n_layers", c.n_layers);
    c.d_model = j.value("d_model", c.d_model);
    c.n_heads = j.value("n_heads", c.n_heads);
    c.head_dim = j.value("head_dim", c.head_dim);
    c.d_ff = j.value("d_ff", c.d_ff);
    c.vocab_size = j.value("vocab_size", c.vocab_size);
    c.max_seq_len = j.value("max_seq_len", c.max_seq_len);
    c.rope_theta = j.value("rope_theta", c.rope_theta);
    c.rmsnorm_eps = j.value("rmsnorm_eps", c.rmsnorm_eps);
  } catch (const json::exception& e) {
    fail(ErrorKind::InvalidConfig, std::string("model config: ") + e.what());
  }
  return c;
}

std::string_view component_name(Component c) {
  switch (c) {
    case Component::Q: return "q";
    case Component::K: return "k";
    case Component::V: return "v";
    case Component::O: return "o";
    case Component::Gate: return "gate";
    case Component::Up: return "up";
    case Component::Down: return "down";
  }
  return "?";
}

Component parse_component(std::string_view name) {
  for (Component c : kAllComponents)
    if (component_name(c) == name) return c;
  fail(ErrorKind::InvalidConfig, "unknown component '" + std::string(name) + "'");
}

std::string tensor_name(int layer, Component c) {
  static constexpr const char* kNames[] = {"wq", "wk", "wv", "wo", "w_gate", "w_up", "w_down"};
  return "layers." + std::to_string(layer) + "." + kNames[static_cast<int>(c)];
}

std::string_view to_string(PatchSite site) {
  switch (site) {
    case PatchSite::ResidualOut: return "residual_out";
    case PatchSite::AttnOut: return "attn_out";
    case PatchSite::FfnOut: return "ffn_out";
  }
  return "?";
}

template <typename T>
BasicMatrix<T>& LayerWeights<T>::matrix(Component c) {
  switch (c) {
    case Component::Q: return wq;
    case Component::K: return wk;
    case Component::V: return wv;
    case Component::O: return wo;
    case Component::Gate: return w_gate;
    case Component::Up: return w_up;
    case Component::Down: return w_down;
  }
  fail(ErrorKind::InvalidInput, "bad component");
}

template <typename T>
const BasicMatrix<T>& LayerWeights<T>::matrix(Component c) const {
  return const_cast<LayerWeights*>(this)->matrix(c);
}

template <typename T>
Weights<T> Weights<T>::zeros(const ModelConfig& c) {
  const std::size_t d = c.d_model, ff = c.d_ff, V = c.vocab_size;
  Weights w;
  w.embed = BasicMatrix<T>(V, d);
  w.layers.resize(c.n_layers);
  for (auto& L : w.layers) {
    L.wq = BasicMatrix<T>(d, d);
    L.wk = BasicMatrix<T>(d, d);
    L.wv = BasicMatrix<T>(d, d);
    L.wo = BasicMatrix<T>(d, d);
    L.w_gate = BasicMatrix<T>(ff, d);
    L.w_up = BasicMatrix<T>(ff, d);
    L.w_down = BasicMatrix<T>(d, ff);
    L.attn_norm = BasicMatrix<T>(1, d);
    L.ffn_norm = BasicMatrix<T>(1, d);
  }
  w.final_norm = BasicMatrix<T>(1, d);
  w.unembed = BasicMatrix<T>(V, d);
  return w;
}

template <typename T>
template <typename U>
Weights<U> Weights<T>::cast() const {
  Weights<U> out;
  out.layers.resize(layers.size());
  out.embed = embed.template cast<U>();
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const auto& a = layers[l];
    auto& b = out.layers[l];
    b.wq = a.wq.template cast<U>();
    b.wk = a.wk.template cast<U>();
    b.wv = a.wv.template cast<U>();
    b.wo = a.wo.template cast<U>();
    b.w_gate = a.w_gate.template cast<U>();
    b.w_up = a.w_up.template cast<U>();
    b.w_down = a.w_down.template cast<U>();
    b.attn_norm = a.attn_norm.template cast<U>();
    b.ffn_norm = a.ffn_norm.template cast<U>();
  }
  out.final_norm = final_norm.template cast<U>();
  out.unembed = unembed.template cast<U>();
  return out;
}

template struct LayerWeights<float>;
template struct LayerWeights<double>;
template struct Weights<float>;
template struct Weights<double>;
template Weights<double> Weights<float>::cast<double>() const;
template Weights<float> Weights<double>::cast<float>() const;
template Weights<float> Weights<float>::cast<float>() const;

std::string ModelBundle::digest() const {
  Sha256 h;
  h.update(config.to_json().dump());
  weights.for_each([&](const std::string& name, const MatrixF& m) {
    h.update(name);
    const std::uint64_t shape[2] = {m.rows(), m.cols()};
    h.update(shape, sizeof(shape));
    h.update(m.data(), m.size() * sizeof(float));
  });
  return h.hex_digest();
}

ModelBundle init_model(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  ModelBundle b;
  b.config = config;
  b.weights = Weights<float>::zeros(config);
  auto rng = substream(seed, "init");
  b.weights.for_each([&](const std::string& name, MatrixF& m) {
    if (name.ends_with("norm")) {
      std::fill(m.values().begin(), m.values().end(), 1.0f);
      return;
    }
    // Embedding rows are looked up, not multiplied, so they get unit scale.
    const double fan_in = name == "embed" ? 1.0 : static_cast<double>(m.cols());
    std::normal_distribution<double> nd(0.0, 1.0 / std::sqrt(fan_in));
    for (auto& x : m.values()) x = static_cast<float>(nd(rng));
  });
  return b;
}

CaptureFlags CaptureFlags::everything() {
  CaptureFlags f;
  f.residual = f.attn_out = f.ffn_out = f.gate_preact = f.h_key = f.attention = f.linear_inputs = f.all_logits = true;
  return f;
}

void validate_patch(const PatchSpec& patch, const ModelConfig& config, std::size_t seq_len) {
  std::set<std::tuple<int, int, int>> seen;
  for (const auto& d : patch.directives) {
    if (d.layer < 0 || d.layer >= config.n_layers)
      fail(ErrorKind::InvalidPatch, "patch layer " + std::to_string(d.layer) + " out of range");
    if (d.position < 0 || static_cast<std::size_t>(d.position) >= seq_len)
      fail(ErrorKind::InvalidPatch, "patch position " + std::to_string(d.position) + " out of range");
    if (d.action == PatchAction::Replace && d.value.size() != static_cast<std::size_t>(config.d_model))
      fail(ErrorKind::InvalidPatch, "replacement vector has " + std::to_string(d.value.size()) + " entries, expected " +
                                        std::to_string(config.d_model));
    if (d.action == PatchAction::Scale && !std::isfinite(d.alpha))
      fail(ErrorKind::InvalidPatch, "non-finite scale factor");
    if (!seen.emplace(static_cast<int>(d.site), d.layer, d.position).second)
      fail(ErrorKind::InvalidPatch, "duplicate directive for " + std::string(to_string(d.site)) + " layer " +
                                        std::to_string(d.layer) + " position " + std::to_string(d.position));
  }
}

namespace {

void validate_tokens(const ModelConfig& c, std::span<const int> tokens) {
  require(!tokens.empty(), ErrorKind::InvalidInput, "forward: empty token sequence");
  if (tokens.size() > static_cast<std::size_t>(c.max_seq_len))
    fail(ErrorKind::InvalidInput, "forward: sequence length " + std::to_string(tokens.size()) + " exceeds max_seq_len " +
                                      std::to_string(c.max_seq_len));
  for (int t : tokens)
    if (t < 0 || t >= c.vocab_size) fail(ErrorKind::InvalidInput, "forward: token id " + std::to_string(t) + " out of range");
}

MatrixF slice_rows(const MatrixF& m, std::size_t begin, std::size_t count) {
  MatrixF out(count, m.cols());
  std::copy_n(m.data() + begin * m.cols(), count * m.cols(), out.data());
  return out;
}

constexpr std::size_t kChunkSeqs = 64;

void run_chunk(const ModelBundle& model, const engine::Rope<float>& rope, std::span<const SequenceJob> jobs,
               const CaptureFlags& cap, int stop_after_layer, std::span<ForwardResult> out) {
  const ModelConfig& c = model.config;
  engine::Packing p;
  std::vector<const PatchSpec*> specs;
  for (const auto& j : jobs) {
    p.add(j.tokens, c.n_heads);
    specs.push_back(j.patch && !j.patch->empty() ? j.patch : nullptr);
  }
  const engine::PatchIndex patches(p, specs, c.n_layers);
  const bool layer_sites = cap.any_layer_site();
  for (std::size_t s = 0; s < p.seqs(); ++s) {
    out[s].trace.seq_len = p.len(s);
    out[s].trace.captured = cap;
    if (layer_sites) out[s].trace.layers.resize(stop_after_layer < 0 ? c.n_layers : stop_after_layer + 1);
  }

  std::vector<engine::LayerActs<float>> acts;
  engine::run_blocks(c, model.weights, rope, p, patches, engine::RunOptions{stop_after_layer, false}, acts,
                     [&](int l, const engine::LayerActs<float>& A) {
                       if (!layer_sites || (cap.only_layer >= 0 && l != cap.only_layer)) return;
                       for (std::size_t s = 0; s < p.seqs(); ++s) {
                         const std::size_t o = p.offsets[s], L = p.len(s);
                         LayerTrace& t = out[s].trace.layers[l];
                         if (cap.residual) t.residual_out = slice_rows(A.x_out, o, L);
                         if (cap.attn_out) t.attn_out = slice_rows(A.attn_out, o, L);
                         if (cap.ffn_out) t.ffn_out = slice_rows(A.ffn_out, o, L);
                         if (cap.gate_preact) t.gate_preact = slice_rows(A.gate, o, L);
                         if (cap.h_key) t.h_key = slice_rows(A.key, o, L);
                         if (cap.linear_inputs) {
                           t.attn_in = slice_rows(A.a, o, L);
                           t.attn_ctx = slice_rows(A.ctx, o, L);
                           t.ffn_in = slice_rows(A.f, o, L);
                         }
                         if (cap.attention) {
                           t.attention.resize(c.n_heads);
                           for (int h = 0; h < c.n_heads; ++h) {
                             const float* P = A.probs.data() + p.prob_offsets[s] + static_cast<std::size_t>(h) * L * L;
                             t.attention[h] = MatrixF(L, L, std::vector<float>(P, P + L * L));
                           }
                         }
                       }
                     });
  if (stop_after_layer >= 0) return;

  const MatrixF& x = acts.back().x_out;
  std::vector<std::size_t> rows;
  if (cap.all_logits) {
    rows.resize(p.rows());
    for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = i;
  } else {
    for (std::size_t s = 0; s < p.seqs(); ++s) rows.push_back(p.last_row(s));
  }
  MatrixF normed, logits;
  std::vector<float> inv;
  engine::head(c, model.weights, x, rows, normed, inv, logits);
  for (std::size_t s = 0; s < p.seqs(); ++s) {
    const std::size_t r = cap.all_logits ? p.last_row(s) : s;
    out[s].logits.assign(logits.row(r).begin(), logits.row(r).end());
    out[s].trace.final_hidden.assign(normed.row(r).begin(), normed.row(r).end());
    if (cap.all_logits) out[s].trace.all_logits = slice_rows(logits, p.offsets[s], p.len(s));
  }
}

}  // namespace

std::vector<ForwardResult> forward_batch(const ModelBundle& model, std::span<const SequenceJob> jobs,
                                         const CaptureFlags& capture, int stop_after_layer) {
  const ModelConfig& c = model.config;
  require(stop_after_layer < c.n_layers, ErrorKind::InvalidInput, "forward: stop layer out of range");
  for (const auto& j : jobs) {
    validate_tokens(c, j.tokens);
    if (j.patch) validate_patch(*j.patch, c, j.tokens.size());
  }
  std::vector<ForwardResult> out(jobs.size());
  if (jobs.empty()) return out;
  const engine::Rope<float> rope(c);
  const std::size_t chunks = (jobs.size() + kChunkSeqs - 1) / kChunkSeqs;
  parallel_for(chunks, resolve_threads(0), [&](std::size_t b, std::size_t e) {
    for (std::size_t ch = b; ch < e; ++ch) {
      const std::size_t lo = ch * kChunkSeqs, hi = std::min(jobs.size(), lo + kChunkSeqs);
      run_chunk(model, rope, jobs.subspan(lo, hi - lo), capture, stop_after_layer,
                std::span<ForwardResult>(out).subspan(lo, hi - lo));
    }
  });
  return out;
}

ForwardResult forward(const ModelBundle& model, std::span<const int> tokens, const CaptureFlags& capture,
                      const PatchSpec* patch) {
  const SequenceJob job{tokens, patch};
  return std::move(forward_batch(model, std::span<const SequenceJob>(&job, 1), capture).front());
}

int argmax_lowest(std::span<const float> v) {
  require(!v.empty(), ErrorKind::InvalidInput, "argmax of empty vector");
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i)
    if (v[i] > v[best]) best = i;
  return static_cast<int>(best);
}

std::vector<double> softmax(std::span<const float> logits) {
  std::vector<double> p(logits.size());
  if (logits.empty()) return p;
  const double mx = *std::max_element(logits.begin(), logits.end());
  double sum = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    p[i] = std::exp(static_cast<double>(logits[i]) - mx);
    sum += p[i];
  }
  for (auto& x : p) x /= sum;
  return p;
}

Prediction greedy_predict(const ModelBundle& model, std::span<const int> tokens, const PatchSpec* patch) {
  const auto r = forward(model, tokens, {}, patch);
  return {argmax_lowest(r.logits), softmax(r.logits)};
}

}  // namespace qlens
