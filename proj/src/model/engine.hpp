#pragma once
// Templated transformer engine shared by inference (float), training (float)
// and gradient checking (double). Sequences are packed row-wise; attention
// never crosses a segment boundary.

#include <algorithm>
#include <cmath>
#include <vector>

#include "quantlens/error.hpp"
#include "quantlens/kernels.hpp"
#include "quantlens/model.hpp"

namespace qlens::engine {

struct Packing {
  std::vector<int> tokens;
  std::vector<std::size_t> offsets{0};  // seqs + 1
  std::vector<std::size_t> prob_offsets{0};

  void add(std::span<const int> seq, int n_heads) {
    tokens.insert(tokens.end(), seq.begin(), seq.end());
    offsets.push_back(tokens.size());
    prob_offsets.push_back(prob_offsets.back() + static_cast<std::size_t>(n_heads) * seq.size() * seq.size());
  }
  std::size_t rows() const { return tokens.size(); }
  std::size_t seqs() const { return offsets.size() - 1; }
  std::size_t len(std::size_t s) const { return offsets[s + 1] - offsets[s]; }
  std::size_t last_row(std::size_t s) const { return offsets[s + 1] - 1; }
};

template <typename T>
struct Rope {
  std::vector<T> cos, sin;  // max_seq_len x head_dim/2
  std::size_t half = 0;

  explicit Rope(const ModelConfig& c) : half(static_cast<std::size_t>(c.head_dim / 2)) {
    cos.resize(c.max_seq_len * half);
    sin.resize(c.max_seq_len * half);
    for (int t = 0; t < c.max_seq_len; ++t) {
      for (std::size_t i = 0; i < half; ++i) {
        const double freq = std::pow(c.rope_theta, -2.0 * static_cast<double>(i) / c.head_dim);
        const double ang = t * freq;
        cos[t * half + i] = static_cast<T>(std::cos(ang));
        sin[t * half + i] = static_cast<T>(std::sin(ang));
      }
    }
  }
};

template <typename T>
struct LayerActs {
  BasicMatrix<T> x_in;   // residual entering the block
  BasicMatrix<T> a;      // attention-normed input
  std::vector<T> inv_a;  // per-row 1/rms
  BasicMatrix<T> q, k, v;
  std::vector<T> probs;
  BasicMatrix<T> ctx;
  BasicMatrix<T> attn_out;
  BasicMatrix<T> x_mid;
  BasicMatrix<T> f;
  std::vector<T> inv_f;
  BasicMatrix<T> gate, up, key;
  BasicMatrix<T> ffn_out;
  BasicMatrix<T> x_out;
};

// Per-sequence patch directives for one (layer, site).
struct PatchIndex {
  // patches[layer][site] -> list of (row, directive*)
  std::vector<std::array<std::vector<std::pair<std::size_t, const PatchDirective*>>, 3>> by_layer;
  bool any = false;

  PatchIndex(const Packing& p, std::span<const PatchSpec* const> specs, int n_layers) : by_layer(n_layers) {
    for (std::size_t s = 0; s < specs.size(); ++s) {
      if (!specs[s]) continue;
      for (const auto& d : specs[s]->directives) {
        by_layer[d.layer][static_cast<int>(d.site)].emplace_back(p.offsets[s] + d.position, &d);
        any = true;
      }
    }
  }
};

template <typename T>
void apply_patches(BasicMatrix<T>& m, const std::vector<std::pair<std::size_t, const PatchDirective*>>& list) {
  for (const auto& [row, d] : list) {
    auto r = m.row(row);
    switch (d->action) {
      case PatchAction::Replace:
        for (std::size_t j = 0; j < r.size(); ++j) r[j] = static_cast<T>(d->value[j]);
        break;
      case PatchAction::Zero:
        std::fill(r.begin(), r.end(), T(0));
        break;
      case PatchAction::Scale:
        for (auto& x : r) x *= static_cast<T>(d->alpha);
        break;
    }
  }
}

template <typename T>
void rmsnorm(const BasicMatrix<T>& x, const BasicMatrix<T>& g, double eps, BasicMatrix<T>& y, std::vector<T>& inv) {
  const std::size_t n = x.rows(), d = x.cols();
  y = BasicMatrix<T>(n, d);
  inv.assign(n, T(0));
  for (std::size_t i = 0; i < n; ++i) {
    const T* xr = x.data() + i * d;
    T ss = 0;
    for (std::size_t j = 0; j < d; ++j) ss += xr[j] * xr[j];
    const T r = T(1) / std::sqrt(ss / static_cast<T>(d) + static_cast<T>(eps));
    inv[i] = r;
    T* yr = y.data() + i * d;
    for (std::size_t j = 0; j < d; ++j) yr[j] = xr[j] * r * g.data()[j];
  }
}

// dx += backward of y = x * inv * g; dg += dy * x * inv
template <typename T>
void rmsnorm_backward(const BasicMatrix<T>& x, const BasicMatrix<T>& g, const std::vector<T>& inv,
                      const BasicMatrix<T>& dy, BasicMatrix<T>& dx, BasicMatrix<T>& dg) {
  const std::size_t n = x.rows(), d = x.cols();
  for (std::size_t i = 0; i < n; ++i) {
    const T* xr = x.data() + i * d;
    const T* dyr = dy.data() + i * d;
    T* dxr = dx.data() + i * d;
    const T r = inv[i];
    T s = 0;
    for (std::size_t j = 0; j < d; ++j) {
      s += dyr[j] * g.data()[j] * xr[j];
      dg.data()[j] += dyr[j] * xr[j] * r;
    }
    const T c = r * r * r * s / static_cast<T>(d);
    for (std::size_t j = 0; j < d; ++j) dxr[j] += r * g.data()[j] * dyr[j] - c * xr[j];
  }
}

// y = x W^T
template <typename T>
void linear(const BasicMatrix<T>& x, const BasicMatrix<T>& w, BasicMatrix<T>& y) {
  y = BasicMatrix<T>(x.rows(), w.rows());
  kernels::gemm_nt(x.view(), w.view(), y.view(), false);
}

template <typename T>
void apply_rope(BasicMatrix<T>& m, const Packing& p, const Rope<T>& rope, int n_heads, int head_dim) {
  for (std::size_t s = 0; s < p.seqs(); ++s) {
    for (std::size_t t = 0; t < p.len(s); ++t) {
      T* r = m.data() + (p.offsets[s] + t) * m.cols();
      const T* c = rope.cos.data() + t * rope.half;
      const T* sn = rope.sin.data() + t * rope.half;
      for (int h = 0; h < n_heads; ++h) {
        T* hr = r + h * head_dim;
        for (std::size_t i = 0; i < rope.half; ++i) {
          const T x0 = hr[2 * i], x1 = hr[2 * i + 1];
          hr[2 * i] = x0 * c[i] - x1 * sn[i];
          hr[2 * i + 1] = x0 * sn[i] + x1 * c[i];
        }
      }
    }
  }
}

// Inverse rotation, used for gradients.
template <typename T>
void unrope(BasicMatrix<T>& m, const Packing& p, const Rope<T>& rope, int n_heads, int head_dim) {
  for (std::size_t s = 0; s < p.seqs(); ++s) {
    for (std::size_t t = 0; t < p.len(s); ++t) {
      T* r = m.data() + (p.offsets[s] + t) * m.cols();
      const T* c = rope.cos.data() + t * rope.half;
      const T* sn = rope.sin.data() + t * rope.half;
      for (int h = 0; h < n_heads; ++h) {
        T* hr = r + h * head_dim;
        for (std::size_t i = 0; i < rope.half; ++i) {
          const T y0 = hr[2 * i], y1 = hr[2 * i + 1];
          hr[2 * i] = y0 * c[i] + y1 * sn[i];
          hr[2 * i + 1] = -y0 * sn[i] + y1 * c[i];
        }
      }
    }
  }
}

template <typename T>
void attention(const ModelConfig& cfg, const Packing& p, LayerActs<T>& A) {
  const std::size_t d = cfg.d_model, hd = cfg.head_dim;
  const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(hd)));
  A.probs.assign(p.prob_offsets.back(), T(0));
  A.ctx = BasicMatrix<T>(p.rows(), d);
  std::vector<T> scores;
  for (std::size_t s = 0; s < p.seqs(); ++s) {
    const std::size_t L = p.len(s), o = p.offsets[s];
    for (int h = 0; h < cfg.n_heads; ++h) {
      T* P = A.probs.data() + p.prob_offsets[s] + static_cast<std::size_t>(h) * L * L;
      for (std::size_t i = 0; i < L; ++i) {
        const std::span<const T> qi(A.q.data() + (o + i) * d + h * hd, hd);
        scores.resize(i + 1);
        T mx = -std::numeric_limits<T>::infinity();
        for (std::size_t j = 0; j <= i; ++j) {
          scores[j] = kernels::dot(qi, std::span<const T>(A.k.data() + (o + j) * d + h * hd, hd)) * scale;
          mx = std::max(mx, scores[j]);
        }
        T sum = 0;
        for (std::size_t j = 0; j <= i; ++j) {
          scores[j] = std::exp(scores[j] - mx);
          sum += scores[j];
        }
        const std::span<T> ci(A.ctx.data() + (o + i) * d + h * hd, hd);
        for (std::size_t j = 0; j <= i; ++j) {
          P[i * L + j] = scores[j] / sum;
          kernels::axpy(ci, P[i * L + j], std::span<const T>(A.v.data() + (o + j) * d + h * hd, hd));
        }
      }
    }
  }
}

template <typename T>
void attention_backward(const ModelConfig& cfg, const Packing& p, const LayerActs<T>& A, const BasicMatrix<T>& dctx,
                        BasicMatrix<T>& dq, BasicMatrix<T>& dk, BasicMatrix<T>& dv) {
  const std::size_t d = cfg.d_model, hd = cfg.head_dim;
  const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(hd)));
  dq = BasicMatrix<T>(p.rows(), d);
  dk = BasicMatrix<T>(p.rows(), d);
  dv = BasicMatrix<T>(p.rows(), d);
  std::vector<T> dp;
  for (std::size_t s = 0; s < p.seqs(); ++s) {
    const std::size_t L = p.len(s), o = p.offsets[s];
    for (int h = 0; h < cfg.n_heads; ++h) {
      const T* P = A.probs.data() + p.prob_offsets[s] + static_cast<std::size_t>(h) * L * L;
      for (std::size_t i = 0; i < L; ++i) {
        const std::span<const T> dci(dctx.data() + (o + i) * d + h * hd, hd);
        dp.resize(i + 1);
        T dot_pd = 0;
        for (std::size_t j = 0; j <= i; ++j) {
          const T pij = P[i * L + j];
          dp[j] = kernels::dot(dci, std::span<const T>(A.v.data() + (o + j) * d + h * hd, hd));
          kernels::axpy(std::span<T>(dv.data() + (o + j) * d + h * hd, hd), pij, dci);
          dot_pd += pij * dp[j];
        }
        const std::span<T> dqi(dq.data() + (o + i) * d + h * hd, hd);
        const std::span<const T> qi(A.q.data() + (o + i) * d + h * hd, hd);
        for (std::size_t j = 0; j <= i; ++j) {
          const T ds = P[i * L + j] * (dp[j] - dot_pd) * scale;
          if (ds == T(0)) continue;
          kernels::axpy(dqi, ds, std::span<const T>(A.k.data() + (o + j) * d + h * hd, hd));
          kernels::axpy(std::span<T>(dk.data() + (o + j) * d + h * hd, hd), ds, qi);
        }
      }
    }
  }
}

template <typename T>
inline T sigmoid(T x) {
  return T(1) / (T(1) + std::exp(-x));
}

struct RunOptions {
  int stop_after_layer = -1;  // inclusive, -1 = all
  bool keep_all = false;      // keep every layer's activations (training)
};

// Runs the blocks. `acts` receives one entry per executed layer when keep_all,
// otherwise a single reusable slot. `on_layer(l, acts)` fires after each block.
template <typename T, typename OnLayer>
void run_blocks(const ModelConfig& cfg, const Weights<T>& w, const Rope<T>& rope, const Packing& p,
                const PatchIndex& patches, const RunOptions& opt, std::vector<LayerActs<T>>& acts, OnLayer&& on_layer) {
  const std::size_t n = p.rows(), d = cfg.d_model;
  const int last = opt.stop_after_layer < 0 ? cfg.n_layers - 1 : std::min(opt.stop_after_layer, cfg.n_layers - 1);
  acts.assign(opt.keep_all ? last + 1 : 1, LayerActs<T>{});

  BasicMatrix<T> x(n, d);
  for (std::size_t i = 0; i < n; ++i) {
    const int tok = p.tokens[i];
    std::copy_n(w.embed.data() + static_cast<std::size_t>(tok) * d, d, x.data() + i * d);
  }

  for (int l = 0; l <= last; ++l) {
    LayerActs<T>& A = acts[opt.keep_all ? l : 0];
    const LayerWeights<T>& L = w.layers[l];
    A.x_in = std::move(x);

    rmsnorm(A.x_in, L.attn_norm, cfg.rmsnorm_eps, A.a, A.inv_a);
    linear(A.a, L.wq, A.q);
    linear(A.a, L.wk, A.k);
    linear(A.a, L.wv, A.v);
    apply_rope(A.q, p, rope, cfg.n_heads, cfg.head_dim);
    apply_rope(A.k, p, rope, cfg.n_heads, cfg.head_dim);
    attention(cfg, p, A);
    linear(A.ctx, L.wo, A.attn_out);
    if (patches.any) apply_patches(A.attn_out, patches.by_layer[l][static_cast<int>(PatchSite::AttnOut)]);

    A.x_mid = A.x_in;
    for (std::size_t i = 0; i < A.x_mid.size(); ++i) A.x_mid.data()[i] += A.attn_out.data()[i];

    rmsnorm(A.x_mid, L.ffn_norm, cfg.rmsnorm_eps, A.f, A.inv_f);
    linear(A.f, L.w_gate, A.gate);
    linear(A.f, L.w_up, A.up);
    A.key = BasicMatrix<T>(n, cfg.d_ff);
    for (std::size_t i = 0; i < A.key.size(); ++i) {
      const T g = A.gate.data()[i];
      A.key.data()[i] = g * sigmoid(g) * A.up.data()[i];
    }
    linear(A.key, L.w_down, A.ffn_out);
    if (patches.any) apply_patches(A.ffn_out, patches.by_layer[l][static_cast<int>(PatchSite::FfnOut)]);

    A.x_out = A.x_mid;
    for (std::size_t i = 0; i < A.x_out.size(); ++i) A.x_out.data()[i] += A.ffn_out.data()[i];
    if (patches.any) apply_patches(A.x_out, patches.by_layer[l][static_cast<int>(PatchSite::ResidualOut)]);

    on_layer(l, A);
    x = A.x_out;
  }
}

// Final norm + unembedding for selected rows of the last residual.
template <typename T>
void head(const ModelConfig& cfg, const Weights<T>& w, const BasicMatrix<T>& x, const std::vector<std::size_t>& rows,
          BasicMatrix<T>& normed, std::vector<T>& inv, BasicMatrix<T>& logits) {
  BasicMatrix<T> sel(rows.size(), x.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) std::copy_n(x.data() + rows[i] * x.cols(), x.cols(), sel.data() + i * x.cols());
  rmsnorm(sel, w.final_norm, cfg.rmsnorm_eps, normed, inv);
  linear(normed, w.unembed, logits);
}

// Cross-entropy at each sequence's last position. Fills grads (which must be
// zero-shaped like w) and returns the mean loss. `correct` receives whether
// the argmax matched the target.
template <typename T>
T loss_and_backward(const ModelConfig& cfg, const Weights<T>& w, const Rope<T>& rope, const Packing& p,
                    std::span<const int> targets, Weights<T>& grads, std::vector<bool>* correct) {
  std::vector<LayerActs<T>> acts;
  const PatchIndex no_patch(p, {}, cfg.n_layers);
  run_blocks(cfg, w, rope, p, no_patch, RunOptions{-1, true}, acts, [](int, const LayerActs<T>&) {});

  const std::size_t S = p.seqs(), n = p.rows(), d = cfg.d_model, V = cfg.vocab_size;
  std::vector<std::size_t> last_rows(S);
  for (std::size_t s = 0; s < S; ++s) last_rows[s] = p.last_row(s);
  BasicMatrix<T> normed, logits;
  std::vector<T> inv;
  head(cfg, w, acts.back().x_out, last_rows, normed, inv, logits);

  BasicMatrix<T> dlogits(S, V);
  T loss = 0;
  if (correct) correct->assign(S, false);
  for (std::size_t s = 0; s < S; ++s) {
    const T* lr = logits.data() + s * V;
    T* dr = dlogits.data() + s * V;
    std::size_t best = 0;
    T mx = lr[0];
    for (std::size_t j = 1; j < V; ++j)
      if (lr[j] > mx) {
        mx = lr[j];
        best = j;
      }
    T sum = 0;
    for (std::size_t j = 0; j < V; ++j) {
      dr[j] = std::exp(lr[j] - mx);
      sum += dr[j];
    }
    const int tgt = targets[s];
    loss += -(lr[tgt] - mx - std::log(sum));
    for (std::size_t j = 0; j < V; ++j) dr[j] = dr[j] / sum / static_cast<T>(S);
    dr[tgt] -= T(1) / static_cast<T>(S);
    if (correct) (*correct)[s] = static_cast<int>(best) == tgt;
  }
  loss /= static_cast<T>(S);

  // Unembedding and final norm.
  kernels::gemm_tn(dlogits.view(), normed.view(), grads.unembed.view());
  BasicMatrix<T> dnormed(S, d);
  kernels::gemm_nn(dlogits.view(), w.unembed.view(), dnormed.view());
  BasicMatrix<T> sel(S, d);
  for (std::size_t s = 0; s < S; ++s) std::copy_n(acts.back().x_out.data() + last_rows[s] * d, d, sel.data() + s * d);
  BasicMatrix<T> dsel(S, d);
  rmsnorm_backward(sel, w.final_norm, inv, dnormed, dsel, grads.final_norm);

  BasicMatrix<T> dx(n, d);
  for (std::size_t s = 0; s < S; ++s) std::copy_n(dsel.data() + s * d, d, dx.data() + last_rows[s] * d);

  BasicMatrix<T> tmp_ff, dgate, dup, df, dctx, dq, dk, dv, da;
  for (int l = cfg.n_layers - 1; l >= 0; --l) {
    const LayerActs<T>& A = acts[l];
    const LayerWeights<T>& L = w.layers[l];
    LayerWeights<T>& G = grads.layers[l];

    // FFN branch: dx is the gradient wrt x_out, which equals d ffn_out.
    kernels::gemm_tn(dx.view(), A.key.view(), G.w_down.view());
    tmp_ff = BasicMatrix<T>(n, cfg.d_ff);
    kernels::gemm_nn(dx.view(), L.w_down.view(), tmp_ff.view());
    dgate = BasicMatrix<T>(n, cfg.d_ff);
    dup = BasicMatrix<T>(n, cfg.d_ff);
    for (std::size_t i = 0; i < tmp_ff.size(); ++i) {
      const T g = A.gate.data()[i];
      const T sg = sigmoid(g);
      const T silu = g * sg;
      dup.data()[i] = tmp_ff.data()[i] * silu;
      dgate.data()[i] = tmp_ff.data()[i] * A.up.data()[i] * sg * (T(1) + g * (T(1) - sg));
    }
    kernels::gemm_tn(dgate.view(), A.f.view(), G.w_gate.view());
    kernels::gemm_tn(dup.view(), A.f.view(), G.w_up.view());
    df = BasicMatrix<T>(n, d);
    kernels::gemm_nn(dgate.view(), L.w_gate.view(), df.view());
    kernels::gemm_nn(dup.view(), L.w_up.view(), df.view());
    rmsnorm_backward(A.x_mid, L.ffn_norm, A.inv_f, df, dx, G.ffn_norm);  // dx now wrt x_mid

    // Attention branch.
    kernels::gemm_tn(dx.view(), A.ctx.view(), G.wo.view());
    dctx = BasicMatrix<T>(n, d);
    kernels::gemm_nn(dx.view(), L.wo.view(), dctx.view());
    attention_backward(cfg, p, A, dctx, dq, dk, dv);
    unrope(dq, p, rope, cfg.n_heads, cfg.head_dim);
    unrope(dk, p, rope, cfg.n_heads, cfg.head_dim);
    kernels::gemm_tn(dq.view(), A.a.view(), G.wq.view());
    kernels::gemm_tn(dk.view(), A.a.view(), G.wk.view());
    kernels::gemm_tn(dv.view(), A.a.view(), G.wv.view());
    da = BasicMatrix<T>(n, d);
    kernels::gemm_nn(dq.view(), L.wq.view(), da.view());
    kernels::gemm_nn(dk.view(), L.wk.view(), da.view());
    kernels::gemm_nn(dv.view(), L.wv.view(), da.view());
    rmsnorm_backward(A.x_in, L.attn_norm, A.inv_a, da, dx, G.attn_norm);  // dx now wrt x_in
  }

  for (std::size_t i = 0; i < n; ++i) {
    T* er = grads.embed.data() + static_cast<std::size_t>(p.tokens[i]) * d;
    const T* dr = dx.data() + i * d;
    for (std::size_t j = 0; j < d; ++j) er[j] += dr[j];
  }
  return loss;
}

// Loss only (no gradients), used by finite differences and evaluation.
template <typename T>
T loss_only(const ModelConfig& cfg, const Weights<T>& w, const Rope<T>& rope, const Packing& p,
            std::span<const int> targets) {
  std::vector<LayerActs<T>> acts;
  const PatchIndex no_patch(p, {}, cfg.n_layers);
  run_blocks(cfg, w, rope, p, no_patch, RunOptions{}, acts, [](int, const LayerActs<T>&) {});
  std::vector<std::size_t> rows(p.seqs());
  for (std::size_t s = 0; s < p.seqs(); ++s) rows[s] = p.last_row(s);
  BasicMatrix<T> normed, logits;
  std::vector<T> inv;
  head(cfg, w, acts.back().x_out, rows, normed, inv, logits);
  const std::size_t V = cfg.vocab_size;
  T loss = 0;
  for (std::size_t s = 0; s < p.seqs(); ++s) {
    const T* lr = logits.data() + s * V;
    const T mx = *std::max_element(lr, lr + V);
    T sum = 0;
    for (std::size_t j = 0; j < V; ++j) sum += std::exp(lr[j] - mx);
    loss += -(lr[targets[s]] - mx - std::log(sum));
  }
  return loss / static_cast<T>(p.seqs());
}

}  // namespace qlens::engine
