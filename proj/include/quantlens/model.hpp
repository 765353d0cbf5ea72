#pragma once
// Toy Llama-style decoder: pre-norm residual blocks with RoPE attention and a
// SwiGLU FFN, untied unembedding. Forward passes can capture any internal
// site and apply activation patches in place.

#include <array>
#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "quantlens/numkit.hpp"

namespace qlens {

struct ModelConfig {
  int n_layers = 8;
  int d_model = 128;
  int n_heads = 4;
  int head_dim = 32;
  int d_ff = 344;
  int vocab_size = 2048;
  int max_seq_len = 16;
  double rope_theta = 10000.0;
  double rmsnorm_eps = 1e-5;

  void validate() const;  // throws InvalidConfig
  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);
  bool operator==(const ModelConfig&) const = default;
};

enum class Component { Q, K, V, O, Gate, Up, Down };
inline constexpr std::array<Component, 7> kAllComponents{Component::Q,    Component::K,  Component::V,   Component::O,
                                                         Component::Gate, Component::Up, Component::Down};
std::string_view component_name(Component c);
Component parse_component(std::string_view name);

template <typename T>
struct LayerWeights {
  BasicMatrix<T> wq, wk, wv, wo;          // d x d, rows = outputs
  BasicMatrix<T> w_gate, w_up;            // d_ff x d
  BasicMatrix<T> w_down;                  // d x d_ff
  BasicMatrix<T> attn_norm, ffn_norm;     // 1 x d

  BasicMatrix<T>& matrix(Component c);
  const BasicMatrix<T>& matrix(Component c) const;
};

template <typename T>
struct Weights {
  BasicMatrix<T> embed;  // vocab x d
  std::vector<LayerWeights<T>> layers;
  BasicMatrix<T> final_norm;  // 1 x d
  BasicMatrix<T> unembed;     // vocab x d

  static Weights zeros(const ModelConfig& c);

  // Canonical tensor order; names are "embed", "layers.<l>.<tensor>", "final_norm", "unembed".
  template <typename F>
  void for_each(F&& f) {
    f(std::string("embed"), embed);
    for (std::size_t l = 0; l < layers.size(); ++l) {
      const std::string p = "layers." + std::to_string(l) + ".";
      auto& L = layers[l];
      f(p + "attn_norm", L.attn_norm);
      f(p + "wq", L.wq);
      f(p + "wk", L.wk);
      f(p + "wv", L.wv);
      f(p + "wo", L.wo);
      f(p + "ffn_norm", L.ffn_norm);
      f(p + "w_gate", L.w_gate);
      f(p + "w_up", L.w_up);
      f(p + "w_down", L.w_down);
    }
    f(std::string("final_norm"), final_norm);
    f(std::string("unembed"), unembed);
  }
  template <typename F>
  void for_each(F&& f) const {
    const_cast<Weights*>(this)->for_each([&](const std::string& n, BasicMatrix<T>& m) { f(n, std::as_const(m)); });
  }

  template <typename U>
  Weights<U> cast() const;
};

std::string tensor_name(int layer, Component c);

struct ModelBundle {
  ModelConfig config;
  Weights<float> weights;
  // Quantization codebooks (scales, zero points, codes) keyed by tensor name.
  std::map<std::string, MatrixF> codebook;
  nlohmann::json metadata = nlohmann::json::object();

  // SHA-256 over the config and every weight tensor (codebook excluded).
  std::string digest() const;
};

ModelBundle init_model(const ModelConfig& config, std::uint64_t seed);

struct CaptureFlags {
  bool residual = false;       // residual stream after each block
  bool attn_out = false;
  bool ffn_out = false;        // h_value
  bool gate_preact = false;    // W_gate x
  bool h_key = false;          // SiLU(W_gate x) * (W_up x)
  bool attention = false;      // per-head attention rows
  bool linear_inputs = false;  // normed attn input, attention context, normed ffn input
  bool all_logits = false;     // logits at every position, not only the last
  int only_layer = -1;         // when >= 0, layer sites are captured for this layer only

  static CaptureFlags everything();
  bool any_layer_site() const { return residual || attn_out || ffn_out || gate_preact || h_key || attention || linear_inputs; }
};

enum class PatchSite { ResidualOut, AttnOut, FfnOut };
enum class PatchAction { Replace, Zero, Scale };
std::string_view to_string(PatchSite site);

struct PatchDirective {
  PatchSite site = PatchSite::ResidualOut;
  int layer = 0;
  int position = 0;
  PatchAction action = PatchAction::Zero;
  std::vector<float> value;  // Replace only
  float alpha = 1.0f;        // Scale only
};

struct PatchSpec {
  std::vector<PatchDirective> directives;
  bool empty() const { return directives.empty(); }
};

// Throws InvalidPatch for out-of-range sites, wrong vector sizes or duplicate targets.
void validate_patch(const PatchSpec& patch, const ModelConfig& config, std::size_t seq_len);

struct LayerTrace {
  MatrixF residual_out;            // seq x d
  MatrixF attn_out;                // seq x d
  MatrixF ffn_out;                 // seq x d
  MatrixF gate_preact;             // seq x d_ff
  MatrixF h_key;                   // seq x d_ff
  std::vector<MatrixF> attention;  // per head, seq x seq (row t covers positions <= t)
  MatrixF attn_in;                 // seq x d, input of q/k/v
  MatrixF attn_ctx;                // seq x d, input of o
  MatrixF ffn_in;                  // seq x d, input of gate/up
};

struct ForwardTrace {
  std::size_t seq_len = 0;
  CaptureFlags captured;
  std::vector<LayerTrace> layers;
  std::vector<float> final_hidden;  // final-normed hidden state at the last position
  MatrixF all_logits;               // seq x vocab when requested
};

struct ForwardResult {
  std::vector<float> logits;  // last position
  ForwardTrace trace;
};

struct SequenceJob {
  std::span<const int> tokens;
  const PatchSpec* patch = nullptr;
};

ForwardResult forward(const ModelBundle& model, std::span<const int> tokens, const CaptureFlags& capture = {},
                      const PatchSpec* patch = nullptr);

// Packs all jobs into one pass. Each sequence's result is bit-identical to
// running it alone. With stop_after_layer >= 0 only layers [0, stop] run and
// logits are left empty.
std::vector<ForwardResult> forward_batch(const ModelBundle& model, std::span<const SequenceJob> jobs,
                                         const CaptureFlags& capture = {}, int stop_after_layer = -1);

// Lowest index among maximal entries.
int argmax_lowest(std::span<const float> v);
std::vector<double> softmax(std::span<const float> logits);

struct Prediction {
  int token = 0;
  std::vector<double> probs;
};

Prediction greedy_predict(const ModelBundle& model, std::span<const int> tokens, const PatchSpec* patch = nullptr);

struct TrainSample {
  std::vector<int> tokens;
  int target = 0;
};

struct TrainHyperparams {
  double lr = 3e-3;
  int steps = 1600;
  int batch = 64;
  std::uint64_t seed = 1;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-8;
  double grad_clip = 1.0;
  int warmup_steps = 100;
  double final_lr_fraction = 0.1;  // cosine decay floor
  double weight_decay = 0.0;       // decoupled, projection matrices only

  nlohmann::json to_json() const;
  static TrainHyperparams from_json(const nlohmann::json& j);
};

struct TrainReport {
  std::vector<double> loss_curve;    // per step
  std::vector<double> epoch_recall;  // fraction of samples predicted correctly during each epoch
  int steps = 0;
  double seconds = 0.0;
};

using TrainProgress = std::function<void(int step, double loss)>;

TrainReport train(ModelBundle& model, std::span<const TrainSample> train_set, const TrainHyperparams& hp,
                  const TrainProgress& progress = {});

// Mean cross-entropy of the target at the last position.
double evaluate_loss(const ModelBundle& model, std::span<const TrainSample> samples);

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::map<std::string, double> per_group;
};

// Analytic gradients against central differences in double precision.
// Samples up to `coords_per_group` coordinates per tensor.
GradCheckResult grad_check(const ModelBundle& model, const TrainSample& sample, double epsilon,
                           int coords_per_group = 12, bool float_precision = false);

void save_checkpoint(const ModelBundle& model, const std::string& path);
ModelBundle load_checkpoint(const std::string& path);

}  // namespace qlens
