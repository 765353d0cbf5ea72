#pragma once
// Weight-only post-training quantization: RTN, GPTQ and an AWQ-style channel
// scaling search, plus mixed-precision plans and low-rank error compensation.

#include <array>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "quantlens/model.hpp"
#include "quantlens/numkit.hpp"

namespace qlens {

enum class Algorithm { Rtn, Gptq, AwqGptq };
std::string_view to_string(Algorithm a);
Algorithm parse_algorithm(std::string_view s);

struct QuantSpec {
  int bits = 16;
  int group_size = 32;
  Algorithm algorithm = Algorithm::Gptq;

  bool passthrough() const { return bits == 16; }
  void validate() const;  // throws InvalidConfig
  bool operator==(const QuantSpec&) const = default;
};

// Asymmetric uniform grid shared by every quantizer. Groups run along the
// input (column) dimension; the last group may be shorter.
struct Codebook {
  std::size_t rows = 0, cols = 0, group_size = 0;
  std::vector<double> scales;        // rows x n_groups
  std::vector<std::int64_t> zeros;   // rows x n_groups
  std::vector<std::int32_t> codes;   // rows x cols
  std::vector<int> row_bits;         // rows

  std::size_t n_groups() const { return group_size ? (cols + group_size - 1) / group_size : 0; }
};

struct QuantResult {
  Matrix dequant;
  Codebook codebook;
};

struct GroupParams {
  double scale;
  std::int64_t zero;
};

GroupParams group_params(std::span<const double> w, int bits);
std::int32_t quantize_code(double w, const GroupParams& g, int bits);
double dequantize_code(std::int32_t q, const GroupParams& g);

// Rows listed in `protected_rows` are quantized at 8 bits instead.
QuantResult rtn_quantize(const Matrix& w, const QuantSpec& spec, std::span<const int> protected_rows = {});
QuantResult gptq_quantize(const Matrix& w, const Matrix& h, const QuantSpec& spec, std::span<const int> protected_rows = {});

// H = 2 X^T X / n + lambda I with lambda = damping_frac * mean(diag). X is n x d.
Matrix hessian_from_inputs(const Matrix& x, double damping_frac = 0.01);
// Calibration output error tr(dW H dW^T).
double output_error(const Matrix& w, const Matrix& w_hat, const Matrix& h);

struct CalibSet {
  std::vector<std::vector<int>> sequences;
};

// Input rows seen by (layer, component) over the calibration set, n x in_dim.
Matrix collect_inputs(const ModelBundle& model, int layer, Component c, const CalibSet& calib);
Matrix collect_hessian(const ModelBundle& model, int layer, Component c, const CalibSet& calib, double damping_frac = 0.01);

struct ActivationStats {
  std::vector<double> mean_abs;  // per input channel
  Matrix second_moment;          // X^T X / n
  Matrix hessian;                // damped 2 X^T X / n + lambda I
};
ActivationStats activation_stats(const Matrix& x, double damping_frac = 0.01);

struct AwqResult {
  double beta = 0.0;
  std::vector<double> scales;  // per input channel
  QuantResult quant;           // dequant holds the effective weight deq(W diag(s)) diag(s)^-1
  std::vector<double> loss_by_beta;
};

inline constexpr std::array<double, 9> kAwqBetaGrid{0.0, 0.125, 0.25, 0.375, 0.5, 0.625, 0.75, 0.875, 1.0};

AwqResult awq_scale_search(const Matrix& w, const ActivationStats& stats, const QuantSpec& spec,
                           std::span<const int> protected_rows = {});

struct MatrixPlan {
  QuantSpec spec;
  std::vector<int> protected_rows;  // ascending
};

enum class CompensationMode { Plain, ActivationWeighted };

struct Compensation {
  int rank = 0;  // 0 disables
  CompensationMode mode = CompensationMode::Plain;
};

struct QuantPlan {
  std::vector<std::array<MatrixPlan, 7>> layers;
  Compensation compensation;

  MatrixPlan& at(int layer, Component c) { return layers.at(layer)[static_cast<int>(c)]; }
  const MatrixPlan& at(int layer, Component c) const { return layers.at(layer)[static_cast<int>(c)]; }

  // Parameter-weighted bits over the quantizable projections; protected rows count at 8.
  double average_bits(const ModelConfig& config) const;
  void validate(const ModelConfig& config) const;
  nlohmann::json to_json() const;
  static QuantPlan from_json(const nlohmann::json& j, const ModelConfig& config);
};

enum class ComponentMask { All, Mlp, Attn, GateUp, Down, QK, V, O, None };
std::string_view to_string(ComponentMask m);
ComponentMask parse_mask(std::string_view s);
bool mask_contains(ComponentMask m, Component c);

struct PlanDirective {
  enum class Kind { Uniform, FirstKLayers, LayerRange, Mask, ProtectRows };
  Kind kind = Kind::Uniform;
  int bits = 16;
  int k = 0;                          // FirstKLayers
  int lo = 0, hi = -1;                // LayerRange, inclusive
  ComponentMask mask = ComponentMask::All;
  int layer = 0;                      // ProtectRows
  Component component = Component::Q; // ProtectRows
  std::vector<int> rows;              // ProtectRows

  static PlanDirective uniform(int bits);
  static PlanDirective first_k(int k, int bits);
  static PlanDirective layer_range(int lo, int hi, int bits);
  static PlanDirective masked(ComponentMask m, int bits);
  static PlanDirective protect(int layer, Component c, std::vector<int> rows);
};

// Directives apply in order; later ones override earlier ones. A directive of
// the same kind and scope as an earlier one but a different value is a conflict.
QuantPlan build_plan(const ModelConfig& config, std::span<const PlanDirective> directives,
                     const QuantSpec& defaults = {});

struct RowKurtosis {
  int layer;
  Component component;
  int row;
  double kurtosis;
};
std::vector<RowKurtosis> row_kurtosis(const ModelBundle& model);

// Unit over which kurtosis is measured and protection is granted.
enum class KurtosisGranularity { Row, Tensor };
std::string_view to_string(KurtosisGranularity g);
KurtosisGranularity parse_granularity(std::string_view s);

// Uniform base_bits plus the highest-kurtosis units at 8 bits until the
// protected parameter fraction reaches (target - base) / (8 - base).
QuantPlan kurtosis_protect_plan(const ModelBundle& model, int base_bits, double target_avg_bits,
                                const QuantSpec& defaults = {},
                                KurtosisGranularity granularity = KurtosisGranularity::Row);

// Truncated-SVD correction of the quantization error. The SVD is computed
// once and reused for every rank.
class LowRankCompensator {
 public:
  // With `second_moment`, the error is weighted by its PSD square root before truncation.
  LowRankCompensator(const Matrix& w_fp, const Matrix& w_q, const Matrix* second_moment = nullptr);
  Matrix correction(int rank) const;
  int max_rank() const { return static_cast<int>(svd_.s.size()); }

 private:
  SvdResult svd_;
  Matrix unweight_;  // pseudo-inverse square root, empty in plain mode
};

Matrix lowrank_compensate(const Matrix& w_fp, const Matrix& w_q, int rank, const Matrix* second_moment = nullptr);

struct MatrixReport {
  int layer = 0;
  Component component = Component::Q;
  int bits = 16;
  std::size_t protected_rows = 0;
  double weight_rel_error = 0.0;
  double output_error = 0.0;      // tr(dW H dW^T), 0 without calibration
  double output_rel_error = 0.0;  // relative to tr(W H W^T)
  double awq_beta = 0.0;
};

struct QuantReport {
  double average_bits = 16.0;
  std::vector<MatrixReport> matrices;
  std::vector<std::string> warnings;
  nlohmann::json to_json() const;
};

struct QuantizedModel {
  ModelBundle model;
  QuantReport report;
};

// Layers are processed in order; GPTQ and AWQ calibration inputs come from
// the partially quantized model. Embeddings, norms and unembedding are kept.
QuantizedModel apply_plan(const ModelBundle& fp, const QuantPlan& plan, const CalibSet& calib,
                          double damping_frac = 0.01);

}  // namespace qlens
