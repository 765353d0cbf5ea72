#pragma once
// Damage-localization sweeps and repair strategies for quantized models.

#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "quantlens/corpus.hpp"
#include "quantlens/diagnostics.hpp"
#include "quantlens/probes.hpp"
#include "quantlens/quant.hpp"

namespace qlens {

// `n` (prompt + target) sequences drawn from `facts` with every template, substream "calib".
CalibSet sample_calibration(const World& world, std::span<const int> facts, std::size_t n, std::uint64_t seed);

// Facts to evaluate on, scored with greedy decoding on the primary template.
struct EvalSet {
  const World* world = nullptr;
  std::vector<int> facts;
  std::string name = "all";
};

double eval_accuracy(const ModelBundle& model, const EvalSet& eval);

struct SweepPoint {
  std::string label;
  double x = 0.0;
  double accuracy = 0.0;
  double average_bits = 16.0;
};

struct SweepResult {
  std::string kind;  // domino | single_layer | component | injection | compensation
  std::string subset;
  std::vector<SweepPoint> points;
  nlohmann::json settings;  // quant spec and sweep parameters
  nlohmann::json stamp;     // corpus digest, model digest, seed

  const SweepPoint& at(const std::string& label) const;
  std::string to_csv() const;  // label,x,accuracy,average_bits
  nlohmann::json to_json() const;
};

struct SweepContext {
  const ModelBundle* fp = nullptr;
  EvalSet eval;
  CalibSet calib;
  QuantSpec spec;  // bits overridden per sweep point
  nlohmann::json stamp;
};

// k = -1 quantizes nothing; otherwise layers 0..k at bits_lo, the rest FP.
SweepResult domino_sweep(const SweepContext& ctx, int bits_lo, std::span<const int> k_values);
SweepResult single_layer_sweep(const SweepContext& ctx, int bits);
SweepResult component_sweep(const SweepContext& ctx, int bits, std::span<const ComponentMask> masks);

struct ProtectStrategy {
  enum class Kind { EarlyLayers, Kurtosis };
  Kind kind = Kind::EarlyLayers;
  int n_layers = 2;             // EarlyLayers
  int bits_hi = 8;              // EarlyLayers
  double target_avg_bits = 4.25;  // Kurtosis
  KurtosisGranularity granularity = KurtosisGranularity::Row;  // Kurtosis

  static ProtectStrategy early_layers(int n, int bits_hi) { return {Kind::EarlyLayers, n, bits_hi, 0.0}; }
  static ProtectStrategy kurtosis(double target, KurtosisGranularity g = KurtosisGranularity::Row) {
    return {Kind::Kurtosis, 0, 8, target, g};
  }
  std::string label() const;
};

QuantPlan protect_plan(const ModelBundle& fp, const ProtectStrategy& s, int base_bits, const QuantSpec& spec = {});
QuantizedModel source_protect(const ModelBundle& fp, const ProtectStrategy& s, int base_bits, const CalibSet& calib,
                              const QuantSpec& spec = {});

enum class AmplifyMode { ResidualScale, LensLogits };

struct AmplifyConfig {
  double alpha = 3.0;
  int layer = -1;       // fixed l*; -1 selects the peak-confidence layer
  int min_layer = -1;   // for automatic selection; -1 = n_layers / 2
  bool global = false;  // one l* for the whole batch from the mean entropy trajectory
  AmplifyMode mode = AmplifyMode::ResidualScale;

  void validate(int n_layers) const;
};

struct AmplifiedPrediction {
  int layer = 0;  // l*
  int base_prediction = 0;
  int amplified_prediction = 0;
  LensTrajectory trajectory;  // first pass
  std::vector<float> logits;  // second pass, last position
};

AmplifiedPrediction amplified_forward(const ModelBundle& model_q, const Prompt& prompt, const AmplifyConfig& cfg);
std::vector<AmplifiedPrediction> amplified_batch(const ModelBundle& model_q, std::span<const Prompt> prompts,
                                                 const AmplifyConfig& cfg);
double amplified_accuracy(const ModelBundle& model_q, const EvalSet& eval, const AmplifyConfig& cfg);

struct InjectionCurve {
  int k = 0;
  LayerCurve cosine;
  double mean_upto_k = 0.0;
  double mean_after_k = 0.0;
};

struct InjectionResult {
  int bits_hi = 8;
  int bits_lo = 2;
  std::vector<InjectionCurve> curves;
  nlohmann::json stamp;
  std::string to_csv() const;  // k,layer,mean,std,n
  nlohmann::json to_json() const;
};

// Layers 0..k at bits_hi and the rest at bits_lo; residual cosine at the last token against FP.
InjectionResult signal_injection_sweep(const SweepContext& ctx, int bits_hi, int bits_lo, std::span<const int> k_values);

// Low-rank compensation at each rank plus each protect strategy at `bits`.
SweepResult compensation_battery(const SweepContext& ctx, int bits, std::span<const int> ranks,
                                 std::span<const ProtectStrategy> strategies,
                                 CompensationMode mode = CompensationMode::Plain);

inline constexpr std::array<double, 5> kAlphaGrid{2, 3, 5, 7, 9};

}  // namespace qlens
