#pragma once
// Component- and representation-level comparisons between a quantized
// model's traces and the FP traces of the same prompts.

#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "quantlens/model.hpp"
#include "quantlens/numkit.hpp"

namespace qlens {

struct LayerCurve {
  std::string metric;
  std::string position;  // selector label
  std::vector<double> mean;
  std::vector<double> dispersion;  // std
  std::vector<std::size_t> n;

  std::size_t n_layers() const { return mean.size(); }
  double overall_mean() const;
  std::string to_csv() const;  // layer,mean,std,n
  nlohmann::json to_json() const;
};

// Averages per-prompt curves; dispersion becomes the std across prompts.
LayerCurve mean_curves(std::span<const LayerCurve> curves);

// Normalized attention entropy H(A)/log2(t+1), averaged over heads then
// positions; position 0 is skipped. Empty `positions` means all.
LayerCurve attn_entropy_profile(const ForwardTrace& trace, std::span<const int> positions = {});

enum class JsdMode { PerHeadMean, HeadAveragedDistribution };
LayerCurve attn_jsd_profile(const ForwardTrace& fp, const ForwardTrace& q, int position,
                            JsdMode mode = JsdMode::PerHeadMean);

struct SignFlipCurve {
  LayerCurve curve;
  std::vector<double> excluded_fraction;  // channels with |value| < 1e-9 in either trace
};
SignFlipCurve gate_sign_flip_rate(const ForwardTrace& fp, const ForwardTrace& q, int position);

LayerCurve expert_jaccard_profile(const ForwardTrace& fp, const ForwardTrace& q, int position, double fraction = 0.01);

LayerCurve value_cosine_profile(const ForwardTrace& fp, const ForwardTrace& q, int position,
                                PatchSite site = PatchSite::FfnOut);

// Column-centered linear CKA; 0 when either self-similarity is below 1e-12.
double linear_cka(const Matrix& x, const Matrix& y);

// Rows = prompts, one position per prompt.
Matrix activation_matrix(std::span<const ForwardTrace> traces, int layer, PatchSite site, std::span<const int> positions);

inline constexpr std::size_t kMinCkaSamples = 32;

struct CkaHeatmap {
  Matrix values;  // FP layer x quantized layer
  PatchSite site = PatchSite::ResidualOut;
  std::string position;

  double diagonal_mean() const;
  std::string to_csv() const;
  nlohmann::json to_json() const;
};

CkaHeatmap cka_heatmap(std::span<const ForwardTrace> fp, std::span<const ForwardTrace> q, PatchSite site,
                       std::span<const int> positions, const std::string& position_label = "last_subject");

struct SubspaceResult {
  double value = 0.0;
  std::size_t k = 0;         // after clamping to effective rank
  double energy_a = 0.0;     // spectral energy captured by the top k directions
  double energy_b = 0.0;
  bool clamped = false;
  bool no_error = false;     // error alignment only: a_q == a_fp
};

// Mean squared cosine of the principal angles between the top-k right
// singular subspaces. Symmetric in its arguments.
SubspaceResult subspace_similarity(const Matrix& a_fp, const Matrix& a_q, std::size_t k = 50, bool centered = true);

// Similarity between the FP signal subspace and the subspace of a_q - a_fp.
SubspaceResult error_subspace_alignment(const Matrix& a_fp, const Matrix& a_q, std::size_t k = 50, bool centered = true);

// Per-layer Sim over a prompt set, one value per layer (dispersion 0).
LayerCurve subspace_profile(std::span<const ForwardTrace> fp, std::span<const ForwardTrace> q, PatchSite site,
                            std::span<const int> positions, std::size_t k = 50, bool error_alignment = false);

}  // namespace qlens
