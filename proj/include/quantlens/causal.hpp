#pragma once
// Cross-model activation repair (AIE) and zero ablation (AAE) over a
// layer x position-group grid.

#include <array>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "quantlens/corpus.hpp"
#include "quantlens/model.hpp"

namespace qlens {

enum class PositionGroup { FirstSubject, MidSubject, LastSubject, Relation, LastToken };
inline constexpr std::array<PositionGroup, 5> kPositionGroups{PositionGroup::FirstSubject, PositionGroup::MidSubject,
                                                              PositionGroup::LastSubject, PositionGroup::Relation,
                                                              PositionGroup::LastToken};
std::string_view to_string(PositionGroup g);
std::vector<int> group_positions(const Prompt& p, PositionGroup g);

using PromptKey = std::pair<int, int>;  // fact id, template index
inline PromptKey key_of(const Prompt& p) { return {p.fact_id, p.template_idx}; }

// Per-layer clean activations of one prompt, each seq x d.
struct CleanTrace {
  std::vector<MatrixF> residual_out;
  std::vector<MatrixF> attn_out;
  std::vector<MatrixF> ffn_out;

  const std::vector<MatrixF>& site(PatchSite s) const;
};

class CleanStore {
 public:
  void put(PromptKey key, CleanTrace trace);
  const CleanTrace& get(PromptKey key) const;  // throws NotFound
  bool contains(PromptKey key) const { return store_.count(key) != 0; }
  std::size_t size() const { return store_.size(); }
  const std::map<PromptKey, CleanTrace>& entries() const { return store_; }

 private:
  std::map<PromptKey, CleanTrace> store_;
};

CleanStore capture_clean_traces(const ModelBundle& model_fp, std::span<const Prompt> prompts);

struct GridCell {
  double effect = 0.0;
  double stderr_ = 0.0;
  std::size_t n = 0;
};

struct PatchGrid {
  std::string kind;  // "aie" or "aae"
  int n_layers = 0;
  std::vector<std::array<GridCell, 5>> cells;  // [layer][group]
  double mean_base_prob = 0.0;

  const GridCell& at(int layer, PositionGroup g) const { return cells.at(layer)[static_cast<int>(g)]; }
  std::string to_csv() const;
  nlohmann::json to_json() const;
};

struct CausalOptions {
  std::size_t max_prompts = 256;
  int window = 1;  // consecutive layers patched per cell, starting at the cell's layer
  PatchSite site = PatchSite::ResidualOut;
};

// AIE = mean over prompts of P_patched(target) - P_q(target), patching the
// clean FP states of every position in the group.
PatchGrid cross_model_repair(const ModelBundle& model_q, const CleanStore& clean, std::span<const Prompt> prompts,
                             const CausalOptions& options = {});

// AAE = mean over prompts of P_base(target) - P_ablated(target).
PatchGrid zero_ablation(const ModelBundle& model, std::span<const Prompt> prompts, const CausalOptions& options = {});

struct Concentration {
  double value = 0.0;
  bool degenerate = false;  // all-zero grid
};

// Normalized Herfindahl index of |effect| over cells with samples.
Concentration effect_concentration(const PatchGrid& grid);
Concentration effect_concentration(std::span<const double> effects);

}  // namespace qlens
