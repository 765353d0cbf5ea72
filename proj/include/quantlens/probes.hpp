#pragma once
// Output-level and layer-wise probes: logit lens, answer ranks, and
// multi-paraphrase accuracy.

#include <array>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "quantlens/corpus.hpp"
#include "quantlens/model.hpp"

namespace qlens {

struct LensOptions {
  bool apply_final_norm = true;
};

// softmax(W_U * final_norm(h)) for the residual after `layer` at `position`.
std::vector<double> logit_lens(const ForwardTrace& trace, const ModelBundle& model, int layer, int position,
                               const LensOptions& options = {});

// 1-based rank; equal probabilities rank the lower token id first.
int target_rank(std::span<const double> probs, int target);

struct LensPoint {
  int layer = 0;
  double prob = 0.0;
  int rank = 0;
  double entropy_bits = 0.0;
};

struct LensTrajectory {
  std::vector<LensPoint> layers;
};

LensTrajectory trajectory_from_trace(const ForwardTrace& trace, const ModelBundle& model, int position, int target,
                                     const LensOptions& options = {});
LensTrajectory target_trajectory(const ModelBundle& model, std::span<const int> tokens, int target,
                                 const LensOptions& options = {});
// Batched: one trajectory per prompt at its last position.
std::vector<LensTrajectory> target_trajectories(const ModelBundle& model, std::span<const Prompt> prompts,
                                                const LensOptions& options = {});

std::string trajectory_csv(const LensTrajectory& t);

inline constexpr std::array<const char*, 6> kRankBuckets{"1", "2-5", "6-10", "11-100", "101-1000", ">1000"};
std::array<std::size_t, 6> rank_histogram(std::span<const int> ranks);

// Argmin of entropy over layers >= min_layer; ties go to the deeper layer.
// min_layer < 0 selects n_layers / 2.
int peak_confidence_layer(const LensTrajectory& t, int min_layer = -1);

struct FactAccuracy {
  int fact_id = 0;
  int relation = 0;
  std::vector<bool> correct;  // per paraphrase
  bool any() const;
  bool majority() const;  // strictly more than half
  bool all() const;
};

struct AccuracyReport {
  std::vector<FactAccuracy> facts;
  double acc_any = 0.0;
  double acc_majority = 0.0;
  double acc_all = 0.0;
  std::vector<std::array<double, 3>> per_relation;  // any, majority, all

  std::vector<bool> any_vector() const;
  nlohmann::json to_json(bool include_facts = false) const;
};

AccuracyReport summarize_accuracy(std::vector<FactAccuracy> facts, int n_relations);

// Greedy predictions over every (fact, template) pair; templates empty = all.
AccuracyReport accuracy_suite(const ModelBundle& model, const World& world, std::span<const int> fact_ids,
                              std::span<const int> templates = {}, bool instruction_wrapper = false);

// Greedy top-1 for a batch of token sequences.
std::vector<int> batch_predict(const ModelBundle& model, std::span<const std::vector<int>> sequences);

}  // namespace qlens
