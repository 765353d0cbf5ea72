#pragma once
// Synthetic factual-recall world: two-token subjects, templated relations,
// single-token targets, and the closed vocabulary that covers them.

#include <array>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

namespace qlens {

inline constexpr std::size_t kMaxVocab = 4096;
inline constexpr int kPadId = 0;
inline constexpr int kBosId = 1;

class Vocab {
 public:
  Vocab();
  int add(const std::string& symbol);
  int id(const std::string& symbol) const;  // throws TokenizationError
  bool contains(const std::string& symbol) const { return ids_.count(symbol) != 0; }
  const std::string& symbol(int id) const;
  std::size_t size() const { return tokens_.size(); }
  const std::vector<std::string>& tokens() const { return tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::map<std::string, int> ids_;
};

struct Relation {
  std::string name;
  std::vector<std::string> templates;  // each contains exactly one "[S]"; index 0 is the primary template
  std::vector<int> target_pool;
};

struct Positions {
  int first_subject = 0;
  int last_subject = 0;
  std::vector<int> relation_span;
  int last_token = 0;
};

struct FactRecord {
  int id = 0;
  int subject = 0;                       // index into World::subjects
  std::array<int, 2> subject_tokens{};   // given-name, family-name
  int relation = 0;
  int target = 0;                        // token id
};

struct Prompt {
  int fact_id = 0;
  int template_idx = 0;
  std::vector<int> tokens;
  Positions positions;
  int target = 0;
};

struct WorldConfig {
  std::uint64_t seed = 7;
  int n_subjects = 512;
  int n_relations = 8;
  int targets_per_relation = 128;
};

struct World {
  WorldConfig config;
  Vocab vocab;
  std::vector<Relation> relations;
  std::vector<std::array<int, 2>> subjects;
  std::vector<FactRecord> facts;

  std::size_t templates_per_relation() const { return relations.empty() ? 0 : relations.front().templates.size(); }
  nlohmann::json to_json() const;
  static World from_json(const nlohmann::json& j);
  // SHA-256 of the canonical (sorted-key, compact) JSON serialization.
  std::string digest() const;
};

World generate_world(std::uint64_t seed, int n_subjects, int n_relations, int targets_per_relation);
inline World generate_world(const WorldConfig& c) {
  return generate_world(c.seed, c.n_subjects, c.n_relations, c.targets_per_relation);
}

Prompt render_prompt(const World& world, const FactRecord& fact, int template_idx, bool instruction_wrapper = false);

// Every fact rendered with every template, fact-major order.
std::vector<Prompt> render_all(const World& world, std::span<const int> fact_ids);
// Primary template only.
std::vector<Prompt> render_primary(const World& world, std::span<const int> fact_ids);

struct Splits {
  std::vector<int> train;  // fact ids, ascending
  std::vector<int> eval;
};

Splits build_splits(const World& world, double train_fraction, std::uint64_t seed);

struct SubsetPartition {
  std::vector<int> robust;
  std::vector<int> failure;
  std::vector<int> other;
  std::size_t universe = 0;
  nlohmann::json report() const;
};

SubsetPartition partition_subsets(const std::vector<bool>& fp_correct, const std::vector<bool>& q_correct);

void save_world(const World& world, const std::string& path);
World load_world(const std::string& path);

}  // namespace qlens
