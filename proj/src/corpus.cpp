#include "quantlens/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include "quantlens/error.hpp"
#include "quantlens/util.hpp"

namespace qlens {

using nlohmann::json;

Vocab::Vocab() {
  add("<pad>");
  add("<bos>");
}

int Vocab::add(const std::string& symbol) {
  if (auto it = ids_.find(symbol); it != ids_.end()) return it->second;
  if (tokens_.size() >= kMaxVocab) {
    fail(ErrorKind::CapacityExceeded, "vocabulary exceeds " + std::to_string(kMaxVocab) + " symbols");
  }
  const int id = static_cast<int>(tokens_.size());
  tokens_.push_back(symbol);
  ids_.emplace(symbol, id);
  return id;
}

int Vocab::id(const std::string& symbol) const {
  auto it = ids_.find(symbol);
  if (it == ids_.end()) fail(ErrorKind::TokenizationError, "unknown symbol '" + symbol + "'");
  return it->second;
}

const std::string& Vocab::symbol(int id) const {
  require(id >= 0 && static_cast<std::size_t>(id) < tokens_.size(), ErrorKind::TokenizationError,
          "token id out of range: " + std::to_string(id));
  return tokens_[static_cast<std::size_t>(id)];
}

namespace {

struct RelationDef {
  const char* name;
  std::array<const char*, 4> templates;
};

// Primary template first; every template ends on a word after the subject.
constexpr std::array<RelationDef, 8> kRelations{{
    {"capital_of", {"the capital of [S] is", "[S] has its capital at", "the capital city of [S] is",
                    "the seat of government of [S] is"}},
    {"born_in", {"[S] was born in", "the birthplace of [S] is", "[S] was born in the city of", "[S] originally comes from"}},
    {"citizen_of", {"[S] is a citizen of", "the citizenship of [S] is", "[S] holds a passport from", "[S] has citizenship in"}},
    {"profession", {"the profession of [S] is", "[S] works as a", "[S] is employed as a", "by profession [S] is a"}},
    {"employer", {"[S] works for", "the employer of [S] is", "[S] is employed by", "[S] draws a salary from"}},
    {"language", {"the native language of [S] is", "[S] speaks", "the mother tongue of [S] is", "[S] writes in"}},
    {"instrument", {"[S] plays the", "the instrument of [S] is", "[S] performs on the", "[S] is known for playing the"}},
    {"school", {"[S] studied at", "the alma mater of [S] is", "[S] graduated from", "[S] was educated at"}},
}};

constexpr const char* kWrapperPrefix =
    "based on your knowledge , complete the following sentence by filling in the blank :";
constexpr const char* kWrapperSuffix = "_ the missing word is :";

std::vector<std::string> split_words(const std::string& s) {
  std::istringstream in(s);
  std::vector<std::string> out;
  for (std::string w; in >> w;) out.push_back(w);
  return out;
}

std::vector<std::string> relation_templates(int r) {
  if (r < static_cast<int>(kRelations.size())) {
    const auto& def = kRelations[static_cast<std::size_t>(r)];
    return {def.templates.begin(), def.templates.end()};
  }
  const std::string w = "rel" + std::to_string(r);
  return {"the " + w + " of [S] is", "[S] has " + w, "[S] is linked by " + w + " to", "for " + w + " [S] gives"};
}

std::string relation_name(int r) {
  if (r < static_cast<int>(kRelations.size())) return kRelations[static_cast<std::size_t>(r)].name;
  return "rel" + std::to_string(r);
}

// Pronounceable pseudo-words: two consonant-vowel syllables plus an optional coda.
class WordForge {
 public:
  explicit WordForge(std::mt19937_64& rng) : rng_(rng) {}

  std::string fresh(std::set<std::string>& taken) {
    static constexpr std::string_view kOnset = "bdfgklmnprstvz";
    static constexpr std::string_view kVowel = "aeiou";
    static constexpr std::string_view kCoda = "nrslm";
    for (int attempt = 0; attempt < 100000; ++attempt) {
      std::string w;
      const int syllables = attempt < 50000 ? 2 : 3;
      for (int s = 0; s < syllables; ++s) {
        w.push_back(kOnset[pick(kOnset.size())]);
        w.push_back(kVowel[pick(kVowel.size())]);
      }
      const std::size_t coda = pick(kCoda.size() + 1);
      if (coda < kCoda.size()) w.push_back(kCoda[coda]);
      if (taken.insert(w).second) return w;
    }
    fail(ErrorKind::CapacityExceeded, "pseudo-word space exhausted");
  }

 private:
  std::size_t pick(std::size_t n) { return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng_); }
  std::mt19937_64& rng_;
};

}  // namespace

World generate_world(std::uint64_t seed, int n_subjects, int n_relations, int targets_per_relation) {
  require(n_subjects >= 16, ErrorKind::InvalidConfig, "n_subjects must be >= 16");
  require(n_relations >= 1, ErrorKind::InvalidConfig, "n_relations must be >= 1");
  require(targets_per_relation >= 1, ErrorKind::InvalidConfig, "targets_per_relation must be >= 1");

  World w;
  w.config = {seed, n_subjects, n_relations, targets_per_relation};

  std::set<std::string> taken;
  for (int r = 0; r < n_relations; ++r) {
    Relation rel;
    rel.name = relation_name(r);
    rel.templates = relation_templates(r);
    for (const auto& t : rel.templates)
      for (const auto& word : split_words(t))
        if (word != "[S]") taken.insert(word), w.vocab.add(word);
    w.relations.push_back(std::move(rel));
  }
  for (const char* text : {kWrapperPrefix, kWrapperSuffix})
    for (const auto& word : split_words(text)) taken.insert(word), w.vocab.add(word);

  auto name_rng = substream(seed, "corpus.names");
  WordForge forge(name_rng);
  // Given names come from a shared pool; family names are unique, so the last
  // subject token is the one that identifies the subject.
  const int given_pool = std::max(4, n_subjects / 4);
  std::vector<int> given_ids;
  for (int i = 0; i < given_pool; ++i) given_ids.push_back(w.vocab.add(forge.fresh(taken)));
  std::vector<int> family_ids;
  for (int i = 0; i < n_subjects; ++i) family_ids.push_back(w.vocab.add(forge.fresh(taken)));

  for (auto& rel : w.relations)
    for (int i = 0; i < targets_per_relation; ++i) rel.target_pool.push_back(w.vocab.add(forge.fresh(taken)));

  auto assign_rng = substream(seed, "corpus.assign");
  std::uniform_int_distribution<int> given_dist(0, given_pool - 1);
  for (int s = 0; s < n_subjects; ++s) w.subjects.push_back({given_ids[static_cast<std::size_t>(given_dist(assign_rng))],
                                                            family_ids[static_cast<std::size_t>(s)]});

  std::uniform_int_distribution<int> target_dist(0, targets_per_relation - 1);
  for (int s = 0; s < n_subjects; ++s) {
    for (int r = 0; r < n_relations; ++r) {
      FactRecord f;
      f.id = static_cast<int>(w.facts.size());
      f.subject = s;
      f.subject_tokens = w.subjects[static_cast<std::size_t>(s)];
      f.relation = r;
      f.target = w.relations[static_cast<std::size_t>(r)].target_pool[static_cast<std::size_t>(target_dist(assign_rng))];
      w.facts.push_back(f);
    }
  }
  return w;
}

Prompt render_prompt(const World& world, const FactRecord& fact, int template_idx, bool instruction_wrapper) {
  require(fact.relation >= 0 && static_cast<std::size_t>(fact.relation) < world.relations.size(), ErrorKind::InvalidInput,
          "render_prompt: relation out of range");
  const auto& rel = world.relations[static_cast<std::size_t>(fact.relation)];
  require(template_idx >= 0 && static_cast<std::size_t>(template_idx) < rel.templates.size(), ErrorKind::InvalidInput,
          "render_prompt: template index out of range");

  Prompt p;
  p.fact_id = fact.id;
  p.template_idx = template_idx;
  p.target = fact.target;
  p.tokens.push_back(kBosId);
  if (instruction_wrapper)
    for (const auto& w : split_words(kWrapperPrefix)) p.tokens.push_back(world.vocab.id(w));

  const auto words = split_words(rel.templates[static_cast<std::size_t>(template_idx)]);
  std::vector<int> template_positions;
  bool seen_subject = false;
  for (const auto& w : words) {
    if (w == "[S]") {
      require(!seen_subject, ErrorKind::InvalidInput, "template has more than one subject slot");
      seen_subject = true;
      p.positions.first_subject = static_cast<int>(p.tokens.size());
      p.tokens.push_back(fact.subject_tokens[0]);
      p.positions.last_subject = static_cast<int>(p.tokens.size());
      p.tokens.push_back(fact.subject_tokens[1]);
      continue;
    }
    template_positions.push_back(static_cast<int>(p.tokens.size()));
    p.tokens.push_back(world.vocab.id(w));
  }
  require(seen_subject, ErrorKind::InvalidInput, "template has no subject slot");
  if (instruction_wrapper) {
    for (const auto& w : split_words(kWrapperSuffix)) {
      template_positions.push_back(static_cast<int>(p.tokens.size()));
      p.tokens.push_back(world.vocab.id(w));
    }
  }
  require(!template_positions.empty() && template_positions.back() > p.positions.last_subject, ErrorKind::InvalidInput,
          "template must end with a word after the subject");
  p.positions.last_token = template_positions.back();
  template_positions.pop_back();
  p.positions.relation_span = std::move(template_positions);
  return p;
}

std::vector<Prompt> render_all(const World& world, std::span<const int> fact_ids) {
  std::vector<Prompt> out;
  const int n_templates = static_cast<int>(world.templates_per_relation());
  out.reserve(fact_ids.size() * static_cast<std::size_t>(n_templates));
  for (int id : fact_ids)
    for (int t = 0; t < n_templates; ++t) out.push_back(render_prompt(world, world.facts.at(static_cast<std::size_t>(id)), t));
  return out;
}

std::vector<Prompt> render_primary(const World& world, std::span<const int> fact_ids) {
  std::vector<Prompt> out;
  out.reserve(fact_ids.size());
  for (int id : fact_ids) out.push_back(render_prompt(world, world.facts.at(static_cast<std::size_t>(id)), 0));
  return out;
}

json World::to_json() const {
  json j;
  j["config"] = {{"seed", config.seed},
                 {"n_subjects", config.n_subjects},
                 {"n_relations", config.n_relations},
                 {"targets_per_relation", config.targets_per_relation}};
  j["vocab"] = vocab.tokens();
  json rels = json::array();
  json templates = json::array();
  for (const auto& r : relations) {
    rels.push_back({{"name", r.name}, {"target_pool", r.target_pool}});
    templates.push_back(r.templates);
  }
  j["relations"] = rels;
  j["templates"] = templates;
  json subj = json::array();
  for (const auto& s : subjects) subj.push_back({s[0], s[1]});
  j["subjects"] = subj;
  json facts_j = json::array();
  for (const auto& f : facts) facts_j.push_back({{"id", f.id}, {"subject", f.subject}, {"relation", f.relation}, {"target", f.target}});
  j["facts"] = facts_j;
  return j;
}

World World::from_json(const json& j) {
  World w;
  try {
    const auto& c = j.at("config");
    w.config = {c.at("seed").get<std::uint64_t>(), c.at("n_subjects").get<int>(), c.at("n_relations").get<int>(),
                c.at("targets_per_relation").get<int>()};
    const auto tokens = j.at("vocab").get<std::vector<std::string>>();
    require(tokens.size() >= 2 && tokens[0] == "<pad>" && tokens[1] == "<bos>", ErrorKind::InvalidInput,
            "world vocab must start with <pad>, <bos>");
    for (std::size_t i = 2; i < tokens.size(); ++i) w.vocab.add(tokens[i]);
    require(w.vocab.size() == tokens.size(), ErrorKind::InvalidInput, "world vocab has duplicate symbols");
    const auto& rels = j.at("relations");
    const auto& templates = j.at("templates");
    require(rels.size() == templates.size(), ErrorKind::InvalidInput, "relations/templates length mismatch");
    for (std::size_t r = 0; r < rels.size(); ++r) {
      Relation rel;
      rel.name = rels[r].at("name").get<std::string>();
      rel.target_pool = rels[r].at("target_pool").get<std::vector<int>>();
      rel.templates = templates[r].get<std::vector<std::string>>();
      w.relations.push_back(std::move(rel));
    }
    for (const auto& s : j.at("subjects")) w.subjects.push_back({s.at(0).get<int>(), s.at(1).get<int>()});
    for (const auto& f : j.at("facts")) {
      FactRecord fr;
      fr.id = f.at("id").get<int>();
      fr.subject = f.at("subject").get<int>();
      fr.relation = f.at("relation").get<int>();
      fr.target = f.at("target").get<int>();
      require(fr.subject >= 0 && static_cast<std::size_t>(fr.subject) < w.subjects.size(), ErrorKind::InvalidInput,
              "fact subject out of range");
      fr.subject_tokens = w.subjects[static_cast<std::size_t>(fr.subject)];
      w.facts.push_back(fr);
    }
  } catch (const json::exception& e) {
    fail(ErrorKind::InvalidInput, std::string("malformed world document: ") + e.what());
  }
  return w;
}

std::string World::digest() const { return sha256_hex(to_json().dump()); }

Splits build_splits(const World& world, double train_fraction, std::uint64_t seed) {
  require(train_fraction > 0.0 && train_fraction <= 1.0, ErrorKind::InvalidConfig, "train_fraction must be in (0, 1]");
  std::vector<int> ids(world.facts.size());
  std::iota(ids.begin(), ids.end(), 0);
  Splits s;
  if (train_fraction == 1.0) {
    s.train = ids;
    s.eval = ids;
  } else {
    auto rng = substream(seed, "splits");
    std::shuffle(ids.begin(), ids.end(), rng);
    const auto n_train = static_cast<std::size_t>(std::llround(train_fraction * static_cast<double>(ids.size())));
    s.train.assign(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(n_train));
    s.eval.assign(ids.begin() + static_cast<std::ptrdiff_t>(n_train), ids.end());
    std::sort(s.train.begin(), s.train.end());
    std::sort(s.eval.begin(), s.eval.end());
  }
  require(!s.train.empty() && !s.eval.empty(), ErrorKind::InvalidConfig, "build_splits produced an empty split");
  return s;
}

json SubsetPartition::report() const {
  return {{"total", robust.size() + failure.size()},
          {"robust", robust.size()},
          {"failure", failure.size()},
          {"other", other.size()},
          {"universe", universe}};
}

SubsetPartition partition_subsets(const std::vector<bool>& fp_correct, const std::vector<bool>& q_correct) {
  require(fp_correct.size() == q_correct.size(), ErrorKind::InvalidInput, "partition_subsets: fact universe mismatch");
  SubsetPartition p;
  p.universe = fp_correct.size();
  for (std::size_t i = 0; i < fp_correct.size(); ++i) {
    const int id = static_cast<int>(i);
    if (fp_correct[i] && q_correct[i]) {
      p.robust.push_back(id);
    } else if (fp_correct[i]) {
      p.failure.push_back(id);
    } else {
      p.other.push_back(id);
    }
  }
  return p;
}

void save_world(const World& world, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  require(static_cast<bool>(out), ErrorKind::Io, "cannot write world file " + path);
  out << world.to_json().dump();
}

World load_world(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), ErrorKind::Io, "cannot read world file " + path);
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    fail(ErrorKind::InvalidInput, "world file is not valid JSON: " + std::string(e.what()));
  }
  return World::from_json(j);
}

}  // namespace qlens
