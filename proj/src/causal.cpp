#include "quantlens/causal.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "quantlens/error.hpp"

namespace qlens {

using nlohmann::json;

std::string_view to_string(PositionGroup g) {
  switch (g) {
    case PositionGroup::FirstSubject: return "first_subject";
    case PositionGroup::MidSubject: return "mid_subject";
    case PositionGroup::LastSubject: return "last_subject";
    case PositionGroup::Relation: return "relation";
    case PositionGroup::LastToken: return "last_token";
  }
  return "?";
}

std::vector<int> group_positions(const Prompt& p, PositionGroup g) {
  const Positions& pos = p.positions;
  switch (g) {
    case PositionGroup::FirstSubject: return {pos.first_subject};
    case PositionGroup::MidSubject: {
      std::vector<int> v;
      for (int t = pos.first_subject + 1; t < pos.last_subject; ++t) v.push_back(t);
      return v;
    }
    case PositionGroup::LastSubject:
      if (pos.last_subject == pos.first_subject) return {};
      return {pos.last_subject};
    case PositionGroup::Relation: {
      std::vector<int> v;
      for (int t : pos.relation_span)
        if (t != pos.last_token && (t < pos.first_subject || t > pos.last_subject)) v.push_back(t);
      return v;
    }
    case PositionGroup::LastToken: return {pos.last_token};
  }
  return {};
}

const std::vector<MatrixF>& CleanTrace::site(PatchSite s) const {
  switch (s) {
    case PatchSite::ResidualOut: return residual_out;
    case PatchSite::AttnOut: return attn_out;
    case PatchSite::FfnOut: return ffn_out;
  }
  return residual_out;
}

void CleanStore::put(PromptKey key, CleanTrace trace) { store_[key] = std::move(trace); }

const CleanTrace& CleanStore::get(PromptKey key) const {
  auto it = store_.find(key);
  if (it == store_.end())
    fail(ErrorKind::NotFound, "no clean trace for fact " + std::to_string(key.first) + " template " +
                                  std::to_string(key.second));
  return it->second;
}

CleanStore capture_clean_traces(const ModelBundle& model_fp, std::span<const Prompt> prompts) {
  CleanStore store;
  CaptureFlags cap;
  cap.residual = cap.attn_out = cap.ffn_out = true;
  constexpr std::size_t kChunk = 256;
  for (std::size_t lo = 0; lo < prompts.size(); lo += kChunk) {
    const std::size_t hi = std::min(prompts.size(), lo + kChunk);
    std::vector<SequenceJob> jobs;
    for (std::size_t i = lo; i < hi; ++i) jobs.push_back({prompts[i].tokens, nullptr});
    auto res = forward_batch(model_fp, jobs, cap);
    for (std::size_t i = lo; i < hi; ++i) {
      CleanTrace t;
      for (auto& layer : res[i - lo].trace.layers) {
        t.residual_out.push_back(std::move(layer.residual_out));
        t.attn_out.push_back(std::move(layer.attn_out));
        t.ffn_out.push_back(std::move(layer.ffn_out));
      }
      store.put(key_of(prompts[i]), std::move(t));
    }
  }
  return store;
}

namespace {

double target_prob(const std::vector<float>& logits, int target) { return softmax(logits)[target]; }

struct CellJob {
  std::size_t prompt;
  int layer;
  int group;
  PatchSpec patch;
};

// Evaluates every job and accumulates (sign * (P_job - P_ref)) per cell.
PatchGrid run_grid(const ModelBundle& model, std::span<const Prompt> prompts, const std::vector<double>& ref_prob,
                   std::vector<CellJob>& jobs, double sign, const std::string& kind) {
  const int L = model.config.n_layers;
  std::vector<std::array<std::vector<double>, 5>> samples(L);
  constexpr std::size_t kChunk = 1024;
  for (std::size_t lo = 0; lo < jobs.size(); lo += kChunk) {
    const std::size_t hi = std::min(jobs.size(), lo + kChunk);
    std::vector<SequenceJob> seq;
    for (std::size_t i = lo; i < hi; ++i) seq.push_back({prompts[jobs[i].prompt].tokens, &jobs[i].patch});
    const auto res = forward_batch(model, seq);
    for (std::size_t i = lo; i < hi; ++i) {
      const CellJob& j = jobs[i];
      const double p = target_prob(res[i - lo].logits, prompts[j.prompt].target);
      samples[j.layer][j.group].push_back(sign * (p - ref_prob[j.prompt]));
    }
  }
  PatchGrid g;
  g.kind = kind;
  g.n_layers = L;
  g.cells.resize(L);
  for (int l = 0; l < L; ++l) {
    for (int k = 0; k < 5; ++k) {
      const auto& v = samples[l][k];
      GridCell& c = g.cells[l][k];
      c.n = v.size();
      if (v.empty()) continue;
      double mean = 0.0;
      for (double x : v) mean += x;
      mean /= static_cast<double>(v.size());
      double var = 0.0;
      for (double x : v) var += (x - mean) * (x - mean);
      c.effect = mean;
      c.stderr_ = v.size() > 1 ? std::sqrt(var / static_cast<double>(v.size() - 1) / static_cast<double>(v.size())) : 0.0;
    }
  }
  double base = 0.0;
  for (double p : ref_prob) base += p;
  g.mean_base_prob = ref_prob.empty() ? 0.0 : base / static_cast<double>(ref_prob.size());
  return g;
}

std::vector<double> base_probs(const ModelBundle& model, std::span<const Prompt> prompts) {
  std::vector<SequenceJob> jobs;
  for (const auto& p : prompts) jobs.push_back({p.tokens, nullptr});
  std::vector<double> out;
  for (std::size_t lo = 0; lo < jobs.size(); lo += 1024) {
    const std::size_t hi = std::min(jobs.size(), lo + 1024);
    const auto res = forward_batch(model, std::span<const SequenceJob>(jobs).subspan(lo, hi - lo));
    for (std::size_t i = lo; i < hi; ++i) out.push_back(target_prob(res[i - lo].logits, prompts[i].target));
  }
  return out;
}

void check_options(const CausalOptions& o) {
  require(o.window >= 1, ErrorKind::InvalidConfig, "causal: window must be >= 1");
  require(o.max_prompts >= 1, ErrorKind::InvalidConfig, "causal: max_prompts must be >= 1");
}

}  // namespace

PatchGrid cross_model_repair(const ModelBundle& model_q, const CleanStore& clean, std::span<const Prompt> prompts,
                             const CausalOptions& options) {
  check_options(options);
  require(!prompts.empty(), ErrorKind::InvalidInput, "repair: no prompts");
  prompts = prompts.first(std::min(prompts.size(), options.max_prompts));
  const int L = model_q.config.n_layers;
  std::vector<CellJob> jobs;
  for (std::size_t i = 0; i < prompts.size(); ++i) {
    const Prompt& p = prompts[i];
    if (!clean.contains(key_of(p)))
      fail(ErrorKind::TraceIncomplete, "repair: missing clean trace for fact " + std::to_string(p.fact_id));
    const auto& site = clean.get(key_of(p)).site(options.site);
    if (site.size() != static_cast<std::size_t>(L))
      fail(ErrorKind::TraceIncomplete, "repair: clean trace has " + std::to_string(site.size()) + " layers");
    for (int l = 0; l < L; ++l) {
      for (int g = 0; g < 5; ++g) {
        const auto pos = group_positions(p, kPositionGroups[g]);
        if (pos.empty()) continue;
        CellJob job{i, l, g, {}};
        for (int w = l; w < std::min(L, l + options.window); ++w) {
          if (site[w].rows() != p.tokens.size())
            fail(ErrorKind::TraceIncomplete, "repair: clean trace length mismatch for fact " + std::to_string(p.fact_id));
          for (int t : pos) {
            PatchDirective d;
            d.site = options.site;
            d.layer = w;
            d.position = t;
            d.action = PatchAction::Replace;
            d.value.assign(site[w].row(t).begin(), site[w].row(t).end());
            job.patch.directives.push_back(std::move(d));
          }
        }
        jobs.push_back(std::move(job));
      }
    }
  }
  const auto ref = base_probs(model_q, prompts);
  return run_grid(model_q, prompts, ref, jobs, 1.0, "aie");
}

PatchGrid zero_ablation(const ModelBundle& model, std::span<const Prompt> prompts, const CausalOptions& options) {
  check_options(options);
  require(!prompts.empty(), ErrorKind::InvalidInput, "ablation: no prompts");
  prompts = prompts.first(std::min(prompts.size(), options.max_prompts));
  const int L = model.config.n_layers;
  std::vector<CellJob> jobs;
  for (std::size_t i = 0; i < prompts.size(); ++i) {
    for (int l = 0; l < L; ++l) {
      for (int g = 0; g < 5; ++g) {
        const auto pos = group_positions(prompts[i], kPositionGroups[g]);
        if (pos.empty()) continue;
        CellJob job{i, l, g, {}};
        for (int w = l; w < std::min(L, l + options.window); ++w)
          for (int t : pos) {
            PatchDirective d;
            d.site = options.site;
            d.layer = w;
            d.position = t;
            d.action = PatchAction::Zero;
            job.patch.directives.push_back(std::move(d));
          }
        jobs.push_back(std::move(job));
      }
    }
  }
  const auto ref = base_probs(model, prompts);
  return run_grid(model, prompts, ref, jobs, -1.0, "aae");
}

std::string PatchGrid::to_csv() const {
  std::ostringstream os;
  os.precision(10);
  os << "layer,group,effect,stderr,n\n";
  for (int l = 0; l < n_layers; ++l)
    for (int g = 0; g < 5; ++g) {
      const GridCell& c = cells[l][g];
      os << l << ',' << to_string(kPositionGroups[g]) << ',' << c.effect << ',' << c.stderr_ << ',' << c.n << '\n';
    }
  return os.str();
}

json PatchGrid::to_json() const {
  json groups = json::array();
  for (auto g : kPositionGroups) groups.push_back(std::string(to_string(g)));
  json cells_j = json::array();
  for (int l = 0; l < n_layers; ++l)
    for (int g = 0; g < 5; ++g) {
      const GridCell& c = cells[l][g];
      cells_j.push_back(json{{"layer", l}, {"group", groups[g]}, {"effect", c.effect}, {"stderr", c.stderr_}, {"n", c.n}});
    }
  const Concentration conc = effect_concentration(*this);
  return json{{"kind", kind},
              {"n_layers", n_layers},
              {"groups", groups},
              {"cells", cells_j},
              {"mean_base_prob", mean_base_prob},
              {"concentration", conc.value},
              {"concentration_degenerate", conc.degenerate}};
}

Concentration effect_concentration(std::span<const double> effects) {
  require(!effects.empty(), ErrorKind::InvalidInput, "concentration: empty grid");
  double s1 = 0.0, s2 = 0.0;
  for (double e : effects) {
    s1 += std::abs(e);
    s2 += e * e;
  }
  const double n = static_cast<double>(effects.size());
  if (s1 == 0.0) return {0.0, true};
  if (effects.size() == 1) return {1.0, false};
  const double h = s2 / (s1 * s1);
  return {std::clamp((h - 1.0 / n) / (1.0 - 1.0 / n), 0.0, 1.0), false};
}

Concentration effect_concentration(const PatchGrid& grid) {
  std::vector<double> e;
  for (const auto& row : grid.cells)
    for (const auto& c : row)
      if (c.n > 0) e.push_back(c.effect);
  if (e.empty()) return {0.0, true};
  return effect_concentration(e);
}

}  // namespace qlens
