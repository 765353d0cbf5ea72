#include "quantlens/probes.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "quantlens/error.hpp"
#include "quantlens/numkit.hpp"

namespace qlens {

using nlohmann::json;

namespace {

constexpr std::size_t kPredictChunk = 512;

// Lens distributions for a batch of hidden rows (n x d) -> n x V probabilities.
Matrix lens_rows(const ModelBundle& model, const Matrix& hidden, const LensOptions& opt) {
  const ModelConfig& c = model.config;
  const std::size_t d = c.d_model;
  Matrix x = hidden;
  if (opt.apply_final_norm) {
    for (std::size_t i = 0; i < x.rows(); ++i) {
      double ss = 0.0;
      for (std::size_t j = 0; j < d; ++j) ss += x(i, j) * x(i, j);
      const double inv = 1.0 / std::sqrt(ss / static_cast<double>(d) + c.rmsnorm_eps);
      for (std::size_t j = 0; j < d; ++j) x(i, j) *= inv * model.weights.final_norm(0, j);
    }
  }
  const Matrix wu = model.weights.unembed.cast<double>();
  Matrix logits(x.rows(), wu.rows());
  kernels::gemm_nt(x.view(), wu.view(), logits.view(), false);
  for (std::size_t i = 0; i < logits.rows(); ++i) {
    auto r = logits.row(i);
    const double mx = *std::max_element(r.begin(), r.end());
    double sum = 0.0;
    for (auto& v : r) {
      v = std::exp(v - mx);
      sum += v;
    }
    for (auto& v : r) v /= sum;
  }
  return logits;
}

LensPoint point_from(std::span<const double> p, int layer, int target) {
  require(target >= 0 && static_cast<std::size_t>(target) < p.size(), ErrorKind::InvalidInput, "lens: target out of range");
  return {layer, p[target], target_rank(p, target), shannon_entropy(p, false) / std::log(2.0)};
}

}  // namespace

std::vector<double> logit_lens(const ForwardTrace& trace, const ModelBundle& model, int layer, int position,
                               const LensOptions& options) {
  if (!trace.captured.residual || layer < 0 || static_cast<std::size_t>(layer) >= trace.layers.size() ||
      trace.layers[layer].residual_out.empty())
    fail(ErrorKind::TraceIncomplete, "logit lens needs residual_out at layer " + std::to_string(layer));
  const MatrixF& r = trace.layers[layer].residual_out;
  require(position >= 0 && static_cast<std::size_t>(position) < r.rows(), ErrorKind::InvalidInput,
          "logit lens: position out of range");
  Matrix h(1, r.cols());
  for (std::size_t j = 0; j < r.cols(); ++j) h(0, j) = r(position, j);
  const Matrix p = lens_rows(model, h, options);
  return {p.row(0).begin(), p.row(0).end()};
}

int target_rank(std::span<const double> probs, int target) {
  require(target >= 0 && static_cast<std::size_t>(target) < probs.size(), ErrorKind::InvalidInput, "rank: target out of range");
  const double pt = probs[target];
  int rank = 1;
  for (std::size_t j = 0; j < probs.size(); ++j) {
    if (probs[j] > pt || (probs[j] == pt && static_cast<int>(j) < target)) ++rank;
  }
  return rank;
}

LensTrajectory trajectory_from_trace(const ForwardTrace& trace, const ModelBundle& model, int position, int target,
                                     const LensOptions& options) {
  if (!trace.captured.residual) fail(ErrorKind::TraceIncomplete, "trajectory needs residual captures");
  const std::size_t L = trace.layers.size();
  Matrix h(L, model.config.d_model);
  for (std::size_t l = 0; l < L; ++l) {
    const MatrixF& r = trace.layers[l].residual_out;
    if (r.empty()) fail(ErrorKind::TraceIncomplete, "trajectory: layer " + std::to_string(l) + " missing");
    require(position >= 0 && static_cast<std::size_t>(position) < r.rows(), ErrorKind::InvalidInput,
            "trajectory: position out of range");
    for (std::size_t j = 0; j < r.cols(); ++j) h(l, j) = r(position, j);
  }
  const Matrix p = lens_rows(model, h, options);
  LensTrajectory t;
  for (std::size_t l = 0; l < L; ++l) t.layers.push_back(point_from(p.row(l), static_cast<int>(l), target));
  return t;
}

LensTrajectory target_trajectory(const ModelBundle& model, std::span<const int> tokens, int target,
                                 const LensOptions& options) {
  require(target >= 0 && target < model.config.vocab_size, ErrorKind::InvalidInput, "trajectory: target out of range");
  CaptureFlags cap;
  cap.residual = true;
  const auto r = forward(model, tokens, cap);
  return trajectory_from_trace(r.trace, model, static_cast<int>(tokens.size()) - 1, target, options);
}

std::vector<LensTrajectory> target_trajectories(const ModelBundle& model, std::span<const Prompt> prompts,
                                                const LensOptions& options) {
  std::vector<LensTrajectory> out;
  out.reserve(prompts.size());
  CaptureFlags cap;
  cap.residual = true;
  for (std::size_t lo = 0; lo < prompts.size(); lo += kPredictChunk) {
    const std::size_t hi = std::min(prompts.size(), lo + kPredictChunk);
    std::vector<SequenceJob> jobs;
    for (std::size_t i = lo; i < hi; ++i) jobs.push_back({prompts[i].tokens, nullptr});
    const auto res = forward_batch(model, jobs, cap);
    for (std::size_t i = lo; i < hi; ++i)
      out.push_back(trajectory_from_trace(res[i - lo].trace, model, static_cast<int>(prompts[i].tokens.size()) - 1,
                                          prompts[i].target, options));
  }
  return out;
}

std::string trajectory_csv(const LensTrajectory& t) {
  std::ostringstream os;
  os.precision(10);
  os << "layer,prob,rank,entropy_bits\n";
  for (const auto& p : t.layers) os << p.layer << ',' << p.prob << ',' << p.rank << ',' << p.entropy_bits << '\n';
  return os.str();
}

std::array<std::size_t, 6> rank_histogram(std::span<const int> ranks) {
  std::array<std::size_t, 6> h{};
  for (int r : ranks) {
    require(r >= 1, ErrorKind::InvalidInput, "rank histogram: ranks must be >= 1");
    const int b = r == 1 ? 0 : r <= 5 ? 1 : r <= 10 ? 2 : r <= 100 ? 3 : r <= 1000 ? 4 : 5;
    ++h[b];
  }
  return h;
}

int peak_confidence_layer(const LensTrajectory& t, int min_layer) {
  const int n = static_cast<int>(t.layers.size());
  require(n > 0, ErrorKind::InvalidInput, "peak layer: empty trajectory");
  if (min_layer < 0) min_layer = n / 2;
  require(min_layer < n, ErrorKind::InvalidInput, "peak layer: min_layer out of range");
  int best = min_layer;
  for (int l = min_layer + 1; l < n; ++l)
    if (t.layers[l].entropy_bits <= t.layers[best].entropy_bits) best = l;
  return best;
}

bool FactAccuracy::any() const { return std::any_of(correct.begin(), correct.end(), [](bool b) { return b; }); }

bool FactAccuracy::majority() const {
  const auto k = std::count(correct.begin(), correct.end(), true);
  return 2 * static_cast<std::size_t>(k) > correct.size();
}

bool FactAccuracy::all() const {
  return !correct.empty() && std::all_of(correct.begin(), correct.end(), [](bool b) { return b; });
}

std::vector<bool> AccuracyReport::any_vector() const {
  std::vector<bool> v;
  for (const auto& f : facts) v.push_back(f.any());
  return v;
}

json AccuracyReport::to_json(bool include_facts) const {
  json rel = json::array();
  for (std::size_t r = 0; r < per_relation.size(); ++r)
    rel.push_back(json{{"relation", r}, {"any", per_relation[r][0]}, {"majority", per_relation[r][1]}, {"all", per_relation[r][2]}});
  json j{{"n_facts", facts.size()}, {"acc_any", acc_any}, {"acc_majority", acc_majority}, {"acc_all", acc_all},
         {"per_relation", rel}};
  if (include_facts) {
    json f = json::array();
    for (const auto& fa : facts) f.push_back(json{{"fact", fa.fact_id}, {"correct", fa.correct}});
    j["facts"] = f;
  }
  return j;
}

AccuracyReport summarize_accuracy(std::vector<FactAccuracy> facts, int n_relations) {
  AccuracyReport r;
  r.facts = std::move(facts);
  std::vector<std::array<double, 3>> sums(std::max(n_relations, 0), {0, 0, 0});
  std::vector<double> counts(sums.size(), 0);
  for (const auto& f : r.facts) {
    require(!f.correct.empty(), ErrorKind::InvalidInput, "accuracy: fact without paraphrases");
    r.acc_any += f.any();
    r.acc_majority += f.majority();
    r.acc_all += f.all();
    if (f.relation >= 0 && static_cast<std::size_t>(f.relation) < sums.size()) {
      sums[f.relation][0] += f.any();
      sums[f.relation][1] += f.majority();
      sums[f.relation][2] += f.all();
      counts[f.relation] += 1;
    }
  }
  const double n = static_cast<double>(r.facts.size());
  if (n > 0) {
    r.acc_any /= n;
    r.acc_majority /= n;
    r.acc_all /= n;
  }
  for (std::size_t i = 0; i < sums.size(); ++i)
    r.per_relation.push_back(counts[i] > 0 ? std::array<double, 3>{sums[i][0] / counts[i], sums[i][1] / counts[i],
                                                                   sums[i][2] / counts[i]}
                                           : std::array<double, 3>{0, 0, 0});
  return r;
}

std::vector<int> batch_predict(const ModelBundle& model, std::span<const std::vector<int>> sequences) {
  std::vector<int> out;
  out.reserve(sequences.size());
  for (std::size_t lo = 0; lo < sequences.size(); lo += kPredictChunk) {
    const std::size_t hi = std::min(sequences.size(), lo + kPredictChunk);
    std::vector<SequenceJob> jobs;
    for (std::size_t i = lo; i < hi; ++i) jobs.push_back({sequences[i], nullptr});
    for (const auto& r : forward_batch(model, jobs)) out.push_back(argmax_lowest(r.logits));
  }
  return out;
}

AccuracyReport accuracy_suite(const ModelBundle& model, const World& world, std::span<const int> fact_ids,
                              std::span<const int> templates, bool instruction_wrapper) {
  std::vector<int> tmpl(templates.begin(), templates.end());
  if (tmpl.empty())
    for (std::size_t t = 0; t < world.templates_per_relation(); ++t) tmpl.push_back(static_cast<int>(t));
  std::vector<std::vector<int>> seqs;
  std::vector<int> targets;
  for (int f : fact_ids) {
    require(f >= 0 && static_cast<std::size_t>(f) < world.facts.size(), ErrorKind::InvalidInput, "accuracy: bad fact id");
    for (int t : tmpl) {
      Prompt p = render_prompt(world, world.facts[f], t, instruction_wrapper);
      seqs.push_back(std::move(p.tokens));
      targets.push_back(p.target);
    }
  }
  const auto pred = batch_predict(model, seqs);
  std::vector<FactAccuracy> facts;
  std::size_t k = 0;
  for (int f : fact_ids) {
    FactAccuracy fa{f, world.facts[f].relation, {}};
    for (std::size_t t = 0; t < tmpl.size(); ++t, ++k) fa.correct.push_back(pred[k] == targets[k]);
    facts.push_back(std::move(fa));
  }
  return summarize_accuracy(std::move(facts), static_cast<int>(world.relations.size()));
}

}  // namespace qlens
