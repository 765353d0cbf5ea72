#include "quantlens/interventions.hpp"

#include <algorithm>
#include <random>
#include <sstream>

#include "quantlens/error.hpp"
#include "quantlens/util.hpp"

namespace qlens {

using nlohmann::json;

CalibSet sample_calibration(const World& world, std::span<const int> facts, std::size_t n, std::uint64_t seed) {
  require(!facts.empty() && n > 0, ErrorKind::InvalidInput, "calibration: need facts and a positive sample count");
  auto rng = substream(seed, "calib");
  const int n_templates = static_cast<int>(world.templates_per_relation());
  std::uniform_int_distribution<std::size_t> pick_fact(0, facts.size() - 1);
  std::uniform_int_distribution<int> pick_tmpl(0, n_templates - 1);
  CalibSet c;
  for (std::size_t i = 0; i < n; ++i) {
    const int f = facts[pick_fact(rng)];
    Prompt p = render_prompt(world, world.facts.at(f), pick_tmpl(rng));
    p.tokens.push_back(p.target);
    c.sequences.push_back(std::move(p.tokens));
  }
  return c;
}

double eval_accuracy(const ModelBundle& model, const EvalSet& eval) {
  require(eval.world != nullptr, ErrorKind::InvalidInput, "eval: no world");
  if (eval.facts.empty()) return 0.0;
  const std::vector<int> primary{0};
  return accuracy_suite(model, *eval.world, eval.facts, primary).acc_any;
}

const SweepPoint& SweepResult::at(const std::string& label) const {
  for (const auto& p : points)
    if (p.label == label) return p;
  fail(ErrorKind::NotFound, "sweep point " + label);
}

std::string SweepResult::to_csv() const {
  std::ostringstream os;
  os.precision(10);
  os << "label,x,accuracy,average_bits\n";
  for (const auto& p : points) os << p.label << ',' << p.x << ',' << p.accuracy << ',' << p.average_bits << '\n';
  return os.str();
}

json SweepResult::to_json() const {
  json pts = json::array();
  for (const auto& p : points)
    pts.push_back(json{{"label", p.label}, {"x", p.x}, {"accuracy", p.accuracy}, {"average_bits", p.average_bits}});
  return json{{"kind", kind}, {"subset", subset}, {"points", pts}, {"settings", settings}, {"stamp", stamp}};
}

namespace {

SweepResult start(const SweepContext& ctx, const std::string& kind, json settings) {
  require(ctx.fp != nullptr, ErrorKind::InvalidInput, "sweep: no model");
  SweepResult r;
  r.kind = kind;
  r.subset = ctx.eval.name;
  settings["group_size"] = ctx.spec.group_size;
  settings["algorithm"] = std::string(to_string(ctx.spec.algorithm));
  settings["calib_sequences"] = ctx.calib.sequences.size();
  r.settings = std::move(settings);
  r.stamp = ctx.stamp;
  return r;
}

SweepPoint run_plan(const SweepContext& ctx, const std::vector<PlanDirective>& dirs, std::string label, double x) {
  const QuantPlan plan = build_plan(ctx.fp->config, dirs, ctx.spec);
  const QuantizedModel q = apply_plan(*ctx.fp, plan, ctx.calib);
  return {std::move(label), x, eval_accuracy(q.model, ctx.eval), q.report.average_bits};
}

SweepPoint fp_point(const SweepContext& ctx, std::string label, double x) {
  return {std::move(label), x, eval_accuracy(*ctx.fp, ctx.eval), 16.0};
}

}  // namespace

SweepResult domino_sweep(const SweepContext& ctx, int bits_lo, std::span<const int> k_values) {
  SweepResult r = start(ctx, "domino", json{{"bits_lo", bits_lo}, {"k_values", std::vector<int>(k_values.begin(), k_values.end())}});
  const int L = ctx.fp->config.n_layers;
  for (int k : k_values) {
    require(k >= -1 && k < L, ErrorKind::InvalidInput, "domino: k out of range");
    if (k < 0) {
      r.points.push_back(fp_point(ctx, "k=-1", -1));
      continue;
    }
    r.points.push_back(run_plan(ctx, {PlanDirective::layer_range(0, k, bits_lo)}, "k=" + std::to_string(k), k));
  }
  return r;
}

SweepResult single_layer_sweep(const SweepContext& ctx, int bits) {
  SweepResult r = start(ctx, "single_layer", json{{"bits", bits}});
  for (int l = 0; l < ctx.fp->config.n_layers; ++l) {
    if (bits >= 16) {
      r.points.push_back(fp_point(ctx, "layer=" + std::to_string(l), l));
      continue;
    }
    r.points.push_back(run_plan(ctx, {PlanDirective::layer_range(l, l, bits)}, "layer=" + std::to_string(l), l));
  }
  return r;
}

SweepResult component_sweep(const SweepContext& ctx, int bits, std::span<const ComponentMask> masks) {
  json names = json::array();
  for (auto m : masks) names.push_back(std::string(to_string(m)));
  SweepResult r = start(ctx, "component", json{{"bits", bits}, {"masks", names}});
  for (std::size_t i = 0; i < masks.size(); ++i) {
    const std::string label(to_string(masks[i]));
    if (masks[i] == ComponentMask::None) {
      r.points.push_back(fp_point(ctx, label, static_cast<double>(i)));
      continue;
    }
    r.points.push_back(run_plan(ctx, {PlanDirective::masked(masks[i], bits)}, label, static_cast<double>(i)));
  }
  return r;
}

std::string ProtectStrategy::label() const {
  std::ostringstream os;
  if (kind == Kind::EarlyLayers)
    os << "early_layers(" << n_layers << "," << bits_hi << ")";
  else
    os << "kurtosis(" << target_avg_bits << (granularity == KurtosisGranularity::Tensor ? ",tensor" : "") << ")";
  return os.str();
}

QuantPlan protect_plan(const ModelBundle& fp, const ProtectStrategy& s, int base_bits, const QuantSpec& spec) {
  const int L = fp.config.n_layers;
  if (s.kind == ProtectStrategy::Kind::EarlyLayers) {
    require(s.n_layers >= 0 && s.n_layers <= L, ErrorKind::InvalidConfig, "protect: layer count out of range");
    std::vector<PlanDirective> dirs{PlanDirective::uniform(base_bits)};
    if (s.n_layers > 0) dirs.push_back(PlanDirective::first_k(s.n_layers, s.bits_hi));
    return build_plan(fp.config, dirs, spec);
  }
  return kurtosis_protect_plan(fp, base_bits, s.target_avg_bits, spec, s.granularity);
}

QuantizedModel source_protect(const ModelBundle& fp, const ProtectStrategy& s, int base_bits, const CalibSet& calib,
                              const QuantSpec& spec) {
  return apply_plan(fp, protect_plan(fp, s, base_bits, spec), calib);
}

void AmplifyConfig::validate(int n_layers) const {
  require(alpha > 1.0, ErrorKind::InvalidConfig, "amplify: alpha must be > 1");
  require(layer < n_layers && min_layer < n_layers, ErrorKind::InvalidConfig, "amplify: layer out of range");
}

std::vector<AmplifiedPrediction> amplified_batch(const ModelBundle& model_q, std::span<const Prompt> prompts,
                                                 const AmplifyConfig& cfg) {
  const int L = model_q.config.n_layers;
  cfg.validate(L);
  std::vector<AmplifiedPrediction> out(prompts.size());
  if (prompts.empty()) return out;
  const auto traj = target_trajectories(model_q, prompts);

  int global_layer = -1;
  if (cfg.layer >= 0) {
    global_layer = cfg.layer;
  } else if (cfg.global) {
    LensTrajectory mean;
    mean.layers.resize(L);
    for (const auto& t : traj)
      for (int l = 0; l < L; ++l) mean.layers[l].entropy_bits += t.layers[l].entropy_bits;
    global_layer = peak_confidence_layer(mean, cfg.min_layer);
  }

  constexpr std::size_t kChunk = 512;
  std::vector<PatchSpec> patches(prompts.size());
  for (std::size_t i = 0; i < prompts.size(); ++i) {
    out[i].trajectory = traj[i];
    out[i].layer = global_layer >= 0 ? global_layer : peak_confidence_layer(traj[i], cfg.min_layer);
    PatchDirective d;
    d.site = PatchSite::ResidualOut;
    d.layer = out[i].layer;
    d.position = static_cast<int>(prompts[i].tokens.size()) - 1;
    d.action = PatchAction::Scale;
    d.alpha = cfg.alpha;
    patches[i].directives.push_back(d);
  }

  for (std::size_t lo = 0; lo < prompts.size(); lo += kChunk) {
    const std::size_t hi = std::min(prompts.size(), lo + kChunk);
    std::vector<SequenceJob> base_jobs, amp_jobs;
    for (std::size_t i = lo; i < hi; ++i) {
      base_jobs.push_back({prompts[i].tokens, nullptr});
      amp_jobs.push_back({prompts[i].tokens, &patches[i]});
    }
    const auto base = forward_batch(model_q, base_jobs);
    for (std::size_t i = lo; i < hi; ++i) out[i].base_prediction = argmax_lowest(base[i - lo].logits);
    if (cfg.mode == AmplifyMode::ResidualScale) {
      const auto amp = forward_batch(model_q, amp_jobs);
      for (std::size_t i = lo; i < hi; ++i) {
        out[i].logits = amp[i - lo].logits;
        out[i].amplified_prediction = argmax_lowest(out[i].logits);
      }
    } else {
      // Final logits replaced by alpha times the lens logits of l*.
      CaptureFlags cap;
      cap.residual = true;
      const auto tr = forward_batch(model_q, base_jobs, cap);
      const Matrix wu = model_q.weights.unembed.cast<double>();
      const auto& c = model_q.config;
      for (std::size_t i = lo; i < hi; ++i) {
        const MatrixF& r = tr[i - lo].trace.layers[out[i].layer].residual_out;
        const auto h = r.row(r.rows() - 1);
        double ss = 0.0;
        for (float v : h) ss += static_cast<double>(v) * v;
        const double inv = 1.0 / std::sqrt(ss / static_cast<double>(h.size()) + c.rmsnorm_eps);
        std::vector<float> logits(wu.rows());
        for (std::size_t v = 0; v < wu.rows(); ++v) {
          double acc = 0.0;
          for (std::size_t j = 0; j < h.size(); ++j) acc += wu(v, j) * h[j] * inv * model_q.weights.final_norm(0, j);
          logits[v] = static_cast<float>(cfg.alpha * acc);
        }
        out[i].amplified_prediction = argmax_lowest(logits);
        out[i].logits = std::move(logits);
      }
    }
  }
  return out;
}

AmplifiedPrediction amplified_forward(const ModelBundle& model_q, const Prompt& prompt, const AmplifyConfig& cfg) {
  return amplified_batch(model_q, std::span<const Prompt>(&prompt, 1), cfg).front();
}

double amplified_accuracy(const ModelBundle& model_q, const EvalSet& eval, const AmplifyConfig& cfg) {
  require(eval.world != nullptr, ErrorKind::InvalidInput, "eval: no world");
  if (eval.facts.empty()) return 0.0;
  const auto prompts = render_primary(*eval.world, eval.facts);
  const auto preds = amplified_batch(model_q, prompts, cfg);
  std::size_t ok = 0;
  for (std::size_t i = 0; i < prompts.size(); ++i) ok += preds[i].amplified_prediction == prompts[i].target;
  return static_cast<double>(ok) / static_cast<double>(prompts.size());
}

std::string InjectionResult::to_csv() const {
  std::ostringstream os;
  os.precision(10);
  os << "k,layer,mean,std,n\n";
  for (const auto& c : curves)
    for (std::size_t l = 0; l < c.cosine.n_layers(); ++l)
      os << c.k << ',' << l << ',' << c.cosine.mean[l] << ',' << c.cosine.dispersion[l] << ',' << c.cosine.n[l] << '\n';
  return os.str();
}

json InjectionResult::to_json() const {
  json cs = json::array();
  for (const auto& c : curves)
    cs.push_back(json{{"k", c.k}, {"cosine", c.cosine.to_json()}, {"mean_upto_k", c.mean_upto_k}, {"mean_after_k", c.mean_after_k}});
  return json{{"kind", "injection"}, {"bits_hi", bits_hi}, {"bits_lo", bits_lo}, {"curves", cs}, {"stamp", stamp}};
}

namespace {

std::vector<ForwardTrace> residual_traces(const ModelBundle& model, std::span<const Prompt> prompts) {
  CaptureFlags cap;
  cap.residual = true;
  std::vector<ForwardTrace> out;
  for (std::size_t lo = 0; lo < prompts.size(); lo += 512) {
    const std::size_t hi = std::min(prompts.size(), lo + 512);
    std::vector<SequenceJob> jobs;
    for (std::size_t i = lo; i < hi; ++i) jobs.push_back({prompts[i].tokens, nullptr});
    for (auto& r : forward_batch(model, jobs, cap)) out.push_back(std::move(r.trace));
  }
  return out;
}

}  // namespace

InjectionResult signal_injection_sweep(const SweepContext& ctx, int bits_hi, int bits_lo, std::span<const int> k_values) {
  require(ctx.fp != nullptr && ctx.eval.world != nullptr, ErrorKind::InvalidInput, "injection: missing model or world");
  require(!ctx.eval.facts.empty(), ErrorKind::InvalidInput, "injection: empty evaluation set");
  const int L = ctx.fp->config.n_layers;
  const auto prompts = render_primary(*ctx.eval.world, ctx.eval.facts);
  const auto fp_traces = residual_traces(*ctx.fp, prompts);
  InjectionResult res;
  res.bits_hi = bits_hi;
  res.bits_lo = bits_lo;
  res.stamp = ctx.stamp;
  for (int k : k_values) {
    require(k >= 0 && k < L, ErrorKind::InvalidInput, "injection: k out of range");
    std::vector<PlanDirective> dirs{PlanDirective::uniform(bits_lo), PlanDirective::layer_range(0, k, bits_hi)};
    const QuantizedModel q = apply_plan(*ctx.fp, build_plan(ctx.fp->config, dirs, ctx.spec), ctx.calib);
    const auto q_traces = residual_traces(q.model, prompts);
    std::vector<LayerCurve> per;
    for (std::size_t i = 0; i < prompts.size(); ++i)
      per.push_back(value_cosine_profile(fp_traces[i], q_traces[i], prompts[i].positions.last_token, PatchSite::ResidualOut));
    InjectionCurve c{k, mean_curves(per), 0.0, 0.0};
    c.cosine.metric = "injection_cosine_residual_out";
    c.cosine.position = "last_token";
    int n_up = 0, n_after = 0;
    for (int l = 0; l < L; ++l) {
      if (l <= k) {
        c.mean_upto_k += c.cosine.mean[l];
        ++n_up;
      } else {
        c.mean_after_k += c.cosine.mean[l];
        ++n_after;
      }
    }
    if (n_up) c.mean_upto_k /= n_up;
    if (n_after) c.mean_after_k /= n_after;
    res.curves.push_back(std::move(c));
  }
  return res;
}

SweepResult compensation_battery(const SweepContext& ctx, int bits, std::span<const int> ranks,
                                 std::span<const ProtectStrategy> strategies, CompensationMode mode) {
  json strat = json::array();
  for (const auto& s : strategies) strat.push_back(s.label());
  SweepResult r = start(ctx, "compensation",
                        json{{"bits", bits},
                             {"ranks", std::vector<int>(ranks.begin(), ranks.end())},
                             {"strategies", strat},
                             {"mode", mode == CompensationMode::Plain ? "plain" : "activation_weighted"}});
  const std::vector<PlanDirective> base{PlanDirective::uniform(bits)};
  {
    const QuantPlan plan = build_plan(ctx.fp->config, base, ctx.spec);
    const QuantizedModel q = apply_plan(*ctx.fp, plan, ctx.calib);
    r.points.push_back({"plain", 0, eval_accuracy(q.model, ctx.eval), q.report.average_bits});
  }
  for (int rank : ranks) {
    require(rank >= 1, ErrorKind::InvalidInput, "compensation: ranks must be >= 1");
    QuantPlan plan = build_plan(ctx.fp->config, base, ctx.spec);
    plan.compensation = {rank, mode};
    const QuantizedModel q = apply_plan(*ctx.fp, plan, ctx.calib);
    r.points.push_back({"rank=" + std::to_string(rank), static_cast<double>(rank), eval_accuracy(q.model, ctx.eval),
                        q.report.average_bits});
  }
  for (const auto& s : strategies) {
    QuantSpec spec = ctx.spec;
    const QuantizedModel q = source_protect(*ctx.fp, s, bits, ctx.calib, spec);
    r.points.push_back({s.label(), 0, eval_accuracy(q.model, ctx.eval), q.report.average_bits});
  }
  return r;
}

}  // namespace qlens
