#include "quantlens/pipeline.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>

#include "files.hpp"
#include "quantlens/causal.hpp"
#include "quantlens/diagnostics.hpp"
#include "quantlens/interventions.hpp"
#include "quantlens/probes.hpp"
#include "quantlens/util.hpp"

namespace qlens {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------- manifest

json AnalysisConfig::to_json() const {
  return json{{"max_prompts", max_prompts},
              {"min_failure_facts", min_failure_facts},
              {"causal_window", causal_window},
              {"subspace_k", subspace_k},
              {"jaccard_fraction", jaccard_fraction},
              {"domino_k", domino_k},
              {"injection_k", injection_k},
              {"alphas", alphas},
              {"ranks", ranks},
              {"protect_layers", protect_layers},
              {"protect_bits", protect_bits},
              {"kurtosis_extra_bits", kurtosis_extra_bits},
              {"kurtosis_granularity", std::string(to_string(kurtosis_granularity))},
              {"sweep_facts", sweep_facts}};
}

namespace {

void check_keys(const json& j, std::initializer_list<const char*> allowed, const std::string& where) {
  if (!j.is_object()) fail(ErrorKind::InvalidConfig, "manifest: " + where + " must be an object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool ok = false;
    for (const char* a : allowed) ok = ok || it.key() == a;
    if (!ok) fail(ErrorKind::InvalidConfig, "manifest: unknown key " + where + "." + it.key());
  }
}

}  // namespace

AnalysisConfig AnalysisConfig::from_json(const json& j) {
  check_keys(j,
             {"max_prompts", "min_failure_facts", "causal_window", "subspace_k", "jaccard_fraction", "domino_k",
              "injection_k", "alphas", "ranks", "protect_layers", "protect_bits", "kurtosis_extra_bits",
              "kurtosis_granularity", "sweep_facts"},
             "analyses");
  AnalysisConfig a;
  a.max_prompts = j.value("max_prompts", a.max_prompts);
  a.min_failure_facts = j.value("min_failure_facts", a.min_failure_facts);
  a.causal_window = j.value("causal_window", a.causal_window);
  a.subspace_k = j.value("subspace_k", a.subspace_k);
  a.jaccard_fraction = j.value("jaccard_fraction", a.jaccard_fraction);
  a.domino_k = j.value("domino_k", a.domino_k);
  a.injection_k = j.value("injection_k", a.injection_k);
  a.alphas = j.value("alphas", a.alphas);
  a.ranks = j.value("ranks", a.ranks);
  a.protect_layers = j.value("protect_layers", a.protect_layers);
  a.protect_bits = j.value("protect_bits", a.protect_bits);
  a.kurtosis_extra_bits = j.value("kurtosis_extra_bits", a.kurtosis_extra_bits);
  if (j.contains("kurtosis_granularity"))
    a.kurtosis_granularity = parse_granularity(j["kurtosis_granularity"].get<std::string>());
  a.sweep_facts = j.value("sweep_facts", a.sweep_facts);
  require(a.max_prompts > 0 && a.causal_window >= 1 && a.subspace_k >= 1, ErrorKind::InvalidConfig,
          "manifest: analyses limits must be positive");
  for (double x : a.alphas) require(x > 1.0, ErrorKind::InvalidConfig, "manifest: alphas must be > 1");
  for (int r : a.ranks) require(r >= 1, ErrorKind::InvalidConfig, "manifest: ranks must be >= 1");
  return a;
}

json Manifest::to_json() const {
  json m = model.to_json();
  m.erase("vocab_size");
  return json{{"seed", seed},
              {"corpus",
               {{"seed", corpus.seed},
                {"n_subjects", corpus.n_subjects},
                {"n_relations", corpus.n_relations},
                {"targets_per_relation", corpus.targets_per_relation},
                {"train_fraction", train_fraction}}},
              {"model", m},
              {"train", train.to_json()},
              {"quant",
               {{"bits", bits},
                {"group_size", quant.group_size},
                {"algorithm", std::string(qlens::to_string(quant.algorithm))},
                {"calib_sequences", calib_sequences}}},
              {"analyses", analyses.to_json()},
              {"expected_digests", expected_digests}};
}

Manifest Manifest::from_json(const json& j) {
  Manifest m;
  try {
    check_keys(j, {"seed", "corpus", "model", "train", "quant", "analyses", "expected_digests"}, "");
    if (!j.contains("seed") || !j["seed"].is_number_integer())
      fail(ErrorKind::InvalidConfig, "manifest: top-level integer seed is required");
    m.seed = j["seed"].get<std::uint64_t>();
    if (!j.contains("corpus") || !j["corpus"].contains("seed"))
      fail(ErrorKind::InvalidConfig, "manifest: corpus.seed is required");
    const json& c = j["corpus"];
    check_keys(c, {"seed", "n_subjects", "n_relations", "targets_per_relation", "train_fraction"}, "corpus");
    m.corpus.seed = c["seed"].get<std::uint64_t>();
    m.corpus.n_subjects = c.value("n_subjects", m.corpus.n_subjects);
    m.corpus.n_relations = c.value("n_relations", m.corpus.n_relations);
    m.corpus.targets_per_relation = c.value("targets_per_relation", m.corpus.targets_per_relation);
    m.train_fraction = c.value("train_fraction", m.train_fraction);
    require(m.train_fraction > 0 && m.train_fraction <= 1, ErrorKind::InvalidConfig, "manifest: train_fraction must be in (0, 1]");
    if (j.contains("model")) {
      check_keys(j["model"], {"n_layers", "d_model", "n_heads", "head_dim", "d_ff", "max_seq_len", "rope_theta", "rmsnorm_eps"},
                 "model");
      m.model = ModelConfig::from_json(j["model"]);
    }
    // The vocabulary comes from the world later; check the rest now.
    ModelConfig shape = m.model;
    shape.vocab_size = std::max(shape.vocab_size, 2);
    shape.validate();
    json t = j.value("train", json::object());
    if (!t.contains("seed")) t["seed"] = m.seed;
    m.train = TrainHyperparams::from_json(t);
    if (j.contains("quant")) {
      const json& q = j["quant"];
      check_keys(q, {"bits", "group_size", "algorithm", "calib_sequences"}, "quant");
      m.bits = q.value("bits", m.bits);
      m.quant.group_size = q.value("group_size", m.quant.group_size);
      if (q.contains("algorithm")) m.quant.algorithm = parse_algorithm(q["algorithm"].get<std::string>());
      m.calib_sequences = q.value("calib_sequences", m.calib_sequences);
    }
    std::set<int> seen;
    for (int b : m.bits) {
      require(b == 2 || b == 3 || b == 4 || b == 8, ErrorKind::InvalidConfig, "manifest: bits must be drawn from {2,3,4,8}");
      require(seen.insert(b).second, ErrorKind::InvalidConfig, "manifest: duplicate bit width");
    }
    require(m.calib_sequences > 0, ErrorKind::InvalidConfig, "manifest: calib_sequences must be positive");
    if (j.contains("analyses")) m.analyses = AnalysisConfig::from_json(j["analyses"]);
    if (j.contains("expected_digests")) m.expected_digests = j["expected_digests"];
  } catch (const json::exception& e) {
    fail(ErrorKind::InvalidConfig, std::string("manifest: ") + e.what());
  }
  return m;
}

Manifest Manifest::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::Io, "cannot open manifest " + path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    fail(ErrorKind::InvalidConfig, std::string("manifest is not valid JSON: ") + e.what());
  }
  return from_json(j);
}

std::string Manifest::digest() const { return sha256_hex(to_json().dump()); }

// ---------------------------------------------------------------- pipeline

namespace {

constexpr int kFp = 16;

std::string model_file(int bits) { return bits == kFp ? "model/fp.qlck" : "model/q" + std::to_string(bits) + ".qlck"; }

std::vector<Prompt> cap(std::vector<Prompt> v, std::size_t n) {
  if (v.size() > n) v.resize(n);
  return v;
}

std::vector<int> cap_ids(std::vector<int> v, std::size_t n) {
  if (v.size() > n) v.resize(n);
  return v;
}

// Evenly spaced subsample keeping order.
std::vector<int> spread(const std::vector<int>& v, std::size_t n) {
  if (v.size() <= n) return v;
  std::vector<int> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(v[i * v.size() / n]);
  return out;
}

std::vector<int> stage_deps(const std::string& s) {
  const std::vector<std::string> order(kStages.begin(), kStages.end());
  const auto it = std::find(order.begin(), order.end(), s);
  if (it == order.end()) fail(ErrorKind::InvalidInput, "unknown stage " + s);
  const int i = static_cast<int>(it - order.begin());
  if (i == 0) return {};
  if (i <= 3) return {i - 1};
  return {3};
}

}  // namespace

struct Pipeline::Impl {
  Pipeline& p;
  std::string manifest_digest;
  int lock_fd = -1;
  std::string lock_path;
  std::vector<std::string> files;  // current stage outputs
  std::optional<World> world;
  std::optional<Splits> splits;
  std::map<int, ModelBundle> models;
  std::optional<json> subsets;

  explicit Impl(Pipeline& pl) : p(pl) {}

  fs::path root() const { return fs::path(p.out_); }

  void emit(const std::string& rel, const std::string& content) {
    write_file(root() / rel, content);
    files.push_back(rel);
  }
  void emit_json(const std::string& rel, json j) {
    j["manifest_digest"] = manifest_digest;
    emit(rel, j.dump(1) + "\n");
  }
  void emit_csv(const std::string& rel, const std::string& csv) { emit(rel, with_digest_footer(csv, manifest_digest)); }

  const World& get_world() {
    if (!world) world = load_world((root() / "corpus/world.json").string());
    return *world;
  }
  const Splits& get_splits() {
    if (!splits) {
      const json j = read_json(root() / "corpus/splits.json");
      splits = Splits{j.at("train").get<std::vector<int>>(), j.at("eval").get<std::vector<int>>()};
    }
    return *splits;
  }
  const ModelBundle& model(int bits) {
    auto it = models.find(bits);
    if (it != models.end()) return it->second;
    return models.emplace(bits, load_checkpoint((root() / model_file(bits)).string())).first->second;
  }
  const json& get_subsets() {
    if (!subsets) subsets = read_json(root() / "subsets.json");
    return *subsets;
  }
  std::vector<int> subset(const std::string& name) { return get_subsets().at(name).get<std::vector<int>>(); }
  int failure_bits() { return get_subsets().at("failure_bits").get<int>(); }

  CalibSet calib() {
    return sample_calibration(get_world(), get_splits().train, p.manifest_.calib_sequences, p.manifest_.seed);
  }
  json stamp(int bits) {
    return json{{"corpus_digest", get_world().digest()}, {"model_digest", model(bits).digest()},
                {"seed", p.manifest_.seed}, {"manifest_digest", manifest_digest}};
  }
  std::vector<int> bits_present() {
    std::vector<int> b = p.manifest_.bits;
    std::sort(b.rbegin(), b.rend());
    return b;
  }
  bool has_bits(int b) {
    return std::find(p.manifest_.bits.begin(), p.manifest_.bits.end(), b) != p.manifest_.bits.end();
  }
  void log(const std::string& s) {
    if (!p.options_.quiet) std::cerr << "[quantlens] " << s << std::endl;
  }

  // ------------------------------------------------------------ stages

  void gen_corpus() {
    const Manifest& m = p.manifest_;
    world = generate_world(m.corpus);
    fs::create_directories(root() / "corpus");
    save_world(*world, (root() / "corpus/world.json").string());
    files.push_back("corpus/world.json");
    splits = build_splits(*world, m.train_fraction, m.corpus.seed);
    emit_json("corpus/splits.json", json{{"train", splits->train}, {"eval", splits->eval},
                                         {"world_digest", world->digest()}, {"n_facts", world->facts.size()},
                                         {"vocab_size", world->vocab.size()}});
  }

  void train_stage() {
    const Manifest& m = p.manifest_;
    const World& w = get_world();
    ModelConfig cfg = m.model;
    cfg.vocab_size = static_cast<int>(w.vocab.size());
    cfg.validate();
    ModelBundle model = init_model(cfg, m.seed);
    const auto prompts = render_all(w, get_splits().train);
    std::vector<TrainSample> set;
    for (const auto& pr : prompts) set.push_back({pr.tokens, pr.target});
    log("training " + std::to_string(m.train.steps) + " steps on " + std::to_string(set.size()) + " prompts");
    const TrainReport rep = train(model, set, m.train, [&](int step, double loss) {
      if (step % 250 == 0) log("step " + std::to_string(step) + " loss " + std::to_string(loss));
    });
    timing["train_seconds"] = rep.seconds;
    const AccuracyReport acc = accuracy_suite(model, w, get_splits().train);
    model.metadata = json{{"role", "fp"}, {"manifest_digest", manifest_digest}, {"train", m.train.to_json()}};
    fs::create_directories(root() / "model");
    save_checkpoint(model, (root() / model_file(kFp)).string());
    files.push_back(model_file(kFp));
    std::vector<double> curve;
    for (std::size_t i = 0; i < rep.loss_curve.size(); i += 10) curve.push_back(rep.loss_curve[i]);
    emit_json("model/train.json", json{{"steps", rep.steps}, {"loss_curve_every_10", curve},
                                       {"final_loss", rep.loss_curve.empty() ? 0.0 : rep.loss_curve.back()},
                                       {"epoch_recall", rep.epoch_recall}, {"train_accuracy", acc.to_json()},
                                       {"model_digest", model.digest()}});
    models[kFp] = std::move(model);
  }

  void quantize_stage() {
    const Manifest& m = p.manifest_;
    const CalibSet c = calib();
    const ModelBundle& fp = model(kFp);
    for (int b : bits_present()) {
      log("quantizing at " + std::to_string(b) + " bits");
      const std::vector<PlanDirective> dirs{PlanDirective::uniform(b)};
      const QuantPlan plan = build_plan(fp.config, dirs, m.quant);
      QuantizedModel q = apply_plan(fp, plan, c);
      q.model.metadata["manifest_digest"] = manifest_digest;
      save_checkpoint(q.model, (root() / model_file(b)).string());
      files.push_back(model_file(b));
      emit_json("quant/q" + std::to_string(b) + ".json",
                json{{"bits", b}, {"report", q.report.to_json()}, {"model_digest", q.model.digest()}});
      models[b] = std::move(q.model);
    }
  }

  std::vector<bool> primary_correct(const ModelBundle& mdl, const std::vector<int>& facts) {
    const auto prompts = render_primary(get_world(), facts);
    std::vector<std::vector<int>> seqs;
    for (const auto& pr : prompts) seqs.push_back(pr.tokens);
    const auto pred = batch_predict(mdl, seqs);
    std::vector<bool> ok;
    for (std::size_t i = 0; i < prompts.size(); ++i) ok.push_back(pred[i] == prompts[i].target);
    return ok;
  }

  void partition_stage() {
    const Manifest& m = p.manifest_;
    const auto& facts = get_splits().eval;
    const auto fp_ok = primary_correct(model(kFp), facts);
    json out;
    auto map_ids = [&](const std::vector<int>& idx) {
      std::vector<int> v;
      for (int i : idx) v.push_back(facts[i]);
      return v;
    };
    json parts = json::object();
    for (int b : bits_present()) {
      const auto part = partition_subsets(fp_ok, primary_correct(model(b), facts));
      parts[std::to_string(b)] = json{{"robust", map_ids(part.robust)}, {"failure", map_ids(part.failure)},
                                      {"other", map_ids(part.other)}, {"counts", part.report()}};
    }
    // The 4-bit partition defines the subsets; a too-small 4-bit Failure
    // subset is rebuilt from the 3-bit model.
    require(has_bits(4), ErrorKind::InvalidConfig, "partition: 4-bit model required");
    int fb = 4;
    if (parts["4"]["failure"].size() < m.analyses.min_failure_facts && has_bits(3)) fb = 3;
    out["robust"] = parts["4"]["robust"];
    out["failure"] = parts[std::to_string(fb)]["failure"];
    out["failure_bits"] = fb;
    out["by_bits"] = parts;
    std::vector<int> fp_correct_ids;
    for (std::size_t i = 0; i < facts.size(); ++i)
      if (fp_ok[i]) fp_correct_ids.push_back(facts[i]);
    out["fp_correct"] = fp_correct_ids;
    out["eval"] = facts;
    emit_json("subsets.json", out);
    subsets = out;
  }

  void probes_stage() {
    const World& w = get_world();
    const auto& facts = get_splits().eval;
    std::vector<int> all_bits{kFp};
    for (int b : bits_present()) all_bits.push_back(b);
    json acc = json::object();
    std::ostringstream hist, traj;
    hist << "bits,bucket,count\n";
    traj << "bits,layer,prob,rank,entropy_bits\n";
    hist.precision(10);
    traj.precision(10);
    const auto all_prompts = render_all(w, facts);
    const auto fail_prompts = cap(render_primary(w, subset("failure")), p.manifest_.analyses.max_prompts);
    for (int b : all_bits) {
      const ModelBundle& mdl = model(b);
      acc[std::to_string(b)] = accuracy_suite(mdl, w, facts).to_json();
      std::vector<int> ranks;
      for (std::size_t lo = 0; lo < all_prompts.size(); lo += 512) {
        const std::size_t hi = std::min(all_prompts.size(), lo + 512);
        std::vector<SequenceJob> jobs;
        for (std::size_t i = lo; i < hi; ++i) jobs.push_back({all_prompts[i].tokens, nullptr});
        const auto res = forward_batch(mdl, jobs);
        for (std::size_t i = lo; i < hi; ++i) ranks.push_back(target_rank(softmax(res[i - lo].logits), all_prompts[i].target));
      }
      const auto h = rank_histogram(ranks);
      for (std::size_t k = 0; k < h.size(); ++k) hist << b << ',' << kRankBuckets[k] << ',' << h[k] << '\n';
      if (fail_prompts.empty()) continue;
      const auto trs = target_trajectories(mdl, fail_prompts);
      const std::size_t L = trs[0].layers.size();
      for (std::size_t l = 0; l < L; ++l) {
        double pr = 0, rk = 0, en = 0;
        for (const auto& t : trs) {
          pr += t.layers[l].prob;
          rk += t.layers[l].rank;
          en += t.layers[l].entropy_bits;
        }
        const double n = static_cast<double>(trs.size());
        traj << b << ',' << l << ',' << pr / n << ',' << rk / n << ',' << en / n << '\n';
      }
    }
    emit_json("probes/accuracy.json", json{{"models", acc}, {"templates", w.templates_per_relation()}});
    emit_csv("probes/rank_histogram.csv", hist.str());
    emit_csv("probes/lens_trajectory.csv", traj.str());
  }

  void causal_stage() {
    const auto prompts = cap(render_primary(get_world(), subset("failure")), p.manifest_.analyses.max_prompts);
    json summary{{"n_prompts", prompts.size()}, {"failure_bits", failure_bits()}};
    if (prompts.empty()) {
      warn("causal: Failure subset is empty; grids skipped");
      summary["empty"] = true;
      emit_json("causal/summary.json", summary);
      return;
    }
    CausalOptions opt;
    opt.max_prompts = p.manifest_.analyses.max_prompts;
    opt.window = p.manifest_.analyses.causal_window;
    log("causal: capturing clean traces for " + std::to_string(prompts.size()) + " prompts");
    const CleanStore clean = capture_clean_traces(model(kFp), prompts);
    std::vector<int> grid_bits{kFp};
    for (int b : {4, 2})
      if (has_bits(b)) grid_bits.push_back(b);
    json grids = json::object();
    for (int b : grid_bits) {
      log("causal: grids for " + std::to_string(b) + " bits");
      const PatchGrid aie = cross_model_repair(model(b), clean, prompts, opt);
      const PatchGrid aae = zero_ablation(model(b), prompts, opt);
      emit_csv("causal/aie_" + std::to_string(b) + ".csv", aie.to_csv());
      emit_csv("causal/aae_" + std::to_string(b) + ".csv", aae.to_csv());
      grids["aie_" + std::to_string(b)] = aie.to_json();
      grids["aae_" + std::to_string(b)] = aae.to_json();
    }
    summary["grids"] = grids;
    emit_json("causal/summary.json", summary);
  }

  std::vector<ForwardTrace> traces(const ModelBundle& mdl, const std::vector<Prompt>& prompts) {
    CaptureFlags c;
    c.residual = c.attn_out = c.ffn_out = c.gate_preact = c.h_key = c.attention = true;
    std::vector<ForwardTrace> out;
    for (std::size_t lo = 0; lo < prompts.size(); lo += 256) {
      const std::size_t hi = std::min(prompts.size(), lo + 256);
      std::vector<SequenceJob> jobs;
      for (std::size_t i = lo; i < hi; ++i) jobs.push_back({prompts[i].tokens, nullptr});
      for (auto& r : forward_batch(mdl, jobs, c)) out.push_back(std::move(r.trace));
    }
    return out;
  }

  void diagnostics_stage() {
    const AnalysisConfig& a = p.manifest_.analyses;
    const auto prompts = cap(render_primary(get_world(), subset("failure")), a.max_prompts);
    json out{{"n_prompts", prompts.size()}, {"failure_bits", failure_bits()}, {"position", "last_subject"}};
    if (prompts.empty()) {
      warn("diagnostics: Failure subset is empty; skipped");
      out["empty"] = true;
      emit_json("diagnostics/curves.json", out);
      return;
    }
    std::vector<int> ls, lt;
    for (const auto& pr : prompts) {
      ls.push_back(pr.positions.last_subject);
      lt.push_back(pr.positions.last_token);
    }
    log("diagnostics: FP traces");
    const auto fp = traces(model(kFp), prompts);
    json curves = json::object(), cka = json::object(), sub = json::object();
    auto entropy_curve = [&](const std::vector<ForwardTrace>& tr) {
      std::vector<LayerCurve> v;
      for (const auto& t : tr) v.push_back(attn_entropy_profile(t));
      LayerCurve c = mean_curves(v);
      c.position = "all";
      return c;
    };
    curves[std::to_string(kFp)] = json{{"attn_entropy", entropy_curve(fp).to_json()}};
    for (int b : bits_present()) {
      log("diagnostics: " + std::to_string(b) + " bits");
      const auto q = traces(model(b), prompts);
      std::vector<LayerCurve> jsd_v, sfr_v, jac_v, cos_v, res_v, cos_last_v;
      std::vector<double> excluded;
      for (std::size_t i = 0; i < prompts.size(); ++i) {
        jsd_v.push_back(attn_jsd_profile(fp[i], q[i], ls[i]));
        const auto s = gate_sign_flip_rate(fp[i], q[i], ls[i]);
        sfr_v.push_back(s.curve);
        double ex = 0;
        for (double e : s.excluded_fraction) ex += e;
        excluded.push_back(ex / static_cast<double>(s.excluded_fraction.size()));
        jac_v.push_back(expert_jaccard_profile(fp[i], q[i], ls[i], a.jaccard_fraction));
        cos_v.push_back(value_cosine_profile(fp[i], q[i], ls[i], PatchSite::FfnOut));
        res_v.push_back(value_cosine_profile(fp[i], q[i], ls[i], PatchSite::ResidualOut));
        cos_last_v.push_back(value_cosine_profile(fp[i], q[i], lt[i], PatchSite::ResidualOut));
      }
      double ex_mean = 0;
      for (double e : excluded) ex_mean += e;
      json cj{{"attn_entropy", entropy_curve(q).to_json()},
              {"attn_jsd", mean_curves(jsd_v).to_json()},
              {"gate_sfr", mean_curves(sfr_v).to_json()},
              {"sfr_excluded_fraction", ex_mean / static_cast<double>(excluded.size())},
              {"expert_jaccard", mean_curves(jac_v).to_json()},
              {"value_cosine", mean_curves(cos_v).to_json()},
              {"residual_cosine", mean_curves(res_v).to_json()},
              {"residual_cosine_last_token", mean_curves(cos_last_v).to_json()}};
      curves[std::to_string(b)] = cj;
      if (prompts.size() >= kMinCkaSamples) {
        cka[std::to_string(b)] = cka_heatmap(fp, q, PatchSite::ResidualOut, ls).to_json();
      } else {
        warn("diagnostics: " + std::to_string(prompts.size()) + " prompts are too few for CKA");
      }
      const std::size_t k = std::min(a.subspace_k, prompts.size());
      sub[std::to_string(b)] = json{
          {"similarity", subspace_profile(fp, q, PatchSite::ResidualOut, ls, k, false).to_json()},
          {"error_alignment", subspace_profile(fp, q, PatchSite::ResidualOut, ls, k, true).to_json()}};
    }
    // Captured spectral energy of the FP activations at the chosen k.
    json energy = json::array();
    const std::size_t k = std::min(a.subspace_k, prompts.size());
    for (std::size_t l = 0; l < fp[0].layers.size(); ++l) {
      const Matrix x = activation_matrix(fp, static_cast<int>(l), PatchSite::ResidualOut, ls);
      energy.push_back(subspace_similarity(x, x, std::min(k, x.cols())).energy_a);
    }
    out["curves"] = curves;
    out["cka"] = cka;
    out["subspace"] = sub;
    out["subspace_k"] = k;
    out["fp_energy_at_k"] = energy;
    out["warnings"] = drain_warnings();
    emit_json("diagnostics/curves.json", out);
  }

  void interventions_stage() {
    const Manifest& m = p.manifest_;
    const AnalysisConfig& a = m.analyses;
    const World& w = get_world();
    const ModelBundle& fp = model(kFp);
    const int L = fp.config.n_layers;
    const CalibSet c = calib();
    auto ctx_for = [&](const std::string& name, std::vector<int> facts) {
      SweepContext ctx;
      ctx.fp = &fp;
      ctx.eval = EvalSet{&w, std::move(facts), name};
      ctx.calib = c;
      ctx.spec = m.quant;
      ctx.stamp = stamp(kFp);
      return ctx;
    };
    const auto robust = cap_ids(subset("robust"), a.max_prompts);
    const auto failure = cap_ids(subset("failure"), a.max_prompts);
    const auto everything = spread(get_splits().eval, a.sweep_facts);
    const int fb = failure_bits();
    std::vector<int> ks = a.domino_k;
    if (ks.empty())
      for (int k = -1; k < L; ++k) ks.push_back(k);

    json out = json::object();
    if (has_bits(2)) {
      log("interventions: 2-bit domino on the Robust subset");
      out["domino_2_robust"] = domino_sweep(ctx_for("robust", robust), 2, ks).to_json();
    }
    if (!failure.empty()) {
      log("interventions: " + std::to_string(fb) + "-bit domino on the Failure subset");
      out["domino_failure"] = domino_sweep(ctx_for("failure", failure), fb, ks).to_json();
    }
    for (int b : {4, 2}) {
      log("interventions: single-layer and component sweeps at " + std::to_string(b) + " bits");
      out["single_layer_" + std::to_string(b)] = single_layer_sweep(ctx_for("all", everything), b).to_json();
      const std::vector<ComponentMask> masks{ComponentMask::None, ComponentMask::All,    ComponentMask::Mlp,
                                             ComponentMask::Attn, ComponentMask::GateUp, ComponentMask::Down,
                                             ComponentMask::QK,   ComponentMask::V,      ComponentMask::O};
      out["component_" + std::to_string(b)] = component_sweep(ctx_for("all", everything), b, masks).to_json();
    }

    // Repair of signal degradation on the Failure subset.
    const std::vector<ProtectStrategy> strategies{
        ProtectStrategy::early_layers(a.protect_layers, a.protect_bits)};
    if (!failure.empty()) {
      log("interventions: repair at " + std::to_string(fb) + " bits");
      const EvalSet ev{&w, failure, "failure"};
      json rep{{"bits", fb}, {"subset", "failure"}, {"n_facts", failure.size()}};
      const ModelBundle& plain = model(fb);
      rep["fp"] = eval_accuracy(fp, ev);
      rep["plain"] = eval_accuracy(plain, ev);
      const QuantizedModel prot = source_protect(fp, strategies[0], fb, c, m.quant);
      rep["protect"] = eval_accuracy(prot.model, ev);
      rep["protect_strategy"] = strategies[0].label();
      rep["protect_average_bits"] = prot.report.average_bits;
      json amp = json::array();
      double best = -1, best_alpha = 0;
      for (double alpha : a.alphas) {
        AmplifyConfig cfg;
        cfg.alpha = alpha;
        const double acc = amplified_accuracy(prot.model, ev, cfg);
        const double acc_plain = amplified_accuracy(plain, ev, cfg);
        amp.push_back(json{{"alpha", alpha}, {"protect_amplify", acc}, {"plain_amplify", acc_plain}});
        if (acc > best) {
          best = acc;
          best_alpha = alpha;
        }
      }
      rep["amplify"] = amp;
      rep["best_alpha"] = best_alpha;
      rep["best_protect_amplify"] = best;
      rep["lens_accuracy"] = lens_accuracy_curves(fp, plain, prot.model, failure, best_alpha);
      rep["stamp"] = stamp(fb);
      out["repair"] = rep;
    }

    // High-precision signal injection on the Robust subset.
    if (has_bits(2) && !robust.empty()) {
      for (int hi : {8, 4}) {
        log("interventions: signal injection " + std::to_string(hi) + " -> 2 bits");
        std::vector<int> k_in;
        for (int k : a.injection_k)
          if (k >= 0 && k < L) k_in.push_back(k);
        out["injection_" + std::to_string(hi)] = signal_injection_sweep(ctx_for("robust", robust), hi, 2, k_in).to_json();
      }
    }

    // Same compensation and protection battery at 4 and 2 bits.
    std::vector<ProtectStrategy> battery_strats = strategies;
    for (int b : {4, 2}) {
      log("interventions: compensation battery at " + std::to_string(b) + " bits");
      std::vector<ProtectStrategy> s = battery_strats;
      s.push_back(ProtectStrategy::kurtosis(b + a.kurtosis_extra_bits, a.kurtosis_granularity));
      out["compensation_" + std::to_string(b)] =
          compensation_battery(ctx_for("all", everything), b, a.ranks, s).to_json();
    }
    out["fp_accuracy_all"] = eval_accuracy(fp, EvalSet{&w, everything, "all"});
    out["warnings"] = drain_warnings();
    emit_json("interventions/results.json", out);
  }

  // Logit-lens top-1 accuracy per layer for FP, plain, protected and
  // protected + amplified models on the given facts.
  json lens_accuracy_curves(const ModelBundle& fp, const ModelBundle& plain, const ModelBundle& prot,
                            const std::vector<int>& facts, double alpha) {
    const auto prompts = render_primary(get_world(), facts);
    CaptureFlags cap;
    cap.residual = true;
    auto curve = [&](const ModelBundle& mdl, const std::vector<PatchSpec>* patches) {
      const int L = mdl.config.n_layers;
      std::vector<double> acc(L, 0.0);
      std::vector<SequenceJob> jobs;
      for (std::size_t i = 0; i < prompts.size(); ++i) jobs.push_back({prompts[i].tokens, patches ? &(*patches)[i] : nullptr});
      const auto res = forward_batch(mdl, jobs, cap);
      for (std::size_t i = 0; i < prompts.size(); ++i) {
        const auto t = trajectory_from_trace(res[i].trace, mdl, prompts[i].positions.last_token, prompts[i].target);
        for (int l = 0; l < L; ++l) acc[l] += t.layers[l].rank == 1;
      }
      for (auto& v : acc) v /= std::max<std::size_t>(1, prompts.size());
      return acc;
    };
    AmplifyConfig cfg;
    cfg.alpha = alpha;
    const auto amp = amplified_batch(prot, prompts, cfg);
    std::vector<PatchSpec> patches(prompts.size());
    for (std::size_t i = 0; i < prompts.size(); ++i) {
      PatchDirective d;
      d.site = PatchSite::ResidualOut;
      d.layer = amp[i].layer;
      d.position = prompts[i].positions.last_token;
      d.action = PatchAction::Scale;
      d.alpha = alpha;
      patches[i].directives.push_back(d);
    }
    return json{{"fp", curve(fp, nullptr)},
                {"plain", curve(plain, nullptr)},
                {"protect", curve(prot, nullptr)},
                {"protect_amplify", curve(prot, &patches)},
                {"alpha", alpha}};
  }

  json timing = json::object();

  // ------------------------------------------------------------ records

  std::string input_digest(const std::string& stage) {
    std::string s = manifest_digest + "|" + stage;
    for (int d : stage_deps(stage)) s += "|" + read_record(kStages[d]).value("output_digest", "");
    return sha256_hex(s);
  }

  json read_record(const std::string& stage) {
    const fs::path f = root() / "stages" / (stage + ".json");
    if (!fs::exists(f)) return json::object();
    try {
      return read_json(f);
    } catch (const Error&) {
      return json::object();
    }
  }

  bool record_valid(const std::string& stage, const std::string& in) {
    const json r = read_record(stage);
    if (r.value("input_digest", "") != in || !r.contains("files")) return false;
    for (auto it = r["files"].begin(); it != r["files"].end(); ++it) {
      const fs::path f = root() / it.key();
      if (!fs::exists(f) || file_sha256(f) != it.value().get<std::string>()) return false;
    }
    return true;
  }

  void run(const std::string& stage) {
    if (stage == "gen-corpus") gen_corpus();
    else if (stage == "train") train_stage();
    else if (stage == "quantize") quantize_stage();
    else if (stage == "partition-subsets") partition_stage();
    else if (stage == "probes") probes_stage();
    else if (stage == "causal") causal_stage();
    else if (stage == "diagnostics") diagnostics_stage();
    else if (stage == "interventions") interventions_stage();
    else fail(ErrorKind::InvalidInput, "unknown stage " + stage);
  }
};

Pipeline::Pipeline(Manifest manifest, std::string out_dir, PipelineOptions options)
    : manifest_(std::move(manifest)), out_(std::move(out_dir)), options_(options), impl_(new Impl(*this)) {
  impl_->manifest_digest = manifest_.digest();
  fs::create_directories(out_);
  impl_->lock_path = (fs::path(out_) / ".quantlens.lock").string();
  impl_->lock_fd = ::open(impl_->lock_path.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
  if (impl_->lock_fd < 0) {
    delete impl_;
    fail(ErrorKind::Io, "output directory " + out_ + " is locked by another process (" + (fs::path(out_) / ".quantlens.lock").string() + ")");
  }
  const std::string pid = std::to_string(::getpid()) + "\n";
  if (::write(impl_->lock_fd, pid.data(), pid.size()) < 0) warn("could not write lock file");
  if (options_.threads > 0) ::setenv("QUANTLENS_THREADS", std::to_string(options_.threads).c_str(), 1);
  json m = manifest_.to_json();
  m["manifest_digest"] = impl_->manifest_digest;
  write_file(fs::path(out_) / "manifest.json", m.dump(1) + "\n");
}

Pipeline::~Pipeline() {
  if (impl_) {
    ::close(impl_->lock_fd);
    std::error_code ec;
    fs::remove(impl_->lock_path, ec);
    delete impl_;
  }
}

StageOutcome Pipeline::run_stage(const std::string& name) {
  Impl& I = *impl_;
  StageOutcome o;
  o.name = name;
  for (int d : stage_deps(name)) {
    const std::string dep = kStages[d];
    if (!I.record_valid(dep, I.input_digest(dep)))
      throw StageError(name, Error(ErrorKind::NotFound, "upstream stage " + dep + " has no valid output; run it first"));
  }
  const std::string in = I.input_digest(name);
  const auto t0 = std::chrono::steady_clock::now();
  if (!options_.force && I.record_valid(name, in)) {
    o.skipped = true;
    o.output_digest = I.read_record(name).value("output_digest", "");
    I.log("stage " + name + ": up to date, skipped");
    return o;
  }
  I.log("stage " + name + ": running");
  I.files.clear();
  drain_warnings();
  try {
    I.run(name);
  } catch (const StageError&) {
    throw;
  } catch (const Error& e) {
    throw StageError(name, e);
  } catch (const std::exception& e) {
    throw StageError(name, Error(ErrorKind::Io, e.what()));
  }
  json files = json::object();
  std::string cat = in;
  std::sort(I.files.begin(), I.files.end());
  for (const auto& f : I.files) {
    const std::string h = file_sha256(fs::path(out_) / f);
    files[f] = h;
    cat += "|" + f + ":" + h;
  }
  o.output_digest = sha256_hex(cat);
  if (manifest_.expected_digests.contains(name) && manifest_.expected_digests[name].get<std::string>() != o.output_digest)
    throw StageError(name, Error(ErrorKind::InvalidInput, "output digest " + o.output_digest + " differs from the pinned digest"));
  write_file(fs::path(out_) / "stages" / (name + ".json"),
             json{{"stage", name}, {"input_digest", in}, {"output_digest", o.output_digest}, {"files", files},
                  {"manifest_digest", I.manifest_digest}}
                     .dump(1) + "\n");
  o.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return o;
}

std::vector<StageOutcome> Pipeline::run_all() {
  std::vector<StageOutcome> out;
  json log = json::object();
  const auto t0 = std::chrono::steady_clock::now();
  for (const char* s : kStages) {
    out.push_back(run_stage(s));
    log[s] = json{{"skipped", out.back().skipped}, {"seconds", out.back().seconds}};
  }
  const ReportIndex idx = build_report(out_);
  json stages = json::object();
  for (const auto& o : out) stages[o.name] = o.output_digest;
  json summary{{"manifest_digest", impl_->manifest_digest}, {"stages", stages}, {"report_digest", idx.digest},
               {"report_files", idx.files}, {"absent", idx.absent}};
  write_file(fs::path(out_) / "summary.json", summary.dump(1) + "\n");
  log["total_seconds"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  log["timing"] = impl_->timing;
  // Timings vary between runs and are kept out of every digested file.
  json prev = json::array();
  const fs::path run_log = fs::path(out_) / "run_log.json";
  if (fs::exists(run_log)) {
    try {
      prev = read_json(run_log);
    } catch (const Error&) {
    }
    if (!prev.is_array()) prev = json::array();
  }
  prev.push_back(log);
  write_file(run_log, prev.dump(1) + "\n");
  return out;
}

}  // namespace qlens
