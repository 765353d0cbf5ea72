#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "quantlens/archive.hpp"
#include "quantlens/interventions.hpp"
#include "quantlens/pipeline.hpp"
#include "quantlens/util.hpp"

using namespace qlens;
using nlohmann::json;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitValidation = 2;
constexpr int kExitStage = 3;

struct Common {
  std::string manifest;
  std::string out;
  std::int64_t seed = -1;
  int threads = 0;
  bool force = false;
  bool quiet = false;
  std::vector<int> bits;
  std::string subset = "all";
  std::vector<double> alpha;
  std::vector<int> k;
  std::string file;
};

Manifest load_manifest(const Common& c) {
  Manifest m = c.manifest.empty() ? Manifest::from_json(Manifest{}.to_json()) : Manifest::load(c.manifest);
  if (c.seed >= 0) m.seed = static_cast<std::uint64_t>(c.seed);
  if (c.seed >= 0) m.train.seed = m.seed;
  if (!c.bits.empty()) m.bits = c.bits;
  if (!c.alpha.empty()) m.analyses.alphas = c.alpha;
  if (!c.k.empty()) m.analyses.domino_k = c.k;
  return Manifest::from_json(m.to_json());
}

PipelineOptions options(const Common& c) { return {c.threads, c.force, c.quiet}; }

std::vector<int> subset_facts(const std::string& out, const std::string& subset) {
  namespace fs = std::filesystem;
  if (subset == "all") {
    std::ifstream in(fs::path(out) / "corpus/splits.json");
    if (!in) fail(ErrorKind::NotFound, "corpus/splits.json missing; run gen-corpus first");
    return json::parse(in).at("eval").get<std::vector<int>>();
  }
  if (subset != "robust" && subset != "failure") fail(ErrorKind::InvalidConfig, "--subset must be robust, failure or all");
  std::ifstream in(fs::path(out) / "subsets.json");
  if (!in) fail(ErrorKind::NotFound, "subsets.json missing; run partition-subsets first");
  return json::parse(in).at(subset).get<std::vector<int>>();
}

ModelBundle load_model(const std::string& out, int bits) {
  const std::string f = bits == 16 ? "model/fp.qlck" : "model/q" + std::to_string(bits) + ".qlck";
  return load_checkpoint((std::filesystem::path(out) / f).string());
}

int run_eval(const Common& c) {
  const World w = load_world((std::filesystem::path(c.out) / "corpus/world.json").string());
  const auto facts = subset_facts(c.out, c.subset);
  std::vector<int> bits = c.bits.empty() ? std::vector<int>{16} : c.bits;
  json out = json::object();
  for (int b : bits) {
    const ModelBundle m = load_model(c.out, b);
    const AccuracyReport all = accuracy_suite(m, w, facts);
    const double primary = eval_accuracy(m, EvalSet{&w, facts, c.subset});
    out[std::to_string(b)] = json{{"subset", c.subset}, {"primary", primary}, {"templates", all.to_json()}};
  }
  std::cout << out.dump(2) << std::endl;
  return kExitOk;
}

int run_export(const Common& c) {
  if (c.file.empty()) fail(ErrorKind::InvalidConfig, "--file is required");
  const World w = load_world((std::filesystem::path(c.out) / "corpus/world.json").string());
  const auto facts = subset_facts(c.out, c.subset);
  const int bits = c.bits.empty() ? 16 : c.bits.front();
  const ModelBundle m = load_model(c.out, bits);
  const auto prompts = render_primary(w, facts);
  CaptureFlags cap;
  cap.residual = cap.attn_out = cap.ffn_out = cap.gate_preact = cap.h_key = cap.attention = true;
  TraceStore store;
  store.meta = json{{"bits", bits}, {"model_digest", m.digest()}, {"subset", c.subset}};
  std::vector<SequenceJob> jobs;
  for (const auto& p : prompts) {
    jobs.push_back({p.tokens, nullptr});
    store.keys.push_back(key_of(p));
  }
  for (auto& r : forward_batch(m, jobs, cap)) store.traces.push_back(std::move(r.trace));
  export_traces(c.file, store, cap);
  std::cout << "wrote " << store.traces.size() << " traces to " << c.file << std::endl;
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"quantlens: quantization damage analysis on a toy decoder"};
  app.require_subcommand(1);
  Common c;

  auto add_common = [&](CLI::App* s, bool need_out) {
    s->add_option("--manifest", c.manifest, "experiment manifest (JSON)");
    auto* o = s->add_option("--out", c.out, "output / results directory");
    if (need_out) o->required();
    s->add_option("--seed", c.seed, "override the manifest seed");
    s->add_option("--threads", c.threads, "worker threads (falls back to QUANTLENS_THREADS)");
    s->add_flag("--force", c.force, "rerun stages even when up to date");
    s->add_flag("--quiet", c.quiet, "suppress progress output");
  };

  std::map<std::string, std::string> stage_of{{"gen-corpus", "gen-corpus"}, {"train", "train"},
                                              {"quantize", "quantize"},     {"partition-subsets", "partition-subsets"},
                                              {"probe", "probes"},          {"causal", "causal"},
                                              {"diag", "diagnostics"},      {"intervene", "interventions"}};
  std::map<std::string, CLI::App*> subs;
  for (const auto& [verb, stage] : stage_of) {
    auto* s = app.add_subcommand(verb, "run the " + stage + " stage");
    add_common(s, true);
    if (verb == "quantize") s->add_option("--bits", c.bits, "bit widths");
    if (verb == "intervene") {
      s->add_option("--alpha", c.alpha, "amplification factors");
      s->add_option("--k", c.k, "domino prefix lengths");
    }
    subs[verb] = s;
  }
  auto* pipeline = app.add_subcommand("pipeline", "run every stage and the report");
  add_common(pipeline, true);
  pipeline->add_option("--bits", c.bits, "bit widths");
  pipeline->add_option("--alpha", c.alpha, "amplification factors");
  pipeline->add_option("--k", c.k, "domino prefix lengths");

  auto* report = app.add_subcommand("report", "consolidate a results directory into plot-data files");
  report->add_option("--out", c.out, "results directory")->required();

  auto* eval = app.add_subcommand("eval", "accuracy of stored models on a subset");
  eval->add_option("--out", c.out, "results directory")->required();
  eval->add_option("--bits", c.bits, "bit widths (16 = FP)");
  eval->add_option("--subset", c.subset, "robust | failure | all");

  auto* exp = app.add_subcommand("export-traces", "write a QLTR1 trace archive for a subset");
  exp->add_option("--out", c.out, "results directory")->required();
  exp->add_option("--bits", c.bits, "model bit width (16 = FP)");
  exp->add_option("--subset", c.subset, "robust | failure | all");
  exp->add_option("--file", c.file, "archive path")->required();

  auto* init = app.add_subcommand("init-manifest", "write the default manifest");
  init->add_option("--out", c.file, "manifest path")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitValidation;
  }

  try {
    if (init->parsed()) {
      std::ofstream(c.file) << Manifest{}.to_json().dump(2) << "\n";
      return kExitOk;
    }
    if (report->parsed()) {
      const ReportIndex idx = build_report(c.out);
      std::cout << json{{"files", idx.files}, {"absent", idx.absent}, {"report_digest", idx.digest}}.dump(2) << std::endl;
      return kExitOk;
    }
    if (eval->parsed()) return run_eval(c);
    if (exp->parsed()) return run_export(c);

    const Manifest m = load_manifest(c);
    if (pipeline->parsed()) {
      Pipeline p(m, c.out, options(c));
      p.run_all();
      std::cout << std::ifstream(std::filesystem::path(c.out) / "summary.json").rdbuf() << std::endl;
      return kExitOk;
    }
    for (const auto& [verb, s] : subs) {
      if (!s->parsed()) continue;
      Pipeline p(m, c.out, options(c));
      const StageOutcome o = p.run_stage(stage_of[verb]);
      std::cout << json{{"stage", o.name}, {"skipped", o.skipped}, {"output_digest", o.output_digest}}.dump() << std::endl;
      return kExitOk;
    }
  } catch (const StageError& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return kExitStage;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << std::endl;
    const bool validation = e.kind() == ErrorKind::InvalidConfig || e.kind() == ErrorKind::InvalidInput;
    return validation ? kExitValidation : kExitStage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return kExitStage;
  }
  return kExitOk;
}
