#include <cstdlib>
#include <fstream>
#include <sstream>

#include "helpers.hpp"
#include "quantlens/archive.hpp"
#include "quantlens/pipeline.hpp"
#include "quantlens/util.hpp"

using namespace qlens;
using nlohmann::json;
using qtest::kind_of;

namespace {

json tiny_manifest() {
  return json::parse(R"({
    "seed": 3,
    "corpus": {"seed": 7, "n_subjects": 64, "n_relations": 2, "targets_per_relation": 16},
    "model": {"n_layers": 2, "d_model": 32, "n_heads": 2, "head_dim": 16, "d_ff": 64},
    "train": {"steps": 150, "lr": 0.005, "batch": 32, "warmup_steps": 10},
    "quant": {"calib_sequences": 16},
    "analyses": {"max_prompts": 64, "min_failure_facts": 5, "ranks": [2, 8], "sweep_facts": 64,
                 "injection_k": [0], "subspace_k": 8}
  })");
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(QUANTLENS_BIN) + " " + args + " > /dev/null 2>&1";
  const int rc = std::system(cmd.c_str());
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

// One tiny pipeline run shared by the tests below.
const std::filesystem::path& tiny_run() {
  static const std::filesystem::path dir = [] {
    auto d = qtest::temp_dir("cli_run_a");
    PipelineOptions o;
    o.quiet = true;
    Pipeline(Manifest::from_json(tiny_manifest()), d.string(), o).run_all();
    return d;
  }();
  return dir;
}

}  // namespace

TEST_CASE("manifest validation") {
  const Manifest m = Manifest::from_json(tiny_manifest());
  CHECK(Manifest::from_json(m.to_json()).digest() == m.digest());
  CHECK(m.model.n_layers == 2);
  CHECK(m.calib_sequences == 16);

  json no_seed = tiny_manifest();
  no_seed.erase("seed");
  CHECK(kind_of([&] { Manifest::from_json(no_seed); }) == ErrorKind::InvalidConfig);
  json no_corpus_seed = tiny_manifest();
  no_corpus_seed["corpus"].erase("seed");
  CHECK(kind_of([&] { Manifest::from_json(no_corpus_seed); }) == ErrorKind::InvalidConfig);
  json unknown = tiny_manifest();
  unknown["colour"] = "blue";
  CHECK(kind_of([&] { Manifest::from_json(unknown); }) == ErrorKind::InvalidConfig);
  json bad_bits = tiny_manifest();
  bad_bits["quant"]["bits"] = {4, 5};
  CHECK(kind_of([&] { Manifest::from_json(bad_bits); }) == ErrorKind::InvalidConfig);
  json bad_model = tiny_manifest();
  bad_model["model"]["head_dim"] = 7;
  CHECK(kind_of([&] { Manifest::from_json(bad_model); }) == ErrorKind::InvalidConfig);

  // Defaults round-trip and pin the documented world.
  const Manifest d = Manifest::from_json(Manifest{}.to_json());
  CHECK(d.corpus.n_subjects == 512);
  CHECK(d.model.n_layers == 8);
  CHECK(d.model.d_model == 128);
}

TEST_CASE("pipeline is idempotent and deterministic") {
  const auto& a = tiny_run();
  const json summary = json::parse(slurp(a / "summary.json"));
  CHECK(summary["stages"].size() == kStages.size());

  PipelineOptions o;
  o.quiet = true;
  Pipeline again(Manifest::from_json(tiny_manifest()), a.string(), o);
  for (const auto& s : again.run_all()) CHECK(s.skipped);
  CHECK(json::parse(slurp(a / "summary.json"))["report_digest"] == summary["report_digest"]);

  const auto b = qtest::temp_dir("cli_run_b");
  Pipeline(Manifest::from_json(tiny_manifest()), b.string(), o).run_all();
  CHECK(json::parse(slurp(b / "summary.json"))["report_digest"] == summary["report_digest"]);
  for (const char* f : kPlotFiles)
    if (std::filesystem::exists(a / "report" / f)) CHECK(slurp(a / "report" / f) == slurp(b / "report" / f));

  // A changed seed changes the trained model and the report.
  json other = tiny_manifest();
  other["seed"] = 4;
  const auto c = qtest::temp_dir("cli_run_c");
  Pipeline(Manifest::from_json(other), c.string(), o).run_all();
  CHECK(json::parse(slurp(c / "summary.json"))["report_digest"] != summary["report_digest"]);
}

TEST_CASE("editing an output invalidates only that stage") {
  const auto d = qtest::temp_dir("cli_edit");
  PipelineOptions o;
  o.quiet = true;
  const Manifest m = Manifest::from_json(tiny_manifest());
  {
    Pipeline p(m, d.string(), o);
    for (const char* s : {"gen-corpus", "train"}) p.run_stage(s);
  }
  std::ofstream(d / "model/train.json", std::ios::app) << " ";
  Pipeline p(m, d.string(), o);
  CHECK(p.run_stage("gen-corpus").skipped);
  CHECK(!p.run_stage("train").skipped);
}

TEST_CASE("report files carry golden headers and the manifest digest") {
  const auto& a = tiny_run();
  const std::string digest = json::parse(slurp(a / "manifest.json"))["manifest_digest"];
  const auto& headers = plot_headers();
  REQUIRE(headers.size() == kPlotFiles.size());
  const std::vector<std::string> golden{
      "bits,acc_any,acc_majority,acc_all,n_facts", "bits,bucket,count",
      "bits,layer,prob,rank,entropy_bits",        "bits,layer,group,effect,stderr,n",
      "bits,layer,group,effect,stderr,n",         "metric,bits,layer,mean,std,n",
      "metric,bits,layer,mean,std,n",             "bits,fp_layer,q_layer,cka",
      "metric,bits,layer,value,k",                "sweep,bits,subset,k,accuracy",
      "variant,layer,accuracy",                   "bits_hi,k,layer,mean,std,n"};
  CHECK(headers == golden);
  const json index = json::parse(slurp(a / "report/index.json"));
  for (std::size_t i = 0; i < kPlotFiles.size(); ++i) {
    const auto path = a / "report" / kPlotFiles[i];
    if (!std::filesystem::exists(path)) {
      const auto absent = index["absent"].get<std::vector<std::string>>();
      CHECK(std::find(absent.begin(), absent.end(), kPlotFiles[i]) != absent.end());
      continue;
    }
    const std::string text = slurp(path);
    CHECK(text.rfind(golden[i] + "\n", 0) == 0);
    CHECK(text.find("# manifest_sha256=" + digest + "\n") != std::string::npos);
  }
}

TEST_CASE("report on a directory without results") {
  const auto d = qtest::temp_dir("cli_empty");
  const ReportIndex idx = build_report(d.string());
  CHECK(idx.files.empty());
  CHECK(!idx.warnings.empty());
}

TEST_CASE("missing upstream stage is a stage error") {
  const auto d = qtest::temp_dir("cli_upstream");
  PipelineOptions o;
  o.quiet = true;
  Pipeline p(Manifest::from_json(tiny_manifest()), d.string(), o);
  try {
    p.run_stage("quantize");
    FAIL("expected StageError");
  } catch (const StageError& e) {
    CHECK(e.stage() == "quantize");
  }
  CHECK(kind_of([&] { p.run_stage("bogus"); }) == ErrorKind::InvalidInput);
}

TEST_CASE("concurrent runs on one directory are refused") {
  const auto d = qtest::temp_dir("cli_lock");
  std::ofstream(d / ".quantlens.lock") << "held";
  PipelineOptions o;
  o.quiet = true;
  CHECK(kind_of([&] { Pipeline(Manifest::from_json(tiny_manifest()), d.string(), o); }) == ErrorKind::Io);
}

TEST_CASE("cli exit codes") {
  const auto d = qtest::temp_dir("cli_codes");
  json no_seed = tiny_manifest();
  no_seed.erase("seed");
  std::ofstream(d / "bad.json") << no_seed.dump();
  std::ofstream(d / "good.json") << tiny_manifest().dump();
  CHECK(run_cli("gen-corpus --manifest " + (d / "bad.json").string() + " --out " + (d / "o1").string()) == 2);
  CHECK(run_cli("train --manifest " + (d / "good.json").string() + " --out " + (d / "o2").string()) == 3);
  CHECK(run_cli("no-such-verb") == 2);
  CHECK(run_cli("gen-corpus --manifest " + (d / "good.json").string() + " --out " + (d / "o3").string()) == 0);
  CHECK(run_cli("report --out " + (d / "o4").string()) == 0);
}

TEST_CASE("trace archives") {
  const auto& a = tiny_run();
  const auto d = qtest::temp_dir("cli_archive");
  const std::string f = (d / "fp.qltr").string();
  REQUIRE(run_cli("export-traces --out " + a.string() + " --bits 16 --subset all --file " + f) == 0);
  const TraceStore s = import_traces(f);
  CHECK(!s.keys.empty());
  CHECK(s.keys.size() == s.traces.size());
  CHECK(s.traces[0].captured.residual);
  CHECK(s.traces[0].layers.size() == 2);

  // Round trip through export/import is bit-exact.
  const std::string f2 = (d / "again.qltr").string();
  CaptureFlags cap;
  cap.residual = cap.attn_out = cap.ffn_out = cap.gate_preact = cap.h_key = cap.attention = true;
  export_traces(f2, s, cap);
  const TraceStore s2 = import_traces(f2);
  CHECK(s2.keys == s.keys);
  CHECK(s2.traces[3].layers[1].residual_out == s.traces[3].layers[1].residual_out);
  CHECK(s2.traces[3].layers[0].attention[1] == s.traces[3].layers[0].attention[1]);
  CHECK(slurp(f) == slurp(f2));

  check_aligned(s, s2);
  TraceStore shifted = s2;
  shifted.keys[0].second += 1;
  CHECK(kind_of([&] { check_aligned(s, shifted); }) == ErrorKind::AlignmentError);

  const std::string bytes = slurp(f);
  std::ofstream(f2, std::ios::binary | std::ios::trunc) << bytes.substr(0, bytes.size() / 2);
  CHECK(kind_of([&] { import_traces(f2); }) == ErrorKind::CorruptArchive);
  std::string flipped = bytes;
  flipped[100] ^= 0x11;
  std::ofstream(f2, std::ios::binary | std::ios::trunc) << flipped;
  CHECK(kind_of([&] { import_traces(f2); }) == ErrorKind::CorruptArchive);
}
