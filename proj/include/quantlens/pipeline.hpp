#pragma once
// Experiment manifests, the staged pipeline and report generation.

#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"
#include "quantlens/corpus.hpp"
#include "quantlens/model.hpp"
#include "quantlens/quant.hpp"

namespace qlens {

struct AnalysisConfig {
  std::size_t max_prompts = 256;
  std::size_t min_failure_facts = 20;  // below this the Failure subset is rebuilt at 3 bits
  int causal_window = 1;
  std::size_t subspace_k = 50;
  double jaccard_fraction = 0.01;
  std::vector<int> domino_k;     // empty = -1 .. n_layers-1
  std::vector<int> injection_k{0, 1, 2, 3};
  std::vector<double> alphas{2, 3, 5, 7, 9};
  std::vector<int> ranks{4, 16, 64};
  int protect_layers = 2;
  int protect_bits = 8;
  double kurtosis_extra_bits = 0.25;  // kurtosis protection targets base + this
  KurtosisGranularity kurtosis_granularity = KurtosisGranularity::Row;
  std::size_t sweep_facts = 1024;     // cap for sweeps over the full fact set

  nlohmann::json to_json() const;
  static AnalysisConfig from_json(const nlohmann::json& j);
};

struct Manifest {
  std::uint64_t seed = 1;
  WorldConfig corpus;
  double train_fraction = 1.0;
  ModelConfig model;  // vocab_size is taken from the generated world
  TrainHyperparams train;
  std::vector<int> bits{8, 4, 3, 2};
  QuantSpec quant;
  std::size_t calib_sequences = 128;
  AnalysisConfig analyses;
  nlohmann::json expected_digests = nlohmann::json::object();  // optional pins, checked after each stage

  // Canonical form; every field explicit.
  nlohmann::json to_json() const;
  // Throws InvalidConfig for missing seeds, unknown keys or bad values.
  static Manifest from_json(const nlohmann::json& j);
  static Manifest load(const std::string& path);
  std::string digest() const;
};

inline constexpr std::array<const char*, 8> kStages{"gen-corpus", "train",  "quantize",    "partition-subsets",
                                                   "probes",     "causal", "diagnostics", "interventions"};

struct StageOutcome {
  std::string name;
  bool skipped = false;
  std::string output_digest;
  double seconds = 0.0;
};

struct PipelineOptions {
  int threads = 0;
  bool force = false;  // rerun even when a valid stage record exists
  bool quiet = false;
};

class Pipeline {
 public:
  Pipeline(Manifest manifest, std::string out_dir, PipelineOptions options = {});
  ~Pipeline();
  Pipeline(const Pipeline&) = delete;
  Pipeline& operator=(const Pipeline&) = delete;

  // One stage; upstream stages must already be complete.
  StageOutcome run_stage(const std::string& name);
  // Every stage in order, then the report; writes summary.json.
  std::vector<StageOutcome> run_all();

  const Manifest& manifest() const { return manifest_; }
  const std::string& out_dir() const { return out_; }

 private:
  struct Impl;
  Manifest manifest_;
  std::string out_;
  PipelineOptions options_;
  Impl* impl_;
};

// Stage failure carrying the stage name.
class StageError : public Error {
 public:
  StageError(std::string stage, const Error& cause)
      : Error(cause.kind(), "stage " + stage + ": " + strip_kind(cause)), stage_(std::move(stage)) {}
  const std::string& stage() const { return stage_; }

 private:
  static std::string strip_kind(const Error& e) {
    const std::string w = e.what();
    const std::string prefix = std::string(to_string(e.kind())) + ": ";
    return w.rfind(prefix, 0) == 0 ? w.substr(prefix.size()) : w;
  }
  std::string stage_;
};

struct ReportIndex {
  std::vector<std::string> files;   // relative to <results>/report
  std::vector<std::string> absent;  // analyses not found
  std::vector<std::string> warnings;
  std::string digest;               // over all report files
};

inline constexpr std::array<const char*, 12> kPlotFiles{
    "fig01_accuracy_cliff.csv", "fig02_rank_histogram.csv", "fig03_lens_trajectory.csv", "fig04_aie_repair.csv",
    "fig05_aae_ablation.csv",   "fig06_attention.csv",      "fig07_ffn_memory.csv",      "fig08_cka.csv",
    "fig09_subspace.csv",       "fig10_domino.csv",         "fig11_repair_lens.csv",     "fig12_injection.csv"};

// Header line of every plot-data file, in kPlotFiles order.
const std::vector<std::string>& plot_headers();

// Consolidates a results directory into <results>/report.
ReportIndex build_report(const std::string& results_dir);

}  // namespace qlens
