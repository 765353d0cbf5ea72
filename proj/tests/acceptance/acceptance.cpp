// End-to-end acceptance run: executes the default manifest twice and prints
// one PASS/FAIL line per criterion.

#include <algorithm>
#include <cmath>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "quantlens/causal.hpp"
#include "quantlens/diagnostics.hpp"
#include "quantlens/interventions.hpp"
#include "quantlens/model.hpp"
#include "quantlens/numkit.hpp"
#include "quantlens/pipeline.hpp"
#include "quantlens/quant.hpp"

using namespace qlens;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

// Pinned tolerances.
constexpr double kA1MinAccuracy = 0.95;
constexpr double kA1MaxCpuSeconds = 600.0;
constexpr double kA2RetainFraction = 0.95;
constexpr double kA2StepTolerance = 0.02;
constexpr double kA2CollapseFraction = 0.10;
constexpr double kA2ChanceMargin = 0.05;
constexpr double kA3Tol = 1e-6;
constexpr double kA3GradTol = 1e-3;
constexpr double kA4GptqWinFraction = 0.90;
constexpr double kA4MonotoneSlack = 1e-9;
constexpr double kA5SelfPatchTol = 1e-6;
constexpr double kA5MinGap = 0.05;
constexpr double kA6Margin = 0.02;
constexpr double kA6WideMargin = 0.10;
constexpr double kA7StepTolerance = 0.0;
constexpr double kA7DropFraction = 0.50;
constexpr double kA8MinLift = 0.10;
constexpr double kA9CollapseFraction = 0.25;
constexpr double kA9RecoverFraction = 0.80;
constexpr double kA10MaxCpuSeconds = 1800.0;

struct Line {
  std::string id;
  bool pass = false;
  std::string detail;
};

std::vector<Line> g_lines;

void report(const std::string& id, bool pass, const std::string& detail) {
  g_lines.push_back({id, pass, detail});
  std::cout << id << (pass ? " PASS: " : " FAIL: ") << detail << std::endl;
}

std::string fmt(double v, int prec = 4) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(prec) << v;
  return s.str();
}

json read_json(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw std::runtime_error("missing " + p.string());
  return json::parse(in);
}

double cpu_seconds() { return static_cast<double>(std::clock()) / CLOCKS_PER_SEC; }

struct RunResult {
  std::string digest;
  double cpu_total = 0.0;
  double cpu_train = 0.0;
};

RunResult run_pipeline(const Manifest& m, const fs::path& dir) {
  RunResult r;
  Pipeline p(m, dir.string(), PipelineOptions{0, false, false});
  const double t0 = cpu_seconds();
  for (const char* s : kStages) {
    const double ts = cpu_seconds();
    p.run_stage(s);
    if (std::string(s) == "train") r.cpu_train = cpu_seconds() - ts;
  }
  r.digest = build_report(dir.string()).digest;
  r.cpu_total = cpu_seconds() - t0;
  return r;
}

double mean_of(const json& curve) {
  const auto v = curve.at("mean").get<std::vector<double>>();
  double s = 0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

Matrix random_matrix(std::size_t r, std::size_t c, std::uint64_t seed) {
  std::mt19937_64 g(seed);
  std::normal_distribution<double> n(0.0, 1.0);
  Matrix m(r, c);
  for (auto& v : m.values()) v = n(g);
  return m;
}

Matrix subtract(const Matrix& a, const Matrix& b) {
  Matrix d = a;
  for (std::size_t i = 0; i < d.values().size(); ++i) d.values()[i] -= b.values()[i];
  return d;
}

Matrix add(const Matrix& a, const Matrix& b) {
  Matrix d = a;
  for (std::size_t i = 0; i < d.values().size(); ++i) d.values()[i] += b.values()[i];
  return d;
}

void check_a1(const json& train, const json& acc, const RunResult& run) {
  const double fp = acc.at("models").at("16").at("acc_any").get<double>();
  const bool ok = fp >= kA1MinAccuracy && run.cpu_train <= kA1MaxCpuSeconds;
  report("A1", ok,
         "FP acc_any " + fmt(fp) + " (>= " + fmt(kA1MinAccuracy, 2) + "), train CPU " + fmt(run.cpu_train, 1) +
             " s (<= " + fmt(kA1MaxCpuSeconds, 0) + "), final loss " + fmt(train.at("final_loss").get<double>()));
}

void check_a2(const json& acc, const Manifest& m) {
  auto a = [&](const char* b) { return acc.at("models").at(b).at("acc_any").get<double>(); };
  const double fp = a("16"), a8 = a("8"), a4 = a("4"), a3 = a("3"), a2 = a("2");
  const double chance = 1.0 / static_cast<double>(m.corpus.targets_per_relation);
  const bool retain = a8 >= kA2RetainFraction * fp;
  const bool mono = a8 + kA2StepTolerance >= a4 && a4 + kA2StepTolerance >= a3 && a3 + kA2StepTolerance >= a2;
  const double ceiling = std::max(kA2CollapseFraction * fp, chance + kA2ChanceMargin);
  const bool collapse = a2 <= ceiling;
  report("A2", retain && mono && collapse,
         "FP " + fmt(fp) + " 8b " + fmt(a8) + " 4b " + fmt(a4) + " 3b " + fmt(a3) + " 2b " + fmt(a2) +
             "; retain " + (retain ? "ok" : "no") + ", monotone " + (mono ? "ok" : "no") + ", 2b <= " +
             fmt(ceiling) + " " + (collapse ? "ok" : "no"));
}

void check_a3() {
  std::vector<std::string> bad;
  auto expect = [&](const std::string& name, double got, double want, double tol = kA3Tol) {
    if (!(std::abs(got - want) <= tol)) bad.push_back(name + "=" + fmt(got, 8));
  };
  const std::vector<double> u4(4, 0.25), half{0.5, 0.5, 0, 0}, other{0, 0, 0.5, 0.5};
  expect("entropy_uniform4", shannon_entropy(u4), 2.0);
  expect("entropy_onehot", shannon_entropy(std::vector<double>{1, 0, 0}), 0.0);
  expect("jsd_disjoint", jsd(half, other), 1.0);
  expect("jsd_self", jsd(half, half), 0.0);
  expect("cosine_45deg", cosine_similarity(std::vector<double>{1, 0}, std::vector<double>{1, 1}), std::sqrt(0.5));
  expect("cosine_self", cosine_similarity(std::vector<double>{3, -1, 2}, std::vector<double>{3, -1, 2}), 1.0);
  {
    std::vector<double> a(500, 0.0), b(500, 0.0);
    for (int i = 0; i < 5; ++i) a[i] = 10.0 - i;
    for (int i = 0; i < 5; ++i) b[i + 3] = 10.0 - i;
    // Top-5 sets {0..4} and {3..7} share two indices out of eight.
    expect("jaccard_overlap", jaccard_top_fraction(a, b, 0.01), 2.0 / 8.0);
  }
  const Matrix x = random_matrix(64, 12, 1);
  expect("cka_self", linear_cka(x, x), 1.0);
  const Matrix q = svd(random_matrix(12, 12, 2)).u;
  expect("cka_rotation", linear_cka(x, matmul(x, q)), 1.0);
  expect("subspace_self", subspace_similarity(x, x, 4).value, 1.0);
  {
    Matrix y = random_matrix(64, 12, 6);
    for (std::size_t i = 0; i < y.values().size(); ++i) y.values()[i] = x.values()[i] + 0.5 * y.values()[i];
    expect("subspace_shared_rotation", subspace_similarity(matmul(x, q), matmul(y, q), 4).value,
           subspace_similarity(x, y, 4).value);
    expect("subspace_symmetry", subspace_similarity(y, x, 4).value, subspace_similarity(x, y, 4).value);
  }
  {
    Matrix a(8, 4), b(8, 4);
    for (std::size_t i = 0; i < 8; ++i) {
      a(i, 0) = static_cast<double>(i) - 3.5;
      a(i, 1) = (i % 2) ? 1.0 : -1.0;
      b(i, 2) = static_cast<double>(i) - 3.5;
      b(i, 3) = (i % 2) ? 1.0 : -1.0;
    }
    expect("subspace_disjoint", subspace_similarity(a, b, 2).value, 0.0);
  }
  for (auto [r, c, seed] : {std::tuple{5, 3, 3}, std::tuple{40, 17, 4}, std::tuple{17, 40, 5}}) {
    const Matrix a = random_matrix(r, c, seed);
    const SvdResult s = svd(a);
    Matrix us = s.u;
    for (std::size_t i = 0; i < us.rows(); ++i)
      for (std::size_t j = 0; j < us.cols(); ++j) us(i, j) *= s.s[j];
    const double rel = frobenius_norm(subtract(matmul(us, transpose(s.v)), a)) / frobenius_norm(a);
    if (!(rel <= kA3Tol)) bad.push_back("svd_" + std::to_string(r) + "x" + std::to_string(c) + "=" + fmt(rel, 10));
  }
  ModelConfig c;
  c.n_layers = 2;
  c.d_model = 16;
  c.n_heads = 2;
  c.head_dim = 8;
  c.d_ff = 24;
  c.vocab_size = 40;
  c.max_seq_len = 12;
  const ModelBundle tiny = init_model(c, 11);
  const double grad = grad_check(tiny, TrainSample{{1, 5, 9, 12, 7, 3}, 20}, 1e-4).max_relative_error;
  if (!(grad <= kA3GradTol)) bad.push_back("grad_check=" + fmt(grad, 6));
  std::string detail = "metric identities, SVD reconstruction, gradient check (max rel " + fmt(grad, 6) + ")";
  for (const auto& b : bad) detail += "; bad " + b;
  report("A3", bad.empty(), detail);
}

void check_a4(const fs::path& dir, const Manifest& m) {
  std::vector<std::string> bad;
  const ModelBundle fp = load_checkpoint((dir / "model/fp.qlck").string());
  const World w = load_world((dir / "corpus/world.json").string());
  const auto train_ids = read_json(dir / "corpus/splits.json").at("train").get<std::vector<int>>();
  const CalibSet calib = sample_calibration(w, train_ids, m.calib_sequences, m.seed);

  QuantSpec s4;
  s4.bits = 4;
  s4.group_size = m.quant.group_size;
  s4.algorithm = Algorithm::Rtn;
  QuantSpec g4 = s4;
  g4.algorithm = Algorithm::Gptq;

  // RTN error bound: every entry within half a step of its group.
  auto rtn_bound = [&](const Matrix& wm, const std::string& name) {
    const QuantResult r = rtn_quantize(wm, s4);
    const std::size_t ng = r.codebook.n_groups();
    for (std::size_t i = 0; i < wm.rows(); ++i)
      for (std::size_t j = 0; j < wm.cols(); ++j) {
        const double scale = r.codebook.scales[i * ng + j / r.codebook.group_size];
        if (std::abs(wm(i, j) - r.dequant(i, j)) > 0.5 * scale * (1 + 1e-12)) {
          bad.push_back("rtn_bound_" + name);
          return;
        }
      }
  };
  rtn_bound(random_matrix(24, 100, 9), "random");
  rtn_bound(fp.weights.layers[0].matrix(Component::Up).cast<double>(), "trained_up0");

  // GPTQ with an identity Hessian reproduces RTN exactly.
  {
    const Matrix wm = fp.weights.layers[0].matrix(Component::Q).cast<double>();
    const QuantResult r = rtn_quantize(wm, s4);
    const QuantResult g = gptq_quantize(wm, identity(wm.cols()), g4);
    if (r.dequant.values() != g.dequant.values() || r.codebook.codes != g.codebook.codes) bad.push_back("gptq_identity");
  }

  // GPTQ versus RTN output error on every trained matrix.
  std::size_t wins = 0, total = 0;
  for (int l = 0; l < fp.config.n_layers; ++l)
    for (Component comp : kAllComponents) {
      const Matrix wm = fp.weights.layers[l].matrix(comp).cast<double>();
      const Matrix h = collect_hessian(fp, l, comp, calib);
      const double er = output_error(wm, rtn_quantize(wm, s4).dequant, h);
      const double eg = output_error(wm, gptq_quantize(wm, h, g4).dequant, h);
      wins += eg <= er;
      ++total;
    }
  const double frac = static_cast<double>(wins) / static_cast<double>(total);
  if (frac < kA4GptqWinFraction) bad.push_back("gptq_wins=" + fmt(frac));

  // Low-rank compensation error is non-increasing in rank.
  {
    QuantSpec s2 = s4;
    s2.bits = 2;
    const Matrix wm = fp.weights.layers[1].matrix(Component::Down).cast<double>();
    const Matrix wq = rtn_quantize(wm, s2).dequant;
    const LowRankCompensator comp(wm, wq);
    double prev = frobenius_norm(subtract(wm, wq));
    for (int r = 1; r <= comp.max_rank(); r += std::max(1, comp.max_rank() / 16)) {
      const double e = frobenius_norm(subtract(wm, add(wq, comp.correction(r))));
      if (e > prev + kA4MonotoneSlack) {
        bad.push_back("lowrank_rank" + std::to_string(r));
        break;
      }
      prev = e;
    }
  }
  std::string detail = "RTN bound, GPTQ(I)==RTN, GPTQ <= RTN on " + std::to_string(wins) + "/" +
                       std::to_string(total) + " matrices, low-rank monotone";
  for (const auto& b : bad) detail += "; bad " + b;
  report("A4", bad.empty(), detail);
}

const json* grid_cell(const json& grid, int layer, const std::string& group) {
  for (const auto& c : grid.at("cells"))
    if (c.at("layer").get<int>() == layer && c.at("group").get<std::string>() == group) return &c;
  return nullptr;
}

void check_a5(const fs::path& dir, const json& causal) {
  // Self-patching on FP with FP clean states.
  const ModelBundle fp = load_checkpoint((dir / "model/fp.qlck").string());
  const World w = load_world((dir / "corpus/world.json").string());
  auto eval_ids = read_json(dir / "corpus/splits.json").at("eval").get<std::vector<int>>();
  if (eval_ids.size() > 48) eval_ids.resize(48);
  const auto prompts = render_primary(w, eval_ids);
  const CleanStore clean = capture_clean_traces(fp, prompts);
  CausalOptions opt;
  opt.max_prompts = prompts.size();
  const PatchGrid self = cross_model_repair(fp, clean, prompts, opt);
  double worst = 0;
  for (const auto& row : self.cells)
    for (const auto& c : row) worst = std::max(worst, std::abs(c.effect));
  const bool self_ok = worst < kA5SelfPatchTol;

  const json& grids = causal.at("grids");
  if (!grids.contains("aie_4") || grids.at("aie_4").contains("empty") || !grids.contains("aie_2")) {
    report("A5", false, "self-patch max |AIE| " + fmt(worst, 10) + "; Failure subset empty, no 4-bit grid");
    return;
  }
  const json& g4 = grids.at("aie_4");
  const json& g2 = grids.at("aie_2");
  double best = -1e9;
  int best_layer = -1;
  std::string best_group;
  for (const auto& c : g4.at("cells")) {
    if (c.at("n").get<std::size_t>() == 0) continue;
    const double e = c.at("effect").get<double>();
    if (e > best) {
      best = e;
      best_layer = c.at("layer").get<int>();
      best_group = c.at("group").get<std::string>();
    }
  }
  double best_ls = -1e9;
  int best_ls_layer = 0;
  for (const auto& c : g4.at("cells"))
    if (c.at("group") == "last_subject" && c.at("effect").get<double>() > best_ls) {
      best_ls = c.at("effect").get<double>();
      best_ls_layer = c.at("layer").get<int>();
    }
  const json* c2 = grid_cell(g2, best_ls_layer, "last_subject");
  const double aie2 = c2 ? c2->at("effect").get<double>() : 0.0;
  const bool hotspot = best_group == "last_subject";
  const bool gap = best_ls - aie2 >= kA5MinGap;
  report("A5", self_ok && hotspot && gap,
         "self-patch max |AIE| " + fmt(worst, 10) + "; 4-bit max cell " + best_group + "@L" +
             std::to_string(best_layer) + " = " + fmt(best) + "; last_subject@L" + std::to_string(best_ls_layer) +
             " AIE 4b " + fmt(best_ls) + " vs 2b " + fmt(aie2) + " (gap >= " + fmt(kA5MinGap, 2) + ")");
}

void check_a6(const json& diag, const json& causal) {
  if (diag.contains("empty") || !diag.at("curves").contains("4") || !diag.at("curves").contains("2")) {
    report("A6", false, "Failure subset empty, no diagnostics");
    return;
  }
  const json& c4 = diag.at("curves").at("4");
  const json& c2 = diag.at("curves").at("2");
  std::vector<std::string> parts;
  bool all = true;
  auto cmp = [&](const std::string& name, double hi, double lo, double margin) {
    const bool ok = hi - lo > margin;
    all = all && ok;
    parts.push_back(name + " " + fmt(hi) + ">" + fmt(lo) + (ok ? "" : " NO"));
  };
  cmp("SFR 2b>4b", mean_of(c2.at("gate_sfr")), mean_of(c4.at("gate_sfr")), kA6Margin);
  cmp("Jaccard 4b>2b", mean_of(c4.at("expert_jaccard")), mean_of(c2.at("expert_jaccard")), kA6Margin);
  cmp("cosine 4b>2b", mean_of(c4.at("value_cosine")), mean_of(c2.at("value_cosine")), kA6Margin);
  cmp("JSD 2b>4b", mean_of(c2.at("attn_jsd")), mean_of(c4.at("attn_jsd")), kA6Margin);
  const json& cka = diag.at("cka");
  if (cka.contains("4") && cka.contains("2")) {
    cmp("CKA 4b>2b", cka.at("4").at("diagonal_mean").get<double>(), cka.at("2").at("diagonal_mean").get<double>(),
        kA6WideMargin);
  } else {
    all = false;
    parts.push_back("CKA missing");
  }
  const json& sub = diag.at("subspace");
  cmp("Sim 4b>2b", mean_of(sub.at("4").at("similarity")), mean_of(sub.at("2").at("similarity")), kA6WideMargin);
  cmp("ErrAlign 2b>4b", mean_of(sub.at("2").at("error_alignment")), mean_of(sub.at("4").at("error_alignment")),
      kA6WideMargin);
  const json& grids = causal.at("grids");
  if (grids.contains("aae_16") && grids.contains("aae_2") && !grids.at("aae_16").contains("empty")) {
    cmp("AAE concentration FP>2b", grids.at("aae_16").at("concentration").get<double>(),
        grids.at("aae_2").at("concentration").get<double>(), 0.0);
  } else {
    all = false;
    parts.push_back("ablation grids missing");
  }
  std::string detail;
  for (const auto& p : parts) detail += (detail.empty() ? "" : "; ") + p;
  report("A6", all, detail);
}

void check_a7(const json& inter) {
  if (!inter.contains("domino_2_robust")) {
    report("A7", false, "no 2-bit domino sweep");
    return;
  }
  const auto& pts = inter.at("domino_2_robust").at("points");
  bool mono = true;
  double base = -1, at2 = -1;
  std::string seq;
  double prev = 2.0;
  for (const auto& p : pts) {
    const double a = p.at("accuracy").get<double>();
    const int k = static_cast<int>(p.at("x").get<double>());
    if (a > prev + kA7StepTolerance) mono = false;
    prev = a;
    if (k == -1) base = a;
    if (k == 2) at2 = a;
    seq += (seq.empty() ? "" : " ") + fmt(a, 3);
  }
  const bool drop = base > 0 && at2 >= 0 && at2 <= kA7DropFraction * base;
  report("A7", mono && drop,
         std::string("robust accuracy by k [") + seq + "]; non-increasing " + (mono ? "ok" : "no") + "; k=2 " +
             fmt(at2) + " <= " + fmt(kA7DropFraction, 2) + " x " + fmt(base) + " " + (drop ? "ok" : "no"));
}

void check_a8(const json& inter) {
  if (!inter.contains("repair")) {
    report("A8", false, "Failure subset empty, no repair results");
    return;
  }
  const json& r = inter.at("repair");
  const double plain = r.at("plain").get<double>(), prot = r.at("protect").get<double>();
  double best = -1, best_alpha = 0;
  for (const auto& a : r.at("amplify"))
    if (a.at("protect_amplify").get<double>() > best) {
      best = a.at("protect_amplify").get<double>();
      best_alpha = a.at("alpha").get<double>();
    }
  const bool p_ok = prot > plain, a_ok = best > prot, lift = best - plain >= kA8MinLift;
  report("A8", p_ok && a_ok && lift,
         "at " + std::to_string(r.at("bits").get<int>()) + " bits on " + std::to_string(r.at("n_facts").get<int>()) +
             " facts: plain " + fmt(plain) + ", protect " + fmt(prot) + ", protect+amplify " + fmt(best) +
             " (alpha " + fmt(best_alpha, 0) + "), lift " + fmt(best - plain) + " (>= " + fmt(kA8MinLift, 2) + ")");
}

void check_a9(const json& inter) {
  const double fp = inter.at("fp_accuracy_all").get<double>();
  double worst2 = 0, best4 = 0;
  std::string l2, l4;
  for (const auto& p : inter.at("compensation_2").at("points"))
    if (p.at("accuracy").get<double>() >= worst2) {
      worst2 = p.at("accuracy").get<double>();
      l2 = p.at("label").get<std::string>();
    }
  for (const auto& p : inter.at("compensation_4").at("points"))
    if (p.at("accuracy").get<double>() >= best4) {
      best4 = p.at("accuracy").get<double>();
      l4 = p.at("label").get<std::string>();
    }
  const bool collapse = worst2 <= kA9CollapseFraction * fp, recover = best4 >= kA9RecoverFraction * fp;
  report("A9", collapse && recover,
         "FP " + fmt(fp) + "; best 2-bit battery point " + l2 + " = " + fmt(worst2) + " (<= " +
             fmt(kA9CollapseFraction * fp) + "); best 4-bit point " + l4 + " = " + fmt(best4) + " (>= " +
             fmt(kA9RecoverFraction * fp) + ")");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"quantlens acceptance run"};
  std::string work = "acceptance_run", manifest_path;
  bool keep = false;
  app.add_option("--work", work, "scratch directory (wiped unless --keep)");
  app.add_option("--manifest", manifest_path, "manifest to run instead of the defaults");
  app.add_flag("--keep", keep, "reuse existing results in the scratch directory");
  CLI11_PARSE(app, argc, argv);

  try {
    const fs::path root(work);
    if (!keep) fs::remove_all(root);
    fs::create_directories(root);
    const Manifest m =
        manifest_path.empty() ? Manifest::from_json(Manifest{}.to_json()) : Manifest::load(manifest_path);

    const fs::path a = root / "a", b = root / "b";
    const RunResult ra = run_pipeline(m, a);
    const json train = read_json(a / "model/train.json");
    const json acc = read_json(a / "probes/accuracy.json");
    const json causal = read_json(a / "causal/summary.json");
    const json diag = read_json(a / "diagnostics/curves.json");
    const json inter = read_json(a / "interventions/results.json");
    const json subsets = read_json(a / "subsets.json");
    std::cout << "Failure subset built at " << subsets.at("failure_bits").get<int>() << " bits with "
              << subsets.at("failure").size() << " facts; Robust subset " << subsets.at("robust").size() << " facts"
              << std::endl;

    check_a1(train, acc, ra);
    check_a2(acc, m);
    check_a3();
    check_a4(a, m);
    check_a5(a, causal);
    check_a6(diag, causal);
    check_a7(inter);
    check_a8(inter);
    check_a9(inter);

    const RunResult rb = run_pipeline(m, b);
    const bool same = ra.digest == rb.digest;
    report("A10", same && ra.cpu_total <= kA10MaxCpuSeconds,
           "report digests " + std::string(same ? "match" : "differ") + " (" + ra.digest.substr(0, 16) +
               "), pipeline CPU " + fmt(ra.cpu_total, 1) + " s (<= " + fmt(kA10MaxCpuSeconds, 0) + ")");
  } catch (const std::exception& e) {
    std::cout << "acceptance aborted: " << e.what() << std::endl;
    return 1;
  }
  const auto failed = std::count_if(g_lines.begin(), g_lines.end(), [](const Line& l) { return !l.pass; });
  std::cout << (g_lines.size() - failed) << "/" << g_lines.size() << " criteria passed" << std::endl;
  return failed == 0 ? 0 : 1;
}
