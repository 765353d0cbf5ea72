#include <algorithm>
#include <optional>
#include <filesystem>
#include <sstream>

#include "files.hpp"
#include "quantlens/pipeline.hpp"
#include "quantlens/util.hpp"

namespace qlens {

namespace fs = std::filesystem;
using nlohmann::json;

const std::vector<std::string>& plot_headers() {
  static const std::vector<std::string> h{
      "bits,acc_any,acc_majority,acc_all,n_facts",
      "bits,bucket,count",
      "bits,layer,prob,rank,entropy_bits",
      "bits,layer,group,effect,stderr,n",
      "bits,layer,group,effect,stderr,n",
      "metric,bits,layer,mean,std,n",
      "metric,bits,layer,mean,std,n",
      "bits,fp_layer,q_layer,cka",
      "metric,bits,layer,value,k",
      "sweep,bits,subset,k,accuracy",
      "variant,layer,accuracy",
      "bits_hi,k,layer,mean,std,n",
  };
  return h;
}

namespace {

std::string strip_footer_and_header(const std::string& csv) {
  std::istringstream in(csv);
  std::string line, out;
  bool first = true;
  while (std::getline(in, line)) {
    if (first) {
      first = false;
      continue;
    }
    if (!line.empty() && line[0] == '#') continue;
    out += line + "\n";
  }
  return out;
}

struct Builder {
  fs::path results;
  fs::path report;
  std::string manifest_digest;
  ReportIndex idx;

  std::optional<json> load(const std::string& rel) {
    const fs::path p = results / rel;
    if (!fs::exists(p)) return std::nullopt;
    try {
      return read_json(p);
    } catch (const Error& e) {
      idx.warnings.push_back(e.what());
      return std::nullopt;
    }
  }

  void put(const std::string& name, const std::string& header, const std::string& body) {
    write_file(report / name, with_digest_footer(header + "\n" + body, manifest_digest));
    idx.files.push_back(name);
  }

  void absent(const std::string& name, const std::string& why) {
    idx.absent.push_back(name);
    idx.warnings.push_back(name + ": " + why);
  }

  void accuracy() {
    const auto& H = plot_headers();
    auto acc = load("probes/accuracy.json");
    if (!acc) return absent(kPlotFiles[0], "probes/accuracy.json missing");
    std::ostringstream os;
    os.precision(10);
    std::vector<std::string> keys;
    for (auto it = (*acc)["models"].begin(); it != (*acc)["models"].end(); ++it) keys.push_back(it.key());
    std::sort(keys.begin(), keys.end(), [](const std::string& a, const std::string& b) { return std::stoi(a) > std::stoi(b); });
    for (const auto& k : keys) {
      const json& r = (*acc)["models"][k];
      os << k << ',' << r["acc_any"].get<double>() << ',' << r["acc_majority"].get<double>() << ','
         << r["acc_all"].get<double>() << ',' << r["n_facts"].get<std::size_t>() << '\n';
    }
    put(kPlotFiles[0], H[0], os.str());
  }

  void copy_csv(int fig, const std::string& rel) {
    const fs::path p = results / rel;
    if (!fs::exists(p)) return absent(kPlotFiles[fig], rel + " missing");
    put(kPlotFiles[fig], plot_headers()[fig], strip_footer_and_header(read_text(p)));
  }

  void causal() {
    auto s = load("causal/summary.json");
    if (!s || !s->contains("grids")) {
      absent(kPlotFiles[3], "causal grids missing");
      absent(kPlotFiles[4], "causal grids missing");
      return;
    }
    for (int fig : {3, 4}) {
      const std::string prefix = fig == 3 ? "aie_" : "aae_";
      std::ostringstream os;
      os.precision(10);
      std::vector<std::string> keys;
      for (auto it = (*s)["grids"].begin(); it != (*s)["grids"].end(); ++it)
        if (it.key().rfind(prefix, 0) == 0) keys.push_back(it.key());
      std::sort(keys.begin(), keys.end(), [&](const std::string& a, const std::string& b) {
        return std::stoi(a.substr(4)) > std::stoi(b.substr(4));
      });
      for (const auto& k : keys)
        for (const auto& c : (*s)["grids"][k]["cells"])
          os << k.substr(4) << ',' << c["layer"].get<int>() << ',' << c["group"].get<std::string>() << ','
             << c["effect"].get<double>() << ',' << c["stderr"].get<double>() << ',' << c["n"].get<std::size_t>() << '\n';
      put(kPlotFiles[fig], plot_headers()[fig], os.str());
    }
  }

  static void curve_rows(std::ostream& os, const std::string& metric, const std::string& bits, const json& c) {
    const auto& mean = c["mean"];
    for (std::size_t l = 0; l < mean.size(); ++l)
      os << metric << ',' << bits << ',' << l << ',' << mean[l].get<double>() << ',' << c["std"][l].get<double>() << ','
         << c["n"][l].get<std::size_t>() << '\n';
  }

  void diagnostics() {
    auto d = load("diagnostics/curves.json");
    if (!d || !d->contains("curves")) {
      for (int f : {5, 6, 7, 8}) absent(kPlotFiles[f], "diagnostics missing");
      return;
    }
    std::vector<std::string> keys;
    for (auto it = (*d)["curves"].begin(); it != (*d)["curves"].end(); ++it) keys.push_back(it.key());
    std::sort(keys.begin(), keys.end(), [](const std::string& a, const std::string& b) { return std::stoi(a) > std::stoi(b); });
    std::ostringstream att, ffn, cka, sub;
    for (auto* o : {&att, &ffn, &cka, &sub}) o->precision(10);
    for (const auto& k : keys) {
      const json& c = (*d)["curves"][k];
      for (const char* m : {"attn_entropy", "attn_jsd"})
        if (c.contains(m)) curve_rows(att, m, k, c[m]);
      for (const char* m : {"gate_sfr", "expert_jaccard", "value_cosine", "residual_cosine"})
        if (c.contains(m)) curve_rows(ffn, m, k, c[m]);
      if ((*d)["cka"].contains(k)) {
        const auto& v = (*d)["cka"][k]["values"];
        for (std::size_t i = 0; i < v.size(); ++i)
          for (std::size_t j = 0; j < v[i].size(); ++j) cka << k << ',' << i << ',' << j << ',' << v[i][j].get<double>() << '\n';
      }
      if ((*d)["subspace"].contains(k)) {
        for (const char* m : {"similarity", "error_alignment"}) {
          const auto& c2 = (*d)["subspace"][k][m];
          for (std::size_t l = 0; l < c2["mean"].size(); ++l)
            sub << m << ',' << k << ',' << l << ',' << c2["mean"][l].get<double>() << ',' << c2["n"][l].get<std::size_t>() << '\n';
        }
      }
    }
    put(kPlotFiles[5], plot_headers()[5], att.str());
    put(kPlotFiles[6], plot_headers()[6], ffn.str());
    if ((*d)["cka"].empty())
      absent(kPlotFiles[7], "too few Failure prompts for CKA");
    else
      put(kPlotFiles[7], plot_headers()[7], cka.str());
    put(kPlotFiles[8], plot_headers()[8], sub.str());
  }

  void interventions() {
    auto r = load("interventions/results.json");
    if (!r) {
      for (int f : {9, 10, 11}) absent(kPlotFiles[f], "interventions missing");
      return;
    }
    std::ostringstream dom, lens, inj, t1, t6, sl, comp;
    for (auto* o : {&dom, &lens, &inj, &t1, &t6, &sl, &comp}) o->precision(10);
    for (const char* key : {"domino_2_robust", "domino_failure"}) {
      if (!r->contains(key)) continue;
      const json& s = (*r)[key];
      const int bits = s["settings"]["bits_lo"].get<int>();
      for (const auto& p : s["points"])
        dom << key << ',' << bits << ',' << s["subset"].get<std::string>() << ',' << p["x"].get<double>() << ','
            << p["accuracy"].get<double>() << '\n';
    }
    put(kPlotFiles[9], plot_headers()[9], dom.str());

    if (r->contains("repair")) {
      const json& rep = (*r)["repair"];
      for (const char* v : {"fp", "plain", "protect", "protect_amplify"}) {
        const auto& c = rep["lens_accuracy"][v];
        for (std::size_t l = 0; l < c.size(); ++l) lens << v << ',' << l << ',' << c[l].get<double>() << '\n';
      }
      put(kPlotFiles[10], plot_headers()[10], lens.str());
      t1 << "fp,0," << rep["fp"].get<double>() << '\n';
      t1 << "plain,0," << rep["plain"].get<double>() << '\n';
      t1 << "protect,0," << rep["protect"].get<double>() << '\n';
      for (const auto& a : rep["amplify"]) {
        t1 << "protect_amplify," << a["alpha"].get<double>() << ',' << a["protect_amplify"].get<double>() << '\n';
        t1 << "plain_amplify," << a["alpha"].get<double>() << ',' << a["plain_amplify"].get<double>() << '\n';
      }
      put("table1_repair.csv", "variant,alpha,accuracy", t1.str());
    } else {
      absent(kPlotFiles[10], "repair results missing (empty Failure subset)");
    }

    bool any_inj = false;
    for (const char* key : {"injection_8", "injection_4"}) {
      if (!r->contains(key)) continue;
      any_inj = true;
      const json& s = (*r)[key];
      for (const auto& c : s["curves"]) {
        const auto& cos = c["cosine"];
        for (std::size_t l = 0; l < cos["mean"].size(); ++l)
          inj << s["bits_hi"].get<int>() << ',' << c["k"].get<int>() << ',' << l << ',' << cos["mean"][l].get<double>() << ','
              << cos["std"][l].get<double>() << ',' << cos["n"][l].get<std::size_t>() << '\n';
      }
    }
    if (any_inj)
      put(kPlotFiles[11], plot_headers()[11], inj.str());
    else
      absent(kPlotFiles[11], "injection sweep missing");

    for (int b : {4, 2}) {
      const std::string cs = "component_" + std::to_string(b), ss = "single_layer_" + std::to_string(b),
                        cb = "compensation_" + std::to_string(b);
      if (r->contains(cs))
        for (const auto& p : (*r)[cs]["points"]) t6 << b << ',' << p["label"].get<std::string>() << ',' << p["accuracy"].get<double>() << '\n';
      if (r->contains(ss))
        for (const auto& p : (*r)[ss]["points"]) sl << b << ',' << p["x"].get<double>() << ',' << p["accuracy"].get<double>() << '\n';
      if (r->contains(cb))
        for (const auto& p : (*r)[cb]["points"])
          comp << b << ',' << p["label"].get<std::string>() << ',' << p["accuracy"].get<double>() << ','
               << p["average_bits"].get<double>() << '\n';
    }
    put("table6_components.csv", "bits,mask,accuracy", t6.str());
    put("single_layer.csv", "bits,layer,accuracy", sl.str());
    put("compensation.csv", "bits,label,accuracy,average_bits", comp.str());
  }

  void subsets() {
    auto s = load("subsets.json");
    if (!s) return absent("subset_counts.csv", "subsets.json missing");
    std::ostringstream os;
    for (auto it = (*s)["by_bits"].begin(); it != (*s)["by_bits"].end(); ++it) {
      const auto& c = it.value()["counts"];
      os << it.key() << ',' << c["robust"].get<std::size_t>() << ',' << c["failure"].get<std::size_t>() << ','
         << c["other"].get<std::size_t>() << '\n';
    }
    put("subset_counts.csv", "bits,robust,failure,other", os.str());
  }
};

}  // namespace

ReportIndex build_report(const std::string& results_dir) {
  Builder b;
  b.results = results_dir;
  b.report = fs::path(results_dir) / "report";
  if (fs::exists(fs::path(results_dir) / "manifest.json")) {
    try {
      b.manifest_digest = read_json(fs::path(results_dir) / "manifest.json").value("manifest_digest", "");
    } catch (const Error& e) {
      b.idx.warnings.push_back(e.what());
    }
  }
  if (b.manifest_digest.empty()) {
    b.idx.warnings.push_back("no manifest found in " + results_dir + "; nothing to report");
    for (const char* f : kPlotFiles) b.idx.absent.push_back(f);
  } else {
    b.accuracy();
    b.copy_csv(1, "probes/rank_histogram.csv");
    b.copy_csv(2, "probes/lens_trajectory.csv");
    b.causal();
    b.diagnostics();
    b.interventions();
    b.subsets();
  }
  std::sort(b.idx.files.begin(), b.idx.files.end());
  std::string cat;
  for (const auto& f : b.idx.files) cat += f + ":" + file_sha256(b.report / f) + "|";
  b.idx.digest = sha256_hex(cat);
  for (const auto& w : b.idx.warnings) warn("report: " + w);
  write_file(b.report / "index.json", json{{"files", b.idx.files},
                                           {"absent", b.idx.absent},
                                           {"warnings", b.idx.warnings},
                                           {"report_digest", b.idx.digest},
                                           {"manifest_digest", b.manifest_digest}}
                                              .dump(1) + "\n");
  return b.idx;
}

}  // namespace qlens
