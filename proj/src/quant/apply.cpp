#include <array>
#include <cmath>

#include "quantlens/error.hpp"
#include "quantlens/quant.hpp"
#include "quantlens/util.hpp"

namespace qlens {

using nlohmann::json;

namespace {

Matrix to_double(const MatrixF& m) { return m.cast<double>(); }

const MatrixF& site_of(const LayerTrace& t, Component c) {
  switch (c) {
    case Component::Q:
    case Component::K:
    case Component::V: return t.attn_in;
    case Component::O: return t.attn_ctx;
    case Component::Gate:
    case Component::Up: return t.ffn_in;
    case Component::Down: return t.h_key;
  }
  fail(ErrorKind::InvalidInput, "bad component");
}

MatrixF codebook_tensor(std::size_t rows, std::size_t cols, auto&& get) {
  MatrixF m(rows, cols);
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) m(i, j) = static_cast<float>(get(i, j));
  return m;
}

}  // namespace

Matrix collect_inputs(const ModelBundle& model, int layer, Component c, const CalibSet& calib) {
  require(!calib.sequences.empty(), ErrorKind::InvalidInput, "calibration set is empty");
  require(layer >= 0 && layer < model.config.n_layers, ErrorKind::InvalidInput, "collect_inputs: layer out of range");
  std::vector<SequenceJob> jobs;
  for (const auto& s : calib.sequences) jobs.push_back({s, nullptr});
  CaptureFlags cap;
  cap.linear_inputs = true;
  cap.h_key = true;
  cap.only_layer = layer;
  const auto res = forward_batch(model, jobs, cap, layer);
  std::size_t rows = 0;
  for (const auto& r : res) rows += r.trace.seq_len;
  const std::size_t cols = c == Component::Down ? model.config.d_ff : model.config.d_model;
  Matrix x(rows, cols);
  std::size_t at = 0;
  for (const auto& r : res) {
    const MatrixF& m = site_of(r.trace.layers[layer], c);
    for (std::size_t i = 0; i < m.rows(); ++i, ++at)
      for (std::size_t j = 0; j < cols; ++j) x(at, j) = m(i, j);
  }
  return x;
}

Matrix collect_hessian(const ModelBundle& model, int layer, Component c, const CalibSet& calib, double damping_frac) {
  return hessian_from_inputs(collect_inputs(model, layer, c, calib), damping_frac);
}

json QuantReport::to_json() const {
  json mats = json::array();
  for (const auto& m : matrices)
    mats.push_back(json{{"layer", m.layer},
                        {"component", std::string(component_name(m.component))},
                        {"bits", m.bits},
                        {"protected_rows", m.protected_rows},
                        {"weight_rel_error", m.weight_rel_error},
                        {"output_error", m.output_error},
                        {"output_rel_error", m.output_rel_error},
                        {"awq_beta", m.awq_beta}});
  return json{{"average_bits", average_bits}, {"matrices", mats}, {"warnings", warnings}};
}

QuantizedModel apply_plan(const ModelBundle& fp, const QuantPlan& plan, const CalibSet& calib, double damping_frac) {
  const ModelConfig& cfg = fp.config;
  plan.validate(cfg);
  const bool weighted = plan.compensation.rank > 0 && plan.compensation.mode == CompensationMode::ActivationWeighted;

  QuantizedModel out{fp, {}};
  out.model.codebook.clear();
  static const std::array<std::vector<Component>, 4> kStages{
      std::vector<Component>{Component::Q, Component::K, Component::V}, std::vector<Component>{Component::O},
      std::vector<Component>{Component::Gate, Component::Up}, std::vector<Component>{Component::Down}};

  for (int l = 0; l < cfg.n_layers; ++l) {
    for (const auto& stage : kStages) {
      bool active = false, needs_calib = false;
      for (Component c : stage) {
        const MatrixPlan& mp = plan.at(l, c);
        const bool quantized = !mp.spec.passthrough() || !mp.protected_rows.empty();
        active |= quantized;
        needs_calib |= quantized && (mp.spec.algorithm != Algorithm::Rtn || weighted);
      }
      if (!active) continue;
      ActivationStats stats;
      if (needs_calib) stats = activation_stats(collect_inputs(out.model, l, stage.front(), calib), damping_frac);

      for (Component c : stage) {
        const MatrixPlan& mp = plan.at(l, c);
        if (mp.spec.passthrough() && mp.protected_rows.empty()) continue;
        const Matrix w = to_double(fp.weights.layers[l].matrix(c));
        MatrixReport rep;
        rep.layer = l;
        rep.component = c;
        rep.bits = mp.spec.bits;
        rep.protected_rows = mp.protected_rows.size();

        QuantResult q;
        std::vector<double> awq_scales;
        if (mp.spec.passthrough() || mp.spec.algorithm == Algorithm::Rtn) {
          q = rtn_quantize(w, mp.spec, mp.protected_rows);
        } else if (mp.spec.algorithm == Algorithm::Gptq) {
          q = gptq_quantize(w, stats.hessian, mp.spec, mp.protected_rows);
        } else {
          AwqResult a = awq_scale_search(w, stats, mp.spec, mp.protected_rows);
          rep.awq_beta = a.beta;
          awq_scales = std::move(a.scales);
          q = std::move(a.quant);
        }
        Matrix wq = std::move(q.dequant);
        if (plan.compensation.rank > 0) {
          const Matrix corr = lowrank_compensate(w, wq, plan.compensation.rank, weighted ? &stats.second_moment : nullptr);
          for (std::size_t i = 0; i < wq.size(); ++i) wq.data()[i] += corr.data()[i];
        }

        double num = 0.0, den = 0.0;
        for (std::size_t i = 0; i < w.size(); ++i) {
          num += (wq.data()[i] - w.data()[i]) * (wq.data()[i] - w.data()[i]);
          den += w.data()[i] * w.data()[i];
        }
        rep.weight_rel_error = den > 0 ? std::sqrt(num / den) : 0.0;
        if (needs_calib) {
          rep.output_error = output_error(w, wq, stats.hessian);
          const Matrix zero(w.rows(), w.cols());
          const double base = output_error(zero, w, stats.hessian);
          rep.output_rel_error = base > 0 ? rep.output_error / base : 0.0;
        }
        out.report.matrices.push_back(rep);

        out.model.weights.layers[l].matrix(c) = wq.cast<float>();
        const std::string name = tensor_name(l, c);
        const Codebook& cb = q.codebook;
        if (!cb.scales.empty()) {
          const std::size_t ng = cb.n_groups();
          out.model.codebook[name + ".scales"] =
              codebook_tensor(cb.rows, ng, [&](std::size_t i, std::size_t j) { return cb.scales[i * ng + j]; });
          out.model.codebook[name + ".zeros"] =
              codebook_tensor(cb.rows, ng, [&](std::size_t i, std::size_t j) { return cb.zeros[i * ng + j]; });
          out.model.codebook[name + ".codes"] =
              codebook_tensor(cb.rows, cb.cols, [&](std::size_t i, std::size_t j) { return cb.codes[i * cb.cols + j]; });
        }
        out.model.codebook[name + ".row_bits"] =
            codebook_tensor(cb.rows, 1, [&](std::size_t i, std::size_t) { return cb.row_bits[i]; });
        if (!awq_scales.empty())
          out.model.codebook[name + ".awq_scales"] =
              codebook_tensor(1, awq_scales.size(), [&](std::size_t, std::size_t j) { return awq_scales[j]; });
      }
    }
  }
  out.report.average_bits = plan.average_bits(cfg);
  out.report.warnings = drain_warnings();
  out.model.metadata["quant_plan"] = plan.to_json();
  out.model.metadata["average_bits"] = out.report.average_bits;
  out.model.metadata["source_digest"] = fp.digest();
  return out;
}

}  // namespace qlens
