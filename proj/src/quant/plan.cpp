#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>

#include "quantlens/error.hpp"
#include "quantlens/quant.hpp"

namespace qlens {

using nlohmann::json;

namespace {

std::size_t out_rows(const ModelConfig& c, Component comp) {
  return comp == Component::Gate || comp == Component::Up ? c.d_ff : c.d_model;
}

std::size_t in_cols(const ModelConfig& c, Component comp) { return comp == Component::Down ? c.d_ff : c.d_model; }

json spec_json(const QuantSpec& s) {
  return json{{"bits", s.bits}, {"group_size", s.group_size}, {"algorithm", std::string(to_string(s.algorithm))}};
}

QuantSpec spec_from_json(const json& j, QuantSpec base) {
  base.bits = j.value("bits", base.bits);
  base.group_size = j.value("group_size", base.group_size);
  if (j.contains("algorithm")) base.algorithm = parse_algorithm(j.at("algorithm").get<std::string>());
  base.validate();
  return base;
}

}  // namespace

double QuantPlan::average_bits(const ModelConfig& config) const {
  double bits = 0.0, params = 0.0;
  for (std::size_t l = 0; l < layers.size(); ++l) {
    for (Component c : kAllComponents) {
      const MatrixPlan& mp = layers[l][static_cast<int>(c)];
      const double cols = static_cast<double>(in_cols(config, c));
      const double rows = static_cast<double>(out_rows(config, c));
      const double prot = static_cast<double>(mp.protected_rows.size());
      const double row_bits = mp.spec.passthrough() ? 16.0 : static_cast<double>(mp.spec.bits);
      const double prot_bits = mp.spec.passthrough() ? 16.0 : 8.0;
      bits += cols * ((rows - prot) * row_bits + prot * prot_bits);
      params += rows * cols;
    }
  }
  return params > 0 ? bits / params : 16.0;
}

void QuantPlan::validate(const ModelConfig& config) const {
  require(layers.size() == static_cast<std::size_t>(config.n_layers), ErrorKind::InvalidConfig,
          "quant plan: layer count does not match the model");
  for (std::size_t l = 0; l < layers.size(); ++l) {
    for (Component c : kAllComponents) {
      const MatrixPlan& mp = layers[l][static_cast<int>(c)];
      mp.spec.validate();
      int prev = -1;
      for (int r : mp.protected_rows) {
        if (r <= prev || r < 0 || static_cast<std::size_t>(r) >= out_rows(config, c))
          fail(ErrorKind::InvalidConfig, "quant plan: protected rows of " + tensor_name(static_cast<int>(l), c) +
                                             " must be ascending and within bounds");
        prev = r;
      }
    }
  }
  require(compensation.rank >= 0, ErrorKind::InvalidConfig, "quant plan: compensation rank must be >= 0");
}

json QuantPlan::to_json() const {
  // Defaults: the most common spec; everything else becomes an override.
  std::map<std::tuple<int, int, int>, int> counts;
  for (const auto& layer : layers)
    for (const auto& mp : layer) ++counts[{mp.spec.bits, mp.spec.group_size, static_cast<int>(mp.spec.algorithm)}];
  QuantSpec defaults;
  int best = -1;
  for (const auto& [k, n] : counts)
    if (n > best) {
      best = n;
      defaults = QuantSpec{std::get<0>(k), std::get<1>(k), static_cast<Algorithm>(std::get<2>(k))};
    }
  json overrides = json::array(), protection = json::array();
  for (std::size_t l = 0; l < layers.size(); ++l) {
    for (Component c : kAllComponents) {
      const MatrixPlan& mp = layers[l][static_cast<int>(c)];
      if (!(mp.spec == defaults)) {
        json o = spec_json(mp.spec);
        o["layer"] = l;
        o["component"] = std::string(component_name(c));
        overrides.push_back(o);
      }
      if (!mp.protected_rows.empty())
        protection.push_back(json{{"layer", l}, {"component", std::string(component_name(c))}, {"rows", mp.protected_rows}});
    }
  }
  return json{{"defaults", spec_json(defaults)},
              {"overrides", overrides},
              {"protection", protection},
              {"compensation",
               {{"rank", compensation.rank},
                {"mode", compensation.mode == CompensationMode::Plain ? "plain" : "activation_weighted"}}}};
}

QuantPlan QuantPlan::from_json(const json& j, const ModelConfig& config) {
  QuantPlan p;
  try {
    const QuantSpec defaults = spec_from_json(j.value("defaults", json::object()), QuantSpec{});
    p.layers.assign(config.n_layers, {});
    for (auto& layer : p.layers)
      for (auto& mp : layer) mp.spec = defaults;
    for (const auto& o : j.value("overrides", json::array())) {
      const int l = o.at("layer");
      require(l >= 0 && l < config.n_layers, ErrorKind::InvalidConfig, "quant plan: override layer out of range");
      MatrixPlan& mp = p.at(l, parse_component(o.at("component").get<std::string>()));
      mp.spec = spec_from_json(o, mp.spec);
    }
    for (const auto& pr : j.value("protection", json::array())) {
      const int l = pr.at("layer");
      require(l >= 0 && l < config.n_layers, ErrorKind::InvalidConfig, "quant plan: protection layer out of range");
      MatrixPlan& mp = p.at(l, parse_component(pr.at("component").get<std::string>()));
      mp.protected_rows = pr.at("rows").get<std::vector<int>>();
      std::sort(mp.protected_rows.begin(), mp.protected_rows.end());
    }
    if (j.contains("compensation")) {
      const json& c = j.at("compensation");
      p.compensation.rank = c.value("rank", 0);
      const std::string mode = c.value("mode", std::string("plain"));
      if (mode == "plain") p.compensation.mode = CompensationMode::Plain;
      else if (mode == "activation_weighted") p.compensation.mode = CompensationMode::ActivationWeighted;
      else fail(ErrorKind::InvalidConfig, "quant plan: unknown compensation mode '" + mode + "'");
    }
  } catch (const json::exception& e) {
    fail(ErrorKind::InvalidConfig, std::string("quant plan: ") + e.what());
  }
  p.validate(config);
  return p;
}

std::string_view to_string(ComponentMask m) {
  switch (m) {
    case ComponentMask::All: return "all";
    case ComponentMask::Mlp: return "mlp";
    case ComponentMask::Attn: return "attn";
    case ComponentMask::GateUp: return "gate_up";
    case ComponentMask::Down: return "down";
    case ComponentMask::QK: return "qk";
    case ComponentMask::V: return "v";
    case ComponentMask::O: return "o";
    case ComponentMask::None: return "none";
  }
  return "?";
}

ComponentMask parse_mask(std::string_view s) {
  for (ComponentMask m : {ComponentMask::All, ComponentMask::Mlp, ComponentMask::Attn, ComponentMask::GateUp,
                          ComponentMask::Down, ComponentMask::QK, ComponentMask::V, ComponentMask::O, ComponentMask::None})
    if (to_string(m) == s) return m;
  fail(ErrorKind::InvalidConfig, "unknown component mask '" + std::string(s) + "'");
}

bool mask_contains(ComponentMask m, Component c) {
  switch (m) {
    case ComponentMask::All: return true;
    case ComponentMask::Mlp: return c == Component::Gate || c == Component::Up || c == Component::Down;
    case ComponentMask::Attn: return c == Component::Q || c == Component::K || c == Component::V || c == Component::O;
    case ComponentMask::GateUp: return c == Component::Gate || c == Component::Up;
    case ComponentMask::Down: return c == Component::Down;
    case ComponentMask::QK: return c == Component::Q || c == Component::K;
    case ComponentMask::V: return c == Component::V;
    case ComponentMask::O: return c == Component::O;
    case ComponentMask::None: return false;
  }
  return false;
}

PlanDirective PlanDirective::uniform(int bits) {
  PlanDirective d;
  d.kind = Kind::Uniform;
  d.bits = bits;
  return d;
}

PlanDirective PlanDirective::first_k(int k, int bits) {
  PlanDirective d;
  d.kind = Kind::FirstKLayers;
  d.k = k;
  d.bits = bits;
  return d;
}

PlanDirective PlanDirective::layer_range(int lo, int hi, int bits) {
  PlanDirective d;
  d.kind = Kind::LayerRange;
  d.lo = lo;
  d.hi = hi;
  d.bits = bits;
  return d;
}

PlanDirective PlanDirective::masked(ComponentMask m, int bits) {
  PlanDirective d;
  d.kind = Kind::Mask;
  d.mask = m;
  d.bits = bits;
  return d;
}

PlanDirective PlanDirective::protect(int layer, Component c, std::vector<int> rows) {
  PlanDirective d;
  d.kind = Kind::ProtectRows;
  d.layer = layer;
  d.component = c;
  std::sort(rows.begin(), rows.end());
  rows.erase(std::unique(rows.begin(), rows.end()), rows.end());
  d.rows = std::move(rows);
  return d;
}

QuantPlan build_plan(const ModelConfig& config, std::span<const PlanDirective> directives, const QuantSpec& defaults) {
  config.validate();
  defaults.validate();
  QuantPlan plan;
  plan.layers.assign(config.n_layers, {});
  for (auto& layer : plan.layers)
    for (auto& mp : layer) mp.spec = defaults;

  std::map<std::string, std::string> seen;  // scope -> value
  auto check = [&](const std::string& scope, const std::string& value) {
    auto [it, fresh] = seen.emplace(scope, value);
    if (!fresh && it->second != value)
      fail(ErrorKind::InvalidConfig, "conflicting plan directives for " + scope + ": " + it->second + " vs " + value);
  };
  auto set_bits = [&](int l, Component c, int bits) {
    QuantSpec s = plan.at(l, c).spec;
    s.bits = bits;
    s.validate();
    plan.at(l, c).spec = s;
  };

  for (const auto& d : directives) {
    using K = PlanDirective::Kind;
    switch (d.kind) {
      case K::Uniform:
        check("uniform", std::to_string(d.bits));
        for (int l = 0; l < config.n_layers; ++l)
          for (Component c : kAllComponents) set_bits(l, c, d.bits);
        break;
      case K::FirstKLayers:
        require(d.k >= 0 && d.k <= config.n_layers, ErrorKind::InvalidConfig, "first_k_layers: k out of range");
        check("first_k:" + std::to_string(d.k), std::to_string(d.bits));
        for (int l = 0; l < d.k; ++l)
          for (Component c : kAllComponents) set_bits(l, c, d.bits);
        break;
      case K::LayerRange:
        require(d.lo >= 0 && d.lo <= d.hi && d.hi < config.n_layers, ErrorKind::InvalidConfig,
                "layer_range: bounds out of range");
        check("range:" + std::to_string(d.lo) + ":" + std::to_string(d.hi), std::to_string(d.bits));
        for (int l = d.lo; l <= d.hi; ++l)
          for (Component c : kAllComponents) set_bits(l, c, d.bits);
        break;
      case K::Mask:
        check("mask:" + std::string(to_string(d.mask)), std::to_string(d.bits));
        for (int l = 0; l < config.n_layers; ++l)
          for (Component c : kAllComponents)
            if (mask_contains(d.mask, c)) set_bits(l, c, d.bits);
        break;
      case K::ProtectRows: {
        require(d.layer >= 0 && d.layer < config.n_layers, ErrorKind::InvalidConfig, "protect: layer out of range");
        std::string rows;
        for (int r : d.rows) rows += std::to_string(r) + ",";
        check("protect:" + tensor_name(d.layer, d.component), rows);
        plan.at(d.layer, d.component).protected_rows = d.rows;
        break;
      }
    }
  }
  plan.validate(config);
  return plan;
}

std::vector<RowKurtosis> row_kurtosis(const ModelBundle& model) {
  std::vector<RowKurtosis> out;
  std::vector<double> row;
  for (int l = 0; l < model.config.n_layers; ++l) {
    for (Component c : kAllComponents) {
      const MatrixF& m = model.weights.layers[l].matrix(c);
      for (std::size_t r = 0; r < m.rows(); ++r) {
        row.assign(m.row(r).begin(), m.row(r).end());
        double k = -std::numeric_limits<double>::infinity();
        try {
          k = kurtosis(row);
        } catch (const Error& e) {
          if (e.kind() != ErrorKind::DegenerateSample) throw;
        }
        out.push_back({l, c, static_cast<int>(r), k});
      }
    }
  }
  return out;
}

std::string_view to_string(KurtosisGranularity g) { return g == KurtosisGranularity::Row ? "row" : "tensor"; }

KurtosisGranularity parse_granularity(std::string_view s) {
  if (s == "row") return KurtosisGranularity::Row;
  if (s == "tensor") return KurtosisGranularity::Tensor;
  fail(ErrorKind::InvalidConfig, "unknown kurtosis granularity '" + std::string(s) + "'");
}

QuantPlan kurtosis_protect_plan(const ModelBundle& model, int base_bits, double target_avg_bits,
                                const QuantSpec& defaults, KurtosisGranularity granularity) {
  if (base_bits >= 8 || !(target_avg_bits >= base_bits) || target_avg_bits > 8.0)
    fail(ErrorKind::InvalidConfig, "kurtosis protection: target " + std::to_string(target_avg_bits) +
                                       " unattainable from base " + std::to_string(base_bits) + " bits");
  const std::vector<PlanDirective> dirs{PlanDirective::uniform(base_bits)};
  QuantPlan plan = build_plan(model.config, dirs, defaults);
  const double f = (target_avg_bits - base_bits) / (8.0 - base_bits);
  if (f <= 0.0) return plan;

  // A tensor unit is recorded with row = -1 and covers every row.
  std::vector<RowKurtosis> units;
  if (granularity == KurtosisGranularity::Row) {
    units = row_kurtosis(model);
  } else {
    for (int l = 0; l < model.config.n_layers; ++l)
      for (Component c : kAllComponents) {
        const MatrixF& m = model.weights.layers[l].matrix(c);
        const std::vector<double> v(m.values().begin(), m.values().end());
        double k = -std::numeric_limits<double>::infinity();
        try {
          k = kurtosis(v);
        } catch (const Error& e) {
          if (e.kind() != ErrorKind::DegenerateSample) throw;
        }
        units.push_back({l, c, -1, k});
      }
  }
  std::stable_sort(units.begin(), units.end(), [](const RowKurtosis& a, const RowKurtosis& b) {
    if (a.kurtosis != b.kurtosis) return a.kurtosis > b.kurtosis;
    if (a.layer != b.layer) return a.layer < b.layer;
    if (a.component != b.component) return a.component < b.component;
    return a.row < b.row;
  });
  double total = 0.0;
  for (int l = 0; l < model.config.n_layers; ++l)
    for (Component c : kAllComponents) total += static_cast<double>(model.weights.layers[l].matrix(c).size());
  const double budget = f * total;
  double used = 0.0;
  for (const auto& u : units) {
    if (used >= budget) break;
    auto& rows = plan.at(u.layer, u.component).protected_rows;
    const MatrixF& m = model.weights.layers[u.layer].matrix(u.component);
    if (u.row >= 0) {
      rows.push_back(u.row);
      used += static_cast<double>(m.cols());
    } else {
      for (std::size_t r = 0; r < m.rows(); ++r) rows.push_back(static_cast<int>(r));
      used += static_cast<double>(m.size());
    }
  }
  for (auto& layer : plan.layers)
    for (auto& mp : layer) std::sort(mp.protected_rows.begin(), mp.protected_rows.end());
  return plan;
}

}  // namespace qlens
