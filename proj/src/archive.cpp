#include "quantlens/archive.hpp"

#include "quantlens/container.hpp"
#include "quantlens/error.hpp"

namespace qlens {

using nlohmann::json;

namespace {

struct SiteField {
  const char* name;
  bool CaptureFlags::*flag;
  MatrixF LayerTrace::*field;
};

constexpr SiteField kSites[] = {
    {"residual_out", &CaptureFlags::residual, &LayerTrace::residual_out},
    {"attn_out", &CaptureFlags::attn_out, &LayerTrace::attn_out},
    {"ffn_out", &CaptureFlags::ffn_out, &LayerTrace::ffn_out},
    {"gate_preact", &CaptureFlags::gate_preact, &LayerTrace::gate_preact},
    {"h_key", &CaptureFlags::h_key, &LayerTrace::h_key},
};

std::string tensor_key(std::size_t trace, std::size_t layer, const std::string& site) {
  return "t" + std::to_string(trace) + ".l" + std::to_string(layer) + "." + site;
}

}  // namespace

void export_traces(const std::string& path, const TraceStore& store, const CaptureFlags& sites) {
  require(store.keys.size() == store.traces.size(), ErrorKind::InvalidInput, "export_traces: keys and traces differ in count");
  json keys = json::array(), lens = json::array(), names = json::array();
  std::vector<TensorRef> refs;
  for (const auto& s : kSites)
    if (sites.*(s.flag)) names.push_back(s.name);
  if (sites.attention) names.push_back("attention");
  std::size_t n_layers = store.traces.empty() ? 0 : store.traces[0].layers.size();
  for (std::size_t i = 0; i < store.traces.size(); ++i) {
    const ForwardTrace& t = store.traces[i];
    require(t.layers.size() == n_layers, ErrorKind::InvalidInput, "export_traces: layer counts differ");
    keys.push_back(json::array({store.keys[i].first, store.keys[i].second}));
    lens.push_back(t.seq_len);
    for (std::size_t l = 0; l < t.layers.size(); ++l) {
      for (const auto& s : kSites) {
        if (!(sites.*(s.flag))) continue;
        const MatrixF& m = t.layers[l].*(s.field);
        if (m.empty()) fail(ErrorKind::TraceIncomplete, std::string("export_traces: ") + s.name + " missing at layer " + std::to_string(l));
        refs.push_back({tensor_key(i, l, s.name), "trace", &m});
      }
      if (sites.attention) {
        const auto& heads = t.layers[l].attention;
        if (heads.empty()) fail(ErrorKind::TraceIncomplete, "export_traces: attention missing at layer " + std::to_string(l));
        for (std::size_t h = 0; h < heads.size(); ++h) refs.push_back({tensor_key(i, l, "attn" + std::to_string(h)), "trace", &heads[h]});
      }
    }
  }
  json meta{{"kind", "trace_archive"}, {"keys", keys}, {"seq_lens", lens}, {"sites", names},
            {"n_layers", n_layers}, {"run", store.meta}};
  if (sites.attention && !store.traces.empty() && n_layers > 0) meta["n_heads"] = store.traces[0].layers[0].attention.size();
  write_container(path, kTraceMagic, meta, refs);
}

TraceStore import_traces(const std::string& path) {
  Container c = read_container(path, kTraceMagic, ErrorKind::CorruptArchive);
  TraceStore s;
  try {
    const json& m = c.meta;
    if (m.value("kind", "") != "trace_archive") fail(ErrorKind::CorruptArchive, "archive: not a trace archive");
    s.meta = m.at("run");
    const std::size_t L = m.at("n_layers").get<std::size_t>();
    const auto keys = m.at("keys");
    const auto lens = m.at("seq_lens");
    if (keys.size() != lens.size()) fail(ErrorKind::CorruptArchive, "archive: index lengths differ");
    std::vector<std::string> names = m.at("sites").get<std::vector<std::string>>();
    CaptureFlags cap;
    bool attention = false;
    for (const auto& n : names) {
      bool known = n == "attention";
      if (known) attention = true;
      for (const auto& sf : kSites)
        if (n == sf.name) {
          cap.*(sf.flag) = true;
          known = true;
        }
      if (!known) fail(ErrorKind::CorruptArchive, "archive: unknown site " + n);
    }
    cap.attention = attention;
    const std::size_t heads = attention ? m.at("n_heads").get<std::size_t>() : 0;
    auto take = [&](const std::string& key, std::size_t rows) -> MatrixF {
      auto it = c.tensors.find(key);
      if (it == c.tensors.end()) fail(ErrorKind::CorruptArchive, "archive: missing tensor " + key);
      if (it->second.matrix.rows() != rows) fail(ErrorKind::CorruptArchive, "archive: row count mismatch in " + key);
      return std::move(it->second.matrix);
    };
    for (std::size_t i = 0; i < keys.size(); ++i) {
      s.keys.emplace_back(keys[i].at(0).get<int>(), keys[i].at(1).get<int>());
      ForwardTrace t;
      t.seq_len = lens[i].get<std::size_t>();
      t.captured = cap;
      t.layers.resize(L);
      for (std::size_t l = 0; l < L; ++l) {
        for (const auto& sf : kSites)
          if (cap.*(sf.flag)) t.layers[l].*(sf.field) = take(tensor_key(i, l, sf.name), t.seq_len);
        for (std::size_t h = 0; h < heads; ++h)
          t.layers[l].attention.push_back(take(tensor_key(i, l, "attn" + std::to_string(h)), t.seq_len));
      }
      s.traces.push_back(std::move(t));
    }
  } catch (const json::exception& e) {
    fail(ErrorKind::CorruptArchive, std::string("archive: malformed index: ") + e.what());
  }
  return s;
}

void check_aligned(const TraceStore& a, const TraceStore& b) {
  if (a.keys != b.keys) fail(ErrorKind::AlignmentError, "trace archives cover different prompts");
  for (std::size_t i = 0; i < a.traces.size(); ++i)
    if (a.traces[i].seq_len != b.traces[i].seq_len || a.traces[i].layers.size() != b.traces[i].layers.size())
      fail(ErrorKind::AlignmentError, "trace archives disagree on shapes for prompt " + std::to_string(i));
}

}  // namespace qlens
