#include <cmath>

#include "quantlens/container.hpp"
#include "quantlens/error.hpp"
#include "quantlens/model.hpp"

namespace qlens {

namespace {
constexpr std::string_view kMagic = "QLCK1";
}

void save_checkpoint(const ModelBundle& model, const std::string& path) {
  std::vector<TensorRef> refs;
  model.weights.for_each([&](const std::string& n, const MatrixF& m) { refs.push_back({n, "weights", &m}); });
  for (const auto& [n, m] : model.codebook) refs.push_back({n, "codebook", &m});
  const nlohmann::json meta{{"config", model.config.to_json()}, {"metadata", model.metadata}};
  write_container(path, kMagic, meta, refs);
}

ModelBundle load_checkpoint(const std::string& path) {
  Container c = read_container(path, kMagic, ErrorKind::CorruptCheckpoint);
  ModelBundle b;
  try {
    b.config = ModelConfig::from_json(c.meta.at("config"));
    b.config.validate();
    b.metadata = c.meta.value("metadata", nlohmann::json::object());
  } catch (const Error& e) {
    fail(ErrorKind::CorruptCheckpoint, path + ": bad config: " + e.what());
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::CorruptCheckpoint, path + ": bad config: " + e.what());
  }
  b.weights = Weights<float>::zeros(b.config);
  b.weights.for_each([&](const std::string& n, MatrixF& m) {
    auto it = c.tensors.find(n);
    if (it == c.tensors.end() || it->second.section != "weights")
      fail(ErrorKind::CorruptCheckpoint, path + ": missing tensor '" + n + "'");
    const MatrixF& src = it->second.matrix;
    if (src.rows() != m.rows() || src.cols() != m.cols())
      fail(ErrorKind::CorruptCheckpoint, path + ": shape mismatch for '" + n + "': file has " + std::to_string(src.rows()) +
                                             "x" + std::to_string(src.cols()) + ", config implies " +
                                             std::to_string(m.rows()) + "x" + std::to_string(m.cols()));
    for (float x : src.values())
      if (!std::isfinite(x)) fail(ErrorKind::CorruptCheckpoint, path + ": non-finite value in '" + n + "'");
    m = std::move(it->second.matrix);
    c.tensors.erase(it);
  });
  for (auto& [n, t] : c.tensors) {
    if (t.section != "codebook") fail(ErrorKind::CorruptCheckpoint, path + ": unexpected tensor '" + n + "'");
    b.codebook.emplace(n, std::move(t.matrix));
  }
  return b;
}

}  // namespace qlens
