#include "quantlens/container.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "quantlens/util.hpp"

namespace qlens {

using nlohmann::json;

static_assert(std::endian::native == std::endian::little, "container IO assumes a little-endian host");

namespace {

constexpr std::size_t kAlign = 64;
constexpr std::size_t kDigestLen = 64;

std::size_t align_up(std::size_t x) { return (x + kAlign - 1) / kAlign * kAlign; }

}  // namespace

void write_container(const std::string& path, std::string_view magic, const json& meta,
                     const std::vector<TensorRef>& tensors) {
  // Offsets depend on header length, which depends on offsets; iterate until stable.
  json index = json::array();
  Sha256 payload;
  for (const auto& t : tensors) payload.update(t.matrix->data(), t.matrix->size() * sizeof(float));
  const std::string payload_digest = payload.hex_digest();

  std::string header;
  std::size_t data_start = 0;
  for (int attempt = 0; attempt < 8; ++attempt) {
    index = json::array();
    std::size_t off = data_start;
    for (const auto& t : tensors) {
      const std::size_t len = t.matrix->size() * sizeof(float);
      index.push_back(json{{"name", t.name},
                           {"section", t.section},
                           {"shape", {t.matrix->rows(), t.matrix->cols()}},
                           {"offset", off},
                           {"length", len}});
      off = align_up(off + len);
    }
    const json h{{"format_version", kContainerFormatVersion},
                 {"meta", meta},
                 {"tensors", index},
                 {"payload_sha256", payload_digest}};
    header = h.dump();
    const std::size_t start = align_up(magic.size() + 8 + kDigestLen + header.size());
    if (start == data_start) break;
    data_start = start;
  }

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorKind::Io, "cannot open '" + path + "' for writing");
  out.write(magic.data(), static_cast<std::streamsize>(magic.size()));
  const std::uint64_t hlen = header.size();
  out.write(reinterpret_cast<const char*>(&hlen), 8);
  const std::string hdig = sha256_hex(header);
  out.write(hdig.data(), kDigestLen);
  out.write(header.data(), static_cast<std::streamsize>(header.size()));
  std::size_t pos = magic.size() + 8 + kDigestLen + header.size();
  static const char kZeros[kAlign] = {};
  for (const auto& t : tensors) {
    const std::size_t target = align_up(pos);
    out.write(kZeros, static_cast<std::streamsize>(target - pos));
    const std::size_t len = t.matrix->size() * sizeof(float);
    out.write(reinterpret_cast<const char*>(t.matrix->data()), static_cast<std::streamsize>(len));
    pos = target + len;
  }
  if (!out) fail(ErrorKind::Io, "write to '" + path + "' failed");
}

Container read_container(const std::string& path, std::string_view magic, ErrorKind corrupt) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::NotFound, "cannot open '" + path + "'");
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const std::size_t pre = magic.size() + 8 + kDigestLen;
  if (bytes.size() < pre) fail(corrupt, path + ": truncated preamble");
  if (std::string_view(bytes).substr(0, magic.size()) != magic) fail(corrupt, path + ": bad magic");
  std::uint64_t hlen = 0;
  std::memcpy(&hlen, bytes.data() + magic.size(), 8);
  if (hlen > bytes.size() - pre) fail(corrupt, path + ": truncated header");
  const std::string header = bytes.substr(pre, hlen);
  if (sha256_hex(header) != bytes.substr(magic.size() + 8, kDigestLen)) fail(corrupt, path + ": header checksum mismatch");

  json h;
  try {
    h = json::parse(header);
  } catch (const json::exception& e) {
    fail(corrupt, path + ": malformed header: " + e.what());
  }
  Container c;
  Sha256 payload;
  try {
    if (h.at("format_version").get<int>() != kContainerFormatVersion) fail(corrupt, path + ": unsupported format version");
    c.meta = h.at("meta");
    for (const auto& t : h.at("tensors")) {
      const std::string name = t.at("name");
      const std::size_t rows = t.at("shape").at(0), cols = t.at("shape").at(1);
      const std::size_t off = t.at("offset"), len = t.at("length");
      if (len != rows * cols * sizeof(float)) fail(corrupt, path + ": tensor '" + name + "' length disagrees with shape");
      if (off % kAlign != 0 || off < pre + hlen) fail(corrupt, path + ": tensor '" + name + "' misaligned");
      if (off > bytes.size() || len > bytes.size() - off) fail(corrupt, path + ": tensor '" + name + "' truncated");
      MatrixF m(rows, cols);
      std::memcpy(m.data(), bytes.data() + off, len);
      payload.update(bytes.data() + off, len);
      if (c.tensors.count(name)) fail(corrupt, path + ": duplicate tensor '" + name + "'");
      c.order.push_back(name);
      c.tensors.emplace(name, ContainerTensor{t.at("section"), std::move(m)});
    }
    if (payload.hex_digest() != h.at("payload_sha256").get<std::string>()) fail(corrupt, path + ": payload checksum mismatch");
  } catch (const json::exception& e) {
    fail(corrupt, path + ": malformed header: " + e.what());
  }
  return c;
}

}  // namespace qlens
