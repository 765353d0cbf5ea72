#pragma once
// Binary tensor container shared by model checkpoints and trace archives.
//
// Layout: 5-byte magic | u64 LE header length | 64 hex chars SHA-256 of the
// header | JSON header | zero padding | float32 LE tensors, each at a
// 64-byte-aligned absolute offset. The header carries the tensor index
// (name, section, shape, offset, length) and a SHA-256 of the payload.

#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "quantlens/error.hpp"
#include "quantlens/numkit.hpp"

namespace qlens {

struct TensorRef {
  std::string name;
  std::string section;
  const MatrixF* matrix;
};

struct ContainerTensor {
  std::string section;
  MatrixF matrix;
};

struct Container {
  nlohmann::json meta;
  std::vector<std::string> order;  // tensor names in file order
  std::map<std::string, ContainerTensor> tensors;
};

inline constexpr int kContainerFormatVersion = 1;

void write_container(const std::string& path, std::string_view magic, const nlohmann::json& meta,
                     const std::vector<TensorRef>& tensors);
// Any structural problem raises `corrupt` (CorruptCheckpoint or CorruptArchive).
Container read_container(const std::string& path, std::string_view magic, ErrorKind corrupt);

}  // namespace qlens
