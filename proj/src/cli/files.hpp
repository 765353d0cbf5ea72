#pragma once
// Small file helpers shared by the pipeline and the report builder.

#include <filesystem>
#include <string>

#include "json.hpp"

namespace qlens {

void write_file(const std::filesystem::path& path, const std::string& content);
std::string read_text(const std::filesystem::path& path);
nlohmann::json read_json(const std::filesystem::path& path);
std::string file_sha256(const std::filesystem::path& path);

// CSV body plus a trailing "# manifest_sha256=<hex>" line.
std::string with_digest_footer(const std::string& csv, const std::string& digest);

}  // namespace qlens
