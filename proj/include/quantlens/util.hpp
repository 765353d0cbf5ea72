#pragma once

#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace qlens {

// Named RNG substream: the same (seed, name) pair always yields the same
// generator, and distinct names give independent streams.
std::mt19937_64 substream(std::uint64_t seed, std::string_view name);

std::string sha256_hex(std::span<const std::uint8_t> bytes);
std::string sha256_hex(std::string_view text);

// Incremental SHA-256 for large payloads.
class Sha256 {
 public:
  Sha256();
  ~Sha256();
  Sha256(const Sha256&) = delete;
  Sha256& operator=(const Sha256&) = delete;

  void update(const void* data, std::size_t len);
  void update(std::string_view s) { update(s.data(), s.size()); }
  std::string hex_digest();

 private:
  void* ctx_;
};

// Worker count from the explicit flag, then QUANTLENS_THREADS, then 1.
int resolve_threads(int requested);

// Runs fn(begin, end) over contiguous chunks of [0, n). Results must not
// depend on the chunking; callers write to disjoint slots.
void parallel_for(std::size_t n, int threads, const std::function<void(std::size_t, std::size_t)>& fn);

// Non-fatal diagnostics (clamped ranks, low captured energy, ...). Messages
// go to stderr and are kept so reports can embed them.
void warn(std::string_view message);
std::vector<std::string> drain_warnings();

}  // namespace qlens
