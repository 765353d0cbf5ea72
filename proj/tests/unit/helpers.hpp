#pragma once

#include <filesystem>
#include <random>
#include <string>

#include "doctest.h"
#include "quantlens/corpus.hpp"
#include "quantlens/error.hpp"
#include "quantlens/model.hpp"
#include "quantlens/numkit.hpp"

namespace qtest {

template <typename F>
qlens::ErrorKind kind_of(F&& f) {
  try {
    f();
  } catch (const qlens::Error& e) {
    return e.kind();
  }
  FAIL("expected qlens::Error");
  return qlens::ErrorKind::Io;
}

inline qlens::Matrix random_matrix(std::size_t r, std::size_t c, std::uint64_t seed, double scale = 1.0) {
  std::mt19937_64 g(seed);
  std::normal_distribution<double> n(0.0, scale);
  qlens::Matrix m(r, c);
  for (auto& v : m.values()) v = n(g);
  return m;
}

inline qlens::ModelConfig tiny_config(int vocab = 64) {
  qlens::ModelConfig c;
  c.n_layers = 2;
  c.d_model = 16;
  c.n_heads = 2;
  c.head_dim = 8;
  c.d_ff = 24;
  c.vocab_size = vocab;
  c.max_seq_len = 12;
  return c;
}

// Small world plus a briefly trained model; shared by the analysis tests.
struct Fixture {
  qlens::World world;
  qlens::ModelBundle model;
  std::vector<int> facts;
};

const Fixture& trained_fixture();

inline std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("quantlens_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace qtest
