#pragma once

#include <cstdint>
#include <random>
#include <string_view>

#include "clipmap/tensor.hpp"

namespace clipmap {

// Mixes a master seed with a stream name and index so independent components
// (data, model, maps, shuffle, ...) draw from decorrelated generators.
std::uint64_t derive_seed(std::uint64_t seed, std::string_view stream, std::uint64_t index = 0);

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}
  static Rng stream(std::uint64_t seed, std::string_view name, std::uint64_t index = 0) {
    return Rng(derive_seed(seed, name, index));
  }

  Real normal(Real mean = 0, Real stddev = 1) {
    return stddev == 0 ? mean : std::normal_distribution<Real>(mean, stddev)(engine_);
  }
  Real uniform() { return std::uniform_real_distribution<Real>(0, 1)(engine_); }
  std::uint64_t below(std::uint64_t n) { return std::uniform_int_distribution<std::uint64_t>(0, n - 1)(engine_); }

  void fill_normal(Tensor& t, Real stddev) {
    for (Real& v : t.data()) v = normal(0, stddev);
  }

  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
};

}  // namespace clipmap
