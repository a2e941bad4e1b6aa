#pragma once

#include <cstdint>
#include <random>

#include "ems/tensor.hpp"

namespace ems {

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  float normal(float mean = 0.0f, float stddev = 1.0f) {
    return std::normal_distribution<float>(mean, stddev)(engine_);
  }
  double uniform(double lo = 0.0, double hi = 1.0) {
    return std::uniform_real_distribution<double>(lo, hi)(engine_);
  }
  int uniform_int(int lo, int hi) {  // inclusive
    return std::uniform_int_distribution<int>(lo, hi)(engine_);
  }
  std::uint64_t next() { return engine_(); }
  std::mt19937_64& engine() { return engine_; }

  Tensor normal_tensor(Shape shape, float mean = 0.0f, float stddev = 1.0f) {
    Tensor t(std::move(shape));
    for (auto& v : t.data()) v = normal(mean, stddev);
    return t;
  }

 private:
  std::mt19937_64 engine_;
};

}  // namespace ems
