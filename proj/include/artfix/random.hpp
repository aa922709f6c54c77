#pragma once

#include <cstdint>
#include <random>
#include <sstream>
#include <string>

#include "artfix/image.hpp"

namespace artfix {

/// Seeded random stream. The full state (engine plus the cached normal
/// deviate) round-trips through state()/restore().
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  double normal() { return normal_(engine_); }
  double uniform() { return uniform_(engine_); }
  /// Uniform integer in [lo, hi].
  int uniform_int(int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(engine_); }

  std::mt19937_64& engine() { return engine_; }

  template <class T>
  void fill_normal(std::vector<T>& v) {
    for (auto& x : v) x = static_cast<T>(normal());
  }

  ImageTensor normal_like(const ImageTensor& like) {
    ImageTensor out = like;
    fill_normal(out.values.data);
    return out;
  }

  std::string state() const {
    std::ostringstream os;
    os << engine_ << ' ' << normal_ << ' ' << uniform_;
    return os.str();
  }

  void restore(const std::string& s) {
    std::istringstream is(s);
    is >> engine_ >> normal_ >> uniform_;
    if (!is) throw std::invalid_argument("malformed rng state");
  }

 private:
  std::mt19937_64 engine_;
  std::normal_distribution<double> normal_{0.0, 1.0};
  std::uniform_real_distribution<double> uniform_{0.0, 1.0};
};

}  // namespace artfix
