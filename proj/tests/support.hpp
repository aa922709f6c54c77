#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>

#include "artfix/image.hpp"

namespace artfix::test {

inline ImageTensor random_image(std::size_t c, std::size_t h, std::size_t w, std::uint64_t seed,
                                ValueDomain d = ValueDomain::signed11, std::size_t n = 1) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(domain_low(d), domain_high(d));
  ImageTensor x(n, c, h, w, d);
  for (double& v : x.values.data) v = u(rng);
  return x;
}

inline ImageTensor gaussian_like(const ImageTensor& like, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0, 1);
  ImageTensor x = like;
  for (double& v : x.values.data) v = g(rng);
  return x;
}

inline ArtifactMask random_mask(std::size_t h, std::size_t w, std::uint64_t seed, double p = 0.3) {
  std::mt19937_64 rng(seed);
  std::bernoulli_distribution b(p);
  ArtifactMask m(h, w);
  for (std::size_t i = 0; i < h * w; ++i) m.set(i, b(rng));
  return m;
}

// Fresh empty directory under the system temp dir, removed on destruction.
struct TempDir {
  std::filesystem::path path;
  explicit TempDir(const std::string& tag) {
    std::random_device rd;
    path = std::filesystem::temp_directory_path() / ("artfix_" + tag + "_" + std::to_string(rd()));
    std::filesystem::remove_all(path);
    std::filesystem::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  std::filesystem::path operator/(const std::string& name) const { return path / name; }
};

}  // namespace artfix::test
