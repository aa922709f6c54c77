#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "artfix/tensor.hpp"

namespace artfix {

enum class ValueDomain { unit01, signed11, byte255 };

inline const char* domain_name(ValueDomain d) {
  switch (d) {
    case ValueDomain::unit01: return "unit01";
    case ValueDomain::signed11: return "signed11";
    case ValueDomain::byte255: return "byte255";
  }
  return "?";
}

inline double domain_low(ValueDomain d) { return d == ValueDomain::signed11 ? -1.0 : 0.0; }
inline double domain_high(ValueDomain d) { return d == ValueDomain::byte255 ? 255.0 : 1.0; }
inline double domain_range(ValueDomain d) { return domain_high(d) - domain_low(d); }

/// N x C x H x W image batch. Noisy diffusion intermediates are stored with
/// the domain of the clean data they were derived from and may leave its
/// range; check_range() is applied at I/O boundaries only.
struct ImageTensor {
  Tensor<double> values;
  ValueDomain domain = ValueDomain::signed11;

  ImageTensor() = default;
  ImageTensor(std::size_t n, std::size_t c, std::size_t h, std::size_t w,
              ValueDomain d = ValueDomain::signed11, double fill = 0.0)
      : values(Shape{n, c, h, w}, fill), domain(d) {
    if (n == 0 || h == 0 || w == 0) throw std::invalid_argument("image dimensions must be positive");
    if (c != 1 && c != 3) throw std::invalid_argument("image must have 1 or 3 channels");
  }
  ImageTensor(Tensor<double> v, ValueDomain d) : values(std::move(v)), domain(d) {
    if (values.rank() != 4) throw std::invalid_argument("image tensor must be rank 4 (NCHW)");
  }

  std::size_t batch() const { return values.dim(0); }
  std::size_t channels() const { return values.dim(1); }
  std::size_t height() const { return values.dim(2); }
  std::size_t width() const { return values.dim(3); }
  std::size_t plane() const { return height() * width(); }
  std::size_t size() const { return values.size(); }
  bool empty() const { return values.data.empty(); }

  double& at(std::size_t n, std::size_t c, std::size_t y, std::size_t x) {
    return values.data[((n * channels() + c) * height() + y) * width() + x];
  }
  double at(std::size_t n, std::size_t c, std::size_t y, std::size_t x) const {
    return values.data[((n * channels() + c) * height() + y) * width() + x];
  }

  bool same_shape(const ImageTensor& o) const { return values.shape == o.values.shape; }

  void check_range() const {
    const double lo = domain_low(domain), hi = domain_high(domain);
    for (double v : values.data)
      if (!(v >= lo && v <= hi))
        throw std::out_of_range(std::string("pixel value outside ") + domain_name(domain) + " range");
  }

  /// Affine conversion between value domains (no clamping).
  ImageTensor converted(ValueDomain to) const {
    if (to == domain) return *this;
    ImageTensor out = *this;
    out.domain = to;
    const double lo_from = domain_low(domain), r_from = domain_range(domain);
    const double lo_to = domain_low(to), r_to = domain_range(to);
    for (double& v : out.values.data) v = lo_to + (v - lo_from) / r_from * r_to;
    return out;
  }

  /// Single image n of the batch.
  ImageTensor slice(std::size_t n) const {
    ImageTensor out(1, channels(), height(), width(), domain);
    const std::size_t stride = channels() * plane();
    std::copy_n(values.data.begin() + static_cast<std::ptrdiff_t>(n * stride), stride,
                out.values.data.begin());
    return out;
  }

  friend bool operator==(const ImageTensor&, const ImageTensor&) = default;
};

/// Boolean H x W mask; true marks an artifact pixel.
class ArtifactMask {
 public:
  ArtifactMask() = default;
  ArtifactMask(std::size_t height, std::size_t width, bool fill = false)
      : height_(height), width_(width), bits_(height * width, fill ? 1 : 0) {}
  ArtifactMask(std::size_t height, std::size_t width, std::vector<std::uint8_t> bits)
      : height_(height), width_(width), bits_(std::move(bits)) {
    if (bits_.size() != height * width) throw std::invalid_argument("mask size mismatch");
    for (auto& b : bits_) b = b ? 1 : 0;
  }

  std::size_t height() const { return height_; }
  std::size_t width() const { return width_; }
  std::size_t size() const { return bits_.size(); }

  bool operator()(std::size_t y, std::size_t x) const { return bits_[y * width_ + x] != 0; }
  bool operator[](std::size_t i) const { return bits_[i] != 0; }
  void set(std::size_t y, std::size_t x, bool v = true) { bits_[y * width_ + x] = v ? 1 : 0; }
  void set(std::size_t i, bool v) { bits_[i] = v ? 1 : 0; }

  std::size_t count() const {
    return static_cast<std::size_t>(std::count(bits_.begin(), bits_.end(), std::uint8_t{1}));
  }
  double coverage() const { return bits_.empty() ? 0.0 : double(count()) / double(bits_.size()); }
  bool none() const { return count() == 0; }

  bool matches(const ImageTensor& img) const {
    return img.height() == height_ && img.width() == width_;
  }

  const std::vector<std::uint8_t>& bits() const { return bits_; }

  friend bool operator==(const ArtifactMask&, const ArtifactMask&) = default;

 private:
  std::size_t height_ = 0;
  std::size_t width_ = 0;
  std::vector<std::uint8_t> bits_;
};

inline double intersection_over_union(const ArtifactMask& a, const ArtifactMask& b) {
  if (a.size() != b.size()) throw std::invalid_argument("mask size mismatch");
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    inter += (a[i] && b[i]);
    uni += (a[i] || b[i]);
  }
  return uni == 0 ? 1.0 : double(inter) / double(uni);
}

}  // namespace artfix
