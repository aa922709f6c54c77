#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <vector>

#include "artfix/image.hpp"
#include "artfix/random.hpp"

namespace artfix {

namespace detail {

/// Bilinear value noise on a cells x cells lattice, sampled at size x size.
inline std::vector<double> value_noise(Rng& rng, std::size_t size, std::size_t cells) {
  std::vector<double> lattice((cells + 1) * (cells + 1));
  for (double& v : lattice) v = rng.uniform();
  std::vector<double> out(size * size);
  const double scale = double(cells) / double(size);
  for (std::size_t y = 0; y < size; ++y)
    for (std::size_t x = 0; x < size; ++x) {
      const double fy = (double(y) + 0.5) * scale, fx = (double(x) + 0.5) * scale;
      const std::size_t iy = std::min(std::size_t(fy), cells - 1), ix = std::min(std::size_t(fx), cells - 1);
      double ty = fy - double(iy), tx = fx - double(ix);
      ty = ty * ty * (3 - 2 * ty);
      tx = tx * tx * (3 - 2 * tx);
      auto L = [&](std::size_t a, std::size_t b) { return lattice[a * (cells + 1) + b]; };
      out[y * size + x] = (1 - ty) * ((1 - tx) * L(iy, ix) + tx * L(iy, ix + 1)) +
                          ty * ((1 - tx) * L(iy + 1, ix) + tx * L(iy + 1, ix + 1));
    }
  return out;
}

}  // namespace detail

/// One H&E-like tissue patch in unit01: eosin stroma with fibre streaks,
/// pale lumina and scattered haematoxylin nuclei. Deterministic in seed.
inline ImageTensor tissue_texture(std::size_t size, std::uint64_t seed) {
  if (size < 8) throw std::invalid_argument("tissue_texture: size must be >= 8");
  Rng rng(seed ^ 0x9e3779b97f4a7c15ull);
  const std::size_t HW = size * size;
  const auto tone = detail::value_noise(rng, size, 4);
  const auto lumen = detail::value_noise(rng, size, 3);
  const auto grain = detail::value_noise(rng, size, std::max<std::size_t>(8, size / 4));

  const std::array<double, 3> stroma_a{0.91, 0.62, 0.76}, stroma_b{0.96, 0.78, 0.87};
  const std::array<double, 3> space{0.96, 0.93, 0.96}, nucleus{0.46, 0.30, 0.62};
  const double fibre_angle = M_PI * rng.uniform(), fibre_freq = 0.35 + 0.3 * rng.uniform();
  const double fc = std::cos(fibre_angle), fs = std::sin(fibre_angle);
  const double lumen_cut = 0.62 + 0.2 * rng.uniform();

  ImageTensor img(1, 3, size, size, ValueDomain::unit01);
  std::vector<double> lum_w(HW);
  for (std::size_t i = 0; i < HW; ++i) {
    const double x = double(i % size), y = double(i / size);
    const double fibre = 0.5 + 0.5 * std::sin(fibre_freq * (x * fc + y * fs) + 6.0 * grain[i]);
    const double mix = std::clamp(0.6 * tone[i] + 0.4 * fibre, 0.0, 1.0);
    lum_w[i] = std::clamp((lumen[i] - lumen_cut) / 0.06, 0.0, 1.0);
    for (std::size_t c = 0; c < 3; ++c) {
      const double s = stroma_a[c] + (stroma_b[c] - stroma_a[c]) * mix;
      img.values[c * HW + i] = s + (space[c] - s) * lum_w[i];
    }
  }

  const double density = 0.004 + 0.006 * rng.uniform();
  const int nuclei = int(std::round(density * double(HW)));
  for (int k = 0; k < nuclei; ++k) {
    const double cx = rng.uniform() * double(size), cy = rng.uniform() * double(size);
    const std::size_t ci = std::min(std::size_t(cy), size - 1) * size + std::min(std::size_t(cx), size - 1);
    if (lum_w[ci] > 0.5) continue;
    const double rx = 1.5 + 2.0 * rng.uniform(), ry = rx * (0.6 + 0.4 * rng.uniform());
    const double rot = M_PI * rng.uniform(), cr = std::cos(rot), sr = std::sin(rot);
    const double shade = 0.9 + 0.2 * rng.uniform();
    const long x0 = long(cx - rx - 1), x1 = long(cx + rx + 1), y0 = long(cy - rx - 1), y1 = long(cy + rx + 1);
    for (long y = std::max(0L, y0); y <= std::min(long(size) - 1, y1); ++y)
      for (long x = std::max(0L, x0); x <= std::min(long(size) - 1, x1); ++x) {
        const double dx = double(x) + 0.5 - cx, dy = double(y) + 0.5 - cy;
        const double u = (dx * cr + dy * sr) / rx, v = (-dx * sr + dy * cr) / ry;
        const double r2 = u * u + v * v;
        if (r2 > 1.0) continue;
        // Soft edge, slightly darker chromatin toward the rim.
        const double a = std::clamp((1.0 - r2) * 3.0, 0.0, 1.0);
        const double rim = 0.92 + 0.08 * (1.0 - r2);
        const std::size_t i = std::size_t(y) * size + std::size_t(x);
        for (std::size_t c = 0; c < 3; ++c) {
          double& p = img.values[c * HW + i];
          p = (1 - a) * p + a * std::min(1.0, nucleus[c] * shade * rim);
        }
      }
  }

  for (double& v : img.values.data) v = std::clamp(v + 0.015 * rng.normal(), 0.0, 1.0);
  return img;
}

/// count textures stacked as individual images.
inline std::vector<ImageTensor> tissue_corpus(std::size_t count, std::size_t size, std::uint64_t seed) {
  std::vector<ImageTensor> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) out.push_back(tissue_texture(size, seed * 1000003ull + i));
  return out;
}

}  // namespace artfix
