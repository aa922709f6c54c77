#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "artfix/image.hpp"
#include "artfix/random.hpp"

namespace artfix {

// ------------------------------------------------------------ detection

struct DetectorParams {
  double dark_luma_threshold = 0.4;
  double saturation_threshold = 0.75;
  int dilation_radius = 1;
  int min_component_area = 12;

  void validate() const {
    if (!(dark_luma_threshold > 0 && dark_luma_threshold < 1))
      throw std::invalid_argument("dark_luma_threshold must lie in (0,1)");
    if (!(saturation_threshold > 0 && saturation_threshold < 1))
      throw std::invalid_argument("saturation_threshold must lie in (0,1)");
    if (dilation_radius < 0 || min_component_area < 0)
      throw std::invalid_argument("dilation_radius and min_component_area must be >= 0");
  }
};

namespace morph {

/// Binary dilation with a disk of the given radius.
inline ArtifactMask dilate(const ArtifactMask& m, int r) {
  if (r <= 0) return m;
  const long H = long(m.height()), W = long(m.width());
  ArtifactMask out(m.height(), m.width());
  for (long y = 0; y < H; ++y)
    for (long x = 0; x < W; ++x) {
      if (!m(std::size_t(y), std::size_t(x))) continue;
      for (long dy = -r; dy <= r; ++dy)
        for (long dx = -r; dx <= r; ++dx) {
          if (dy * dy + dx * dx > long(r) * r) continue;
          const long yy = y + dy, xx = x + dx;
          if (yy >= 0 && xx >= 0 && yy < H && xx < W) out.set(std::size_t(yy), std::size_t(xx));
        }
    }
  return out;
}

/// Binary erosion with a disk; pixels beyond the border count as set.
inline ArtifactMask erode(const ArtifactMask& m, int r) {
  if (r <= 0) return m;
  const long H = long(m.height()), W = long(m.width());
  ArtifactMask out(m.height(), m.width());
  for (long y = 0; y < H; ++y)
    for (long x = 0; x < W; ++x) {
      bool keep = true;
      for (long dy = -r; dy <= r && keep; ++dy)
        for (long dx = -r; dx <= r; ++dx) {
          if (dy * dy + dx * dx > long(r) * r) continue;
          const long yy = y + dy, xx = x + dx;
          if (yy >= 0 && xx >= 0 && yy < H && xx < W && !m(std::size_t(yy), std::size_t(xx))) {
            keep = false;
            break;
          }
        }
      out.set(std::size_t(y), std::size_t(x), keep);
    }
  return out;
}

inline ArtifactMask close(const ArtifactMask& m, int r) { return erode(dilate(m, r), r); }

/// Drops 8-connected components smaller than min_area pixels.
inline ArtifactMask remove_small_components(const ArtifactMask& m, std::size_t min_area) {
  if (min_area <= 1) return m;
  const std::size_t H = m.height(), W = m.width();
  ArtifactMask out(H, W);
  std::vector<std::uint8_t> seen(H * W, 0);
  std::vector<std::size_t> stack, comp;
  for (std::size_t start = 0; start < H * W; ++start) {
    if (!m[start] || seen[start]) continue;
    comp.clear();
    stack.assign(1, start);
    seen[start] = 1;
    while (!stack.empty()) {
      const std::size_t p = stack.back();
      stack.pop_back();
      comp.push_back(p);
      const long y = long(p / W), x = long(p % W);
      for (long dy = -1; dy <= 1; ++dy)
        for (long dx = -1; dx <= 1; ++dx) {
          const long yy = y + dy, xx = x + dx;
          if (yy < 0 || xx < 0 || yy >= long(H) || xx >= long(W)) continue;
          const std::size_t q = std::size_t(yy) * W + std::size_t(xx);
          if (m[q] && !seen[q]) {
            seen[q] = 1;
            stack.push_back(q);
          }
        }
    }
    if (comp.size() >= min_area)
      for (std::size_t p : comp) out.set(p, true);
  }
  return out;
}

}  // namespace morph

struct PixelHsv {
  double value;       // max(r, g, b)
  double saturation;  // (max - min) / max
};

inline PixelHsv pixel_hsv(double r, double g, double b) {
  const double mx = std::max({r, g, b}), mn = std::min({r, g, b});
  return {mx, mx > 0 ? (mx - mn) / mx : 0.0};
}

/// Per-pixel predicate: HSV value below the dark threshold or saturation
/// above the saturation threshold.
inline ArtifactMask threshold_predicate(const ImageTensor& x, const DetectorParams& p) {
  p.validate();
  if (x.empty()) throw std::invalid_argument("detect_artifacts: empty image");
  if (x.batch() != 1) throw std::invalid_argument("detect_artifacts: expects a single image");
  const ImageTensor u = x.converted(ValueDomain::unit01);
  const std::size_t HW = u.plane(), C = u.channels();
  ArtifactMask m(u.height(), u.width());
  for (std::size_t i = 0; i < HW; ++i) {
    const double r = u.values[i];
    const double g = C == 3 ? u.values[HW + i] : r;
    const double b = C == 3 ? u.values[2 * HW + i] : r;
    const PixelHsv hsv = pixel_hsv(r, g, b);
    m.set(i, hsv.value < p.dark_luma_threshold || hsv.saturation > p.saturation_threshold);
  }
  return m;
}

/// Threshold detection followed by closing and dilation (radius
/// dilation_radius) and removal of components below min_component_area.
inline ArtifactMask detect_artifacts(const ImageTensor& x, const DetectorParams& p = {}) {
  ArtifactMask m = threshold_predicate(x, p);
  m = morph::close(m, p.dilation_radius);
  m = morph::remove_small_components(m, std::size_t(p.min_component_area));
  return morph::dilate(m, p.dilation_radius);
}

// ------------------------------------------------------------ synthesis

enum class ArtifactKind { fold, bubble, ink, illumination };

inline const char* artifact_kind_name(ArtifactKind k) {
  switch (k) {
    case ArtifactKind::fold: return "fold";
    case ArtifactKind::bubble: return "bubble";
    case ArtifactKind::ink: return "ink";
    case ArtifactKind::illumination: return "illumination";
  }
  return "?";
}

inline ArtifactKind parse_artifact_kind(const std::string& s) {
  if (s == "fold") return ArtifactKind::fold;
  if (s == "bubble") return ArtifactKind::bubble;
  if (s == "ink") return ArtifactKind::ink;
  if (s == "illumination") return ArtifactKind::illumination;
  throw std::invalid_argument("unknown artifact kind '" + s + "' (fold, bubble, ink, illumination)");
}

/// Geometry fields left unset are drawn from the seed. Coordinates are in
/// pixels with (0, 0) at the top-left corner of the top-left pixel.
struct SyntheticArtifactSpec {
  ArtifactKind kind = ArtifactKind::fold;
  std::uint64_t seed = 0;
  double intensity = 0.8;
  /// fold: spline control points (x, y) and band thickness.
  std::vector<std::array<double, 2>> control_points;
  std::optional<double> thickness;
  /// bubble and ink: centre and radius (ink: blob extent).
  std::optional<std::array<double, 2>> center;
  std::optional<double> radius;
  /// illumination: gradient direction in radians.
  std::optional<double> direction;
};

struct SynthesisResult {
  ImageTensor corrupted;
  ArtifactMask truth;
};

namespace detail {

inline double dist_to_segment(double px, double py, double ax, double ay, double bx, double by) {
  const double vx = bx - ax, vy = by - ay, wx = px - ax, wy = py - ay;
  const double len2 = vx * vx + vy * vy;
  const double t = len2 > 0 ? std::clamp((wx * vx + wy * vy) / len2, 0.0, 1.0) : 0.0;
  const double dx = px - (ax + t * vx), dy = py - (ay + t * vy);
  return std::sqrt(dx * dx + dy * dy);
}

/// Catmull-Rom spline through the control points, sampled densely.
inline std::vector<std::array<double, 2>> sample_spline(const std::vector<std::array<double, 2>>& cp) {
  std::vector<std::array<double, 2>> pts;
  if (cp.size() < 2) return cp;
  const int per_segment = 24;
  for (std::size_t i = 0; i + 1 < cp.size(); ++i) {
    const auto& p0 = cp[i == 0 ? 0 : i - 1];
    const auto& p1 = cp[i];
    const auto& p2 = cp[i + 1];
    const auto& p3 = cp[std::min(i + 2, cp.size() - 1)];
    for (int s = 0; s < per_segment; ++s) {
      const double t = double(s) / per_segment, t2 = t * t, t3 = t2 * t;
      std::array<double, 2> q{};
      for (int k = 0; k < 2; ++k)
        q[k] = 0.5 * (2 * p1[k] + (-p0[k] + p2[k]) * t + (2 * p0[k] - 5 * p1[k] + 4 * p2[k] - p3[k]) * t2 +
                      (-p0[k] + 3 * p1[k] - 3 * p2[k] + p3[k]) * t3);
      pts.push_back(q);
    }
  }
  pts.push_back(cp.back());
  return pts;
}

struct PixelEditor {
  const ImageTensor& src;
  ImageTensor& dst;
  ArtifactMask& truth;

  std::array<double, 3> rgb(std::size_t i) const {
    const std::size_t HW = src.plane();
    const double lo = domain_low(src.domain), r = domain_range(src.domain);
    std::array<double, 3> c{};
    for (std::size_t k = 0; k < 3; ++k) {
      const std::size_t ch = src.channels() == 3 ? k : 0;
      c[k] = (src.values[ch * HW + i] - lo) / r;
    }
    return c;
  }
  void write(std::size_t i, const std::array<double, 3>& c) {
    const std::size_t HW = src.plane();
    const double lo = domain_low(src.domain), r = domain_range(src.domain);
    if (src.channels() == 3) {
      for (std::size_t k = 0; k < 3; ++k) dst.values[k * HW + i] = lo + std::clamp(c[k], 0.0, 1.0) * r;
    } else {
      const double y = 0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2];
      dst.values[i] = lo + std::clamp(y, 0.0, 1.0) * r;
    }
    truth.set(i, true);
  }
};

}  // namespace detail

/// Paints one synthetic artifact. Pixels outside the returned truth mask
/// are copied from x unchanged.
inline SynthesisResult synthesize_artifact(const ImageTensor& x, const SyntheticArtifactSpec& spec) {
  if (x.empty() || x.batch() != 1) throw std::invalid_argument("synthesize_artifact: expects a single image");
  if (!(spec.intensity > 0 && spec.intensity <= 1)) throw std::invalid_argument("intensity must lie in (0,1]");
  const double H = double(x.height()), W = double(x.width()), side = std::min(H, W);
  auto inside = [&](const std::array<double, 2>& p) { return p[0] >= 0 && p[0] <= W && p[1] >= 0 && p[1] <= H; };

  Rng rng(spec.seed);
  SynthesisResult r{x, ArtifactMask(x.height(), x.width())};
  detail::PixelEditor ed{x, r.corrupted, r.truth};
  const double a = spec.intensity;
  const std::size_t HW = x.plane();

  switch (spec.kind) {
    case ArtifactKind::fold: {
      auto cp = spec.control_points;
      if (cp.empty()) {
        // Enter on the left or top edge, leave on the opposite one.
        const bool horizontal = rng.uniform() < 0.5;
        for (int k = 0; k < 4; ++k) {
          const double u = double(k) / 3.0;
          const double along = u * (horizontal ? W : H);
          const double across = (0.2 + 0.6 * rng.uniform()) * (horizontal ? H : W);
          cp.push_back(horizontal ? std::array<double, 2>{along, across} : std::array<double, 2>{across, along});
        }
      }
      if (cp.size() < 2) throw std::invalid_argument("fold needs at least two control points");
      for (const auto& p : cp)
        if (!inside(p)) throw std::out_of_range("fold control point outside the image");
      const double thick = spec.thickness.value_or(side * (0.08 + 0.06 * rng.uniform()));
      if (!(thick > 0 && thick <= side)) throw std::out_of_range("fold thickness outside (0, image side]");
      const auto path = detail::sample_spline(cp);
      const double half = thick / 2;
      for (std::size_t i = 0; i < HW; ++i) {
        const double px = double(i % x.width()) + 0.5, py = double(i / x.width()) + 0.5;
        double d = std::numeric_limits<double>::infinity();
        for (std::size_t k = 0; k + 1 < path.size(); ++k)
          d = std::min(d, detail::dist_to_segment(px, py, path[k][0], path[k][1], path[k + 1][0], path[k + 1][1]));
        if (d > half) continue;
        const double core = 1.0 - 0.3 * (d / half) * (d / half);
        const double f = 1.0 - 0.9 * a * core;
        auto c = ed.rgb(i);
        // Doubled tissue: darker and shifted toward haematoxylin purple.
        c = {c[0] * f * 0.9, c[1] * f * 0.75, c[2] * f};
        ed.write(i, c);
      }
      break;
    }
    case ArtifactKind::bubble:
    case ArtifactKind::ink: {
      const bool bubble = spec.kind == ArtifactKind::bubble;
      const std::array<double, 2> c0 = spec.center.value_or(
          std::array<double, 2>{W * (0.3 + 0.4 * rng.uniform()), H * (0.3 + 0.4 * rng.uniform())});
      const double rad = spec.radius.value_or(side * (0.12 + 0.12 * rng.uniform()));
      if (!inside(c0)) throw std::out_of_range("artifact centre outside the image");
      if (!(rad > 0 && rad <= side)) throw std::out_of_range("artifact radius outside (0, image side]");
      if (bubble) {
        const double rim = std::max(1.5, 0.15 * rad);
        for (std::size_t i = 0; i < HW; ++i) {
          const double dx = double(i % x.width()) + 0.5 - c0[0], dy = double(i / x.width()) + 0.5 - c0[1];
          const double d = std::sqrt(dx * dx + dy * dy);
          if (d > rad) continue;
          auto c = ed.rgb(i);
          if (d >= rad - rim) {
            for (auto& v : c) v *= 1.0 - 0.6 * a;
          } else {
            const std::array<double, 3> glass{0.93, 0.94, 0.97};
            for (std::size_t k = 0; k < 3; ++k) c[k] += (glass[k] - c[k]) * 0.8 * a;
          }
          ed.write(i, c);
        }
      } else {
        static const std::array<std::array<double, 3>, 3> pens{
            {{0.10, 0.25, 0.75}, {0.08, 0.50, 0.22}, {0.08, 0.08, 0.10}}};
        const auto& pen = pens[std::size_t(rng.uniform_int(0, 2))];
        const int lobes = rng.uniform_int(3, 5);
        struct Lobe { double cx, cy, rx, ry, cs, sn; };
        std::vector<Lobe> ls;
        for (int k = 0; k < lobes; ++k) {
          const double ang = 2 * M_PI * rng.uniform(), off = 0.5 * rad * rng.uniform(), rot = M_PI * rng.uniform();
          ls.push_back({c0[0] + off * std::cos(ang), c0[1] + off * std::sin(ang), rad * (0.4 + 0.5 * rng.uniform()),
                        rad * (0.25 + 0.35 * rng.uniform()), std::cos(rot), std::sin(rot)});
        }
        const double alpha = 0.85 * a;
        for (std::size_t i = 0; i < HW; ++i) {
          const double px = double(i % x.width()) + 0.5, py = double(i / x.width()) + 0.5;
          bool hit = false;
          for (const auto& l : ls) {
            const double dx = px - l.cx, dy = py - l.cy;
            const double u = (dx * l.cs + dy * l.sn) / l.rx, v = (-dx * l.sn + dy * l.cs) / l.ry;
            if (u * u + v * v <= 1.0) {
              hit = true;
              break;
            }
          }
          if (!hit) continue;
          auto c = ed.rgb(i);
          for (std::size_t k = 0; k < 3; ++k) c[k] = (1 - alpha) * c[k] + alpha * pen[k];
          ed.write(i, c);
        }
      }
      break;
    }
    case ArtifactKind::illumination: {
      const double theta = spec.direction.value_or(2 * M_PI * rng.uniform());
      if (!std::isfinite(theta)) throw std::out_of_range("illumination direction must be finite");
      const double cs = std::cos(theta), sn = std::sin(theta), half_diag = 0.5 * std::sqrt(H * H + W * W);
      for (std::size_t i = 0; i < HW; ++i) {
        const double px = double(i % x.width()) + 0.5 - W / 2, py = double(i / x.width()) + 0.5 - H / 2;
        const double proj = std::clamp((px * cs + py * sn) / half_diag, -1.0, 1.0);
        const double mult = 1.0 - 0.5 * a * (proj + 1.0) / 2.0;
        if (std::abs(mult - 1.0) <= 0.01) continue;
        auto c = ed.rgb(i);
        for (auto& v : c) v *= mult;
        ed.write(i, c);
      }
      break;
    }
  }
  return r;
}

}  // namespace artfix
