#pragma once

#include <algorithm>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <utility>
#include <vector>

#include "artfix/denoiser.hpp"
#include "artfix/diffusion.hpp"
#include "artfix/image.hpp"
#include "artfix/random.hpp"

namespace artfix {

/// x_t^in = forward_sample(x0, t, eps) on clean pixels, prev_out on masked pixels.
/// The mask is broadcast over channels and batch.
inline ImageTensor compose_step_input(const ImageTensor& x0, const ImageTensor& prev_out, const ArtifactMask& m,
                                      int t, const ImageTensor& eps, const NoiseSchedule& s) {
  detail::require_same(x0, prev_out, "compose_step_input");
  if (!m.matches(x0)) throw std::invalid_argument("compose_step_input: mask does not match image");
  ImageTensor out = forward_sample(x0, t, eps, s);
  const std::size_t plane = x0.plane(), planes = x0.batch() * x0.channels();
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t i = 0; i < plane; ++i)
      if (m[i]) out.values[p * plane + i] = prev_out.values[p * plane + i];
  return out;
}

/// x0 on clean pixels, content on masked pixels.
inline ImageTensor compose_final(const ImageTensor& x0, const ImageTensor& content, const ArtifactMask& m) {
  detail::require_same(x0, content, "compose_final");
  ImageTensor out = x0;
  const std::size_t plane = x0.plane(), planes = x0.batch() * x0.channels();
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t i = 0; i < plane; ++i)
      if (m[i]) out.values[p * plane + i] = content.values[p * plane + i];
  return out;
}

enum class MaskInit { noise, diffused };

struct RestoreOptions {
  /// Extra forward/reverse resampling rounds per step; 0 runs a single sweep.
  int jumps = 0;
  /// Masked-region content at t = T: pure noise, or the diffused input.
  MaskInit init = MaskInit::noise;
  /// Clamp the restored region to the image's value range.
  bool clamp_output = true;
};

struct RestorationTrace {
  std::vector<std::pair<int, ImageTensor>> snapshots;
  ImageTensor final;
};

/// Regional restoration: runs t = T..1, recomposing the clean region from
/// the diffused input at every step and denoising only the masked region.
/// Snapshots record x0 (clean region) plus the current masked estimate
/// x_t^out for every requested t in [0, T], in decreasing order of t.
template <class T>
RestorationTrace restore(const ImageTensor& x0, const ArtifactMask& m, const DenoiserWeights<T>& w,
                         const DenoiserConfig& c, const NoiseSchedule& s, std::vector<int> snapshot_ts,
                         std::uint64_t seed, const RestoreOptions& opt = {}) {
  if (x0.empty()) throw std::invalid_argument("restore: empty image");
  if (!m.matches(x0)) throw std::invalid_argument("restore: mask does not match image");
  if (opt.jumps < 0) throw std::invalid_argument("restore: jumps must be >= 0");
  const Denoiser<T> net(c);
  check_weights(w, c);
  if (x0.channels() != std::size_t(c.in_channels) || x0.height() != std::size_t(c.image_size) ||
      x0.width() != std::size_t(c.image_size))
    throw std::invalid_argument("restore: image " + shape_string(x0.values.shape) + " does not match the model");
  for (int t : snapshot_ts)
    if (t < 0 || t > s.steps()) throw std::out_of_range("snapshot timestep " + std::to_string(t) + " out of range");
  std::sort(snapshot_ts.begin(), snapshot_ts.end(), std::greater<>());
  snapshot_ts.erase(std::unique(snapshot_ts.begin(), snapshot_ts.end()), snapshot_ts.end());

  RestorationTrace trace;
  auto want = [&](int t) { return std::binary_search(snapshot_ts.begin(), snapshot_ts.end(), t, std::greater<>()); };

  if (m.none()) {
    for (int t : snapshot_ts) trace.snapshots.emplace_back(t, x0);
    trace.final = x0;
    return trace;
  }

  Rng rng(seed);
  const int T_steps = s.steps();
  ImageTensor out = rng.normal_like(x0);
  if (opt.init == MaskInit::diffused) out = forward_sample(x0, T_steps, out, s);
  if (want(T_steps)) trace.snapshots.emplace_back(T_steps, compose_final(x0, out, m));

  std::vector<int> ts(x0.batch());
  Tensor<T> input;
  auto denoise = [&](const ImageTensor& xin, int t) {
    input = xin.values.cast<T>();
    std::fill(ts.begin(), ts.end(), t);
    ImageTensor eps(net.predict(w, input, ts).template cast<double>(), xin.domain);
    return eps;
  };

  for (int t = T_steps; t >= 1; --t) {
    for (int round = 0;; ++round) {
      const ImageTensor eps = rng.normal_like(x0);
      const ImageTensor xin = compose_step_input(x0, out, m, t, eps, s);
      const ImageTensor z = rng.normal_like(x0);
      out = reverse_step(xin, denoise(xin, t), t, z, s);
      if (round >= opt.jumps || t == 1) break;
      // Re-noise x_{t-1} back to step t and repeat the step.
      out = forward_step(out, t, rng.normal_like(x0), s);
    }
    if (want(t - 1) && t - 1 > 0) trace.snapshots.emplace_back(t - 1, compose_final(x0, out, m));
  }

  if (opt.clamp_output) {
    const double lo = domain_low(x0.domain), hi = domain_high(x0.domain);
    for (double& v : out.values.data) v = std::clamp(v, lo, hi);
  }
  trace.final = compose_final(x0, out, m);
  if (want(0)) trace.snapshots.emplace_back(0, trace.final);
  return trace;
}

}  // namespace artfix
