#pragma once

#include <algorithm>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "artfix/nn/graph.hpp"
#include "artfix/tensor.hpp"

namespace artfix::nn {

/// Additive value for forbidden attention pairs.
inline constexpr double kMaskForbidden = -1e9;

/// Token sequence [N, L, D] laid out row-major over a grid_h x grid_w grid.
template <class T>
struct TokenGrid {
  Tensor<T> tokens;
  std::size_t grid_h = 0;
  std::size_t grid_w = 0;

  std::size_t batch() const { return tokens.dim(0); }
  std::size_t length() const { return tokens.dim(1); }
  std::size_t channels() const { return tokens.dim(2); }

  void validate() const {
    if (tokens.rank() != 3 || tokens.dim(1) == 0 || tokens.dim(2) == 0 || grid_h * grid_w != tokens.dim(1))
      throw std::invalid_argument("token grid shape " + shape_string(tokens.shape) + " inconsistent with " +
                                  std::to_string(grid_h) + "x" + std::to_string(grid_w));
  }
};

namespace detail {
inline void check_window(std::size_t gh, std::size_t gw, std::size_t window, std::size_t shift) {
  if (window == 0 || gh % window != 0 || gw % window != 0)
    throw std::invalid_argument("window " + std::to_string(window) + " does not divide grid " +
                                std::to_string(gh) + "x" + std::to_string(gw));
  if (shift >= window)
    throw std::invalid_argument("shift " + std::to_string(shift) + " must be smaller than window " +
                                std::to_string(window));
}
}  // namespace detail

/// Row map from tokens [B, gh, gw] to windows [B * nW, window^2] after a
/// cyclic shift of the grid by -shift along both axes; entry i is the
/// source token row of output row i.
inline IndexMap partition_index(std::size_t B, std::size_t gh, std::size_t gw, std::size_t window,
                                std::size_t shift) {
  detail::check_window(gh, gw, window, shift);
  const std::size_t nwx = gw / window, nw = (gh / window) * nwx, ws = window * window;
  auto idx = std::make_shared<std::vector<Index>>(B * gh * gw);
  std::size_t o = 0;
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t w = 0; w < nw; ++w)
      for (std::size_t k = 0; k < ws; ++k) {
        const std::size_t y = ((w / nwx) * window + k / window + shift) % gh;
        const std::size_t x = ((w % nwx) * window + k % window + shift) % gw;
        (*idx)[o++] = Index((b * gh + y) * gw + x);
      }
  return idx;
}

/// Inverse of partition_index.
inline IndexMap reverse_index(std::size_t B, std::size_t gh, std::size_t gw, std::size_t window,
                              std::size_t shift) {
  const auto fwd = partition_index(B, gh, gw, window, shift);
  auto inv = std::make_shared<std::vector<Index>>(fwd->size());
  for (std::size_t i = 0; i < fwd->size(); ++i) (*inv)[static_cast<std::size_t>((*fwd)[i])] = Index(i);
  return inv;
}

namespace detail {
template <class T>
void copy_rows(const std::vector<Index>& rows, std::size_t row_len, const T* src, T* dst) {
  for (std::size_t i = 0; i < rows.size(); ++i)
    std::copy_n(src + static_cast<std::size_t>(rows[i]) * row_len, row_len, dst + i * row_len);
}
}  // namespace detail

template <class T>
Tensor<T> window_partition(const TokenGrid<T>& g, std::size_t window, std::size_t shift = 0) {
  g.validate();
  const auto idx = partition_index(g.batch(), g.grid_h, g.grid_w, window, shift);
  const std::size_t nw = g.length() / (window * window);
  Tensor<T> out(Shape{g.batch() * nw, window * window, g.channels()});
  detail::copy_rows(*idx, g.channels(), g.tokens.data.data(), out.data.data());
  return out;
}

template <class T>
TokenGrid<T> window_reverse(const Tensor<T>& windows, std::size_t grid_h, std::size_t grid_w,
                            std::size_t window, std::size_t shift = 0) {
  if (windows.rank() != 3 || windows.dim(1) != window * window)
    throw std::invalid_argument("window_reverse: windows must be [M, window^2, D]");
  detail::check_window(grid_h, grid_w, window, shift);
  const std::size_t nw = (grid_h / window) * (grid_w / window);
  if (windows.dim(0) % nw != 0) throw std::invalid_argument("window_reverse: window count mismatch");
  const std::size_t B = windows.dim(0) / nw, D = windows.dim(2);
  const auto idx = reverse_index(B, grid_h, grid_w, window, shift);
  TokenGrid<T> g{Tensor<T>(Shape{B, grid_h * grid_w, D}), grid_h, grid_w};
  detail::copy_rows(*idx, D, windows.data.data(), g.tokens.data.data());
  return g;
}

/// Additive mask [nW, window^2, window^2] for shifted-window attention:
/// 0 where both tokens come from the same pre-shift region, kMaskForbidden
/// otherwise. Region ids follow the three bands [0, side - window),
/// [side - window, side - shift), [side - shift, side) per axis.
template <class T>
std::vector<T> shifted_attention_mask(std::size_t grid_h, std::size_t grid_w, std::size_t window,
                                      std::size_t shift) {
  detail::check_window(grid_h, grid_w, window, shift);
  const std::size_t nwx = grid_w / window, nw = (grid_h / window) * nwx, ws = window * window;
  std::vector<T> mask(nw * ws * ws, T{0});
  if (shift == 0) return mask;
  auto band = [&](std::size_t v, std::size_t side) -> int {
    if (v < side - window) return 0;
    return v < side - shift ? 1 : 2;
  };
  std::vector<int> region(ws);
  for (std::size_t w = 0; w < nw; ++w) {
    for (std::size_t k = 0; k < ws; ++k) {
      const std::size_t y = (w / nwx) * window + k / window, x = (w % nwx) * window + k % window;
      region[k] = band(y, grid_h) * 3 + band(x, grid_w);
    }
    for (std::size_t i = 0; i < ws; ++i)
      for (std::size_t j = 0; j < ws; ++j)
        if (region[i] != region[j]) mask[(w * ws + i) * ws + j] = T(kMaskForbidden);
  }
  return mask;
}

/// Maps a spatial token pair (i, j) inside a window to a row of the
/// (2w-1)^2 relative position bias table.
inline IndexMap relative_position_index(std::size_t window) {
  const std::size_t ws = window * window, span = 2 * window - 1;
  auto idx = std::make_shared<std::vector<Index>>(ws * ws);
  for (std::size_t i = 0; i < ws; ++i)
    for (std::size_t j = 0; j < ws; ++j) {
      const std::size_t dy = i / window + window - 1 - j / window;
      const std::size_t dx = i % window + window - 1 - j % window;
      (*idx)[i * ws + j] = Index(dy * span + dx);
    }
  return idx;
}

}  // namespace artfix::nn
