#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "artfix/tensor.hpp"

namespace artfix::nn {

using Index = std::int32_t;
using IndexMap = std::shared_ptr<const std::vector<Index>>;

/// Handle to a node of a Graph.
struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

/// Reverse-mode tape. Nodes are appended in topological order by the op
/// methods below; backward() walks them in reverse. A graph built with
/// record_grad = false keeps values only.
template <class T>
class Graph {
 public:
  using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using MapC = Eigen::Map<const Mat>;
  using MapM = Eigen::Map<Mat>;
  using VecC = Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>;
  using VecM = Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>>;

  explicit Graph(bool record_grad = true) : record_(record_grad) { nodes_.reserve(1024); }
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  bool recording() const { return record_; }

  /// Multiply-accumulate count of every matrix product, attention and
  /// convolution evaluated so far.
  std::uint64_t macs() const { return macs_; }

  Var constant(Tensor<T> value) {
    Node n;
    n.own = std::move(value);
    return push(std::move(n));
  }

  /// Leaf bound to an external tensor; its gradient is accumulated into
  /// grad_sink during backward() when the sink is non-null.
  Var parameter(const Tensor<T>& value, std::vector<T>* grad_sink) {
    Node n;
    n.ext = &value;
    n.sink = grad_sink;
    n.requires_grad = record_ && grad_sink != nullptr;
    return push(std::move(n));
  }

  const Tensor<T>& value(Var v) const { return nodes_.at(v.id).value(); }
  const Shape& shape(Var v) const { return value(v).shape; }
  std::size_t size(Var v) const { return value(v).size(); }
  bool requires_grad(Var v) const { return nodes_.at(v.id).requires_grad; }

  std::vector<T>& grad(Var v) {
    Node& n = nodes_.at(v.id);
    if (n.grad.empty()) n.grad.assign(n.value().size(), T{0});
    return n.grad;
  }

  void backward(Var out) {
    if (!record_) throw std::logic_error("backward() on a graph built without gradients");
    if (size(out) != 1) throw std::invalid_argument("backward() needs a scalar output");
    grad(out)[0] = T{1};
    for (int i = out.id; i >= 0; --i) {
      Node& n = nodes_[i];
      if (!n.requires_grad || n.grad.empty()) continue;
      if (n.back) n.back();
      if (n.sink) {
        auto& s = *n.sink;
        if (s.size() != n.grad.size()) s.assign(n.grad.size(), T{0});
        for (std::size_t k = 0; k < s.size(); ++k) s[k] += n.grad[k];
      }
    }
  }

  // ---------------------------------------------------------------- ops

  /// y = x W^T + b over the last axis of x. W is [out, in].
  Var linear(Var x, Var w, Var b = {}) {
    const auto& X = value(x);
    const auto& W = value(w);
    const std::size_t K = W.dim(1), N = W.dim(0);
    if (X.shape.back() != K)
      throw std::invalid_argument("linear: input width " + std::to_string(X.shape.back()) +
                                  " != weight width " + std::to_string(K));
    const std::size_t M = X.size() / K;
    Shape os = X.shape;
    os.back() = N;
    Tensor<T> Y(os);
    MapM ym(Y.data.data(), M, N);
    ym.noalias() = MapC(X.data.data(), M, K) * MapC(W.data.data(), N, K).transpose();
    if (b.valid()) ym.rowwise() += VecC(value(b).data.data(), N);
    macs_ += M * K * N;
    Var y = make(std::move(Y), {x, w, b});
    if (requires_grad(y))
      node(y).back = [this, x, w, b, y, M, K, N] {
        MapC gy(grad(y).data(), M, N);
        if (requires_grad(x))
          MapM(grad(x).data(), M, K).noalias() += gy * MapC(value(w).data.data(), N, K);
        if (requires_grad(w))
          MapM(grad(w).data(), N, K).noalias() += gy.transpose() * MapC(value(x).data.data(), M, K);
        if (b.valid() && requires_grad(b)) VecM(grad(b).data(), N) += gy.colwise().sum();
      };
    return y;
  }

  Var add(Var a, Var b) {
    const auto& A = value(a);
    const auto& B = value(b);
    if (A.shape != B.shape)
      throw std::invalid_argument("add: shape mismatch " + shape_string(A.shape) + " vs " +
                                  shape_string(B.shape));
    Tensor<T> Y = A;
    for (std::size_t i = 0; i < Y.size(); ++i) Y.data[i] += B.data[i];
    Var y = make(std::move(Y), {a, b});
    if (requires_grad(y))
      node(y).back = [this, a, b, y] {
        const auto& gy = grad(y);
        for (Var p : {a, b})
          if (requires_grad(p)) {
            auto& gp = grad(p);
            for (std::size_t i = 0; i < gy.size(); ++i) gp[i] += gy[i];
          }
      };
    return y;
  }

  /// x viewed as [B, M, C, S]; adds v[b, c] to every (m, s).
  Var add_broadcast(Var x, Var v, std::size_t M, std::size_t C, std::size_t S) {
    const auto& X = value(x);
    const auto& V = value(v);
    const std::size_t B = V.size() / C;
    if (V.size() != B * C || X.size() != B * M * C * S)
      throw std::invalid_argument("add_broadcast: incompatible shapes " + shape_string(X.shape) +
                                  " and " + shape_string(V.shape));
    Tensor<T> Y = X;
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t m = 0; m < M; ++m)
        for (std::size_t c = 0; c < C; ++c) {
          T* row = Y.data.data() + ((b * M + m) * C + c) * S;
          const T add = V.data[b * C + c];
          for (std::size_t s = 0; s < S; ++s) row[s] += add;
        }
    Var y = make(std::move(Y), {x, v});
    if (requires_grad(y))
      node(y).back = [this, x, v, y, B, M, C, S] {
        const auto& gy = grad(y);
        if (requires_grad(x)) {
          auto& gx = grad(x);
          for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += gy[i];
        }
        if (requires_grad(v)) {
          auto& gv = grad(v);
          for (std::size_t b = 0; b < B; ++b)
            for (std::size_t m = 0; m < M; ++m)
              for (std::size_t c = 0; c < C; ++c) {
                const T* row = gy.data() + ((b * M + m) * C + c) * S;
                T acc{0};
                for (std::size_t s = 0; s < S; ++s) acc += row[s];
                gv[b * C + c] += acc;
              }
        }
      };
    return y;
  }

  /// Normalizes the last axis, then applies per-feature scale and shift.
  Var layer_norm(Var x, Var gamma, Var beta, T eps = T(1e-5)) {
    const auto& X = value(x);
    const std::size_t D = X.shape.back(), R = X.size() / D;
    if (value(gamma).size() != D || value(beta).size() != D)
      throw std::invalid_argument("layer_norm: affine size mismatch");
    auto xhat = std::make_shared<std::vector<T>>(X.size());
    auto rstd = std::make_shared<std::vector<T>>(R);
    Tensor<T> Y(X.shape);
    const T* g = value(gamma).data.data();
    const T* bt = value(beta).data.data();
    for (std::size_t r = 0; r < R; ++r) {
      const T* xr = X.data.data() + r * D;
      T mean{0}, var{0};
      for (std::size_t d = 0; d < D; ++d) mean += xr[d];
      mean /= T(D);
      for (std::size_t d = 0; d < D; ++d) var += (xr[d] - mean) * (xr[d] - mean);
      var /= T(D);
      const T rs = T(1) / std::sqrt(var + eps);
      (*rstd)[r] = rs;
      for (std::size_t d = 0; d < D; ++d) {
        const T h = (xr[d] - mean) * rs;
        (*xhat)[r * D + d] = h;
        Y.data[r * D + d] = h * g[d] + bt[d];
      }
    }
    Var y = make(std::move(Y), {x, gamma, beta});
    if (requires_grad(y))
      node(y).back = [this, x, gamma, beta, y, xhat, rstd, R, D] {
        const auto& gy = grad(y);
        const T* g = value(gamma).data.data();
        if (requires_grad(gamma) || requires_grad(beta)) {
          auto& gg = grad(gamma);
          auto& gb = grad(beta);
          for (std::size_t r = 0; r < R; ++r)
            for (std::size_t d = 0; d < D; ++d) {
              gg[d] += gy[r * D + d] * (*xhat)[r * D + d];
              gb[d] += gy[r * D + d];
            }
        }
        if (requires_grad(x)) {
          auto& gx = grad(x);
          for (std::size_t r = 0; r < R; ++r) {
            T m1{0}, m2{0};
            for (std::size_t d = 0; d < D; ++d) {
              const T dh = gy[r * D + d] * g[d];
              m1 += dh;
              m2 += dh * (*xhat)[r * D + d];
            }
            m1 /= T(D);
            m2 /= T(D);
            for (std::size_t d = 0; d < D; ++d) {
              const T dh = gy[r * D + d] * g[d];
              gx[r * D + d] += (*rstd)[r] * (dh - m1 - (*xhat)[r * D + d] * m2);
            }
          }
        }
      };
    return y;
  }

  /// Group normalization of an NCHW tensor with per-channel affine.
  Var group_norm(Var x, std::size_t groups, Var gamma, Var beta, T eps = T(1e-5)) {
    const auto& X = value(x);
    if (X.rank() != 4) throw std::invalid_argument("group_norm expects NCHW");
    const std::size_t B = X.dim(0), C = X.dim(1), S = X.dim(2) * X.dim(3);
    if (C % groups != 0) throw std::invalid_argument("group_norm: channels not divisible by groups");
    const std::size_t cg = C / groups, len = cg * S, R = B * groups;
    auto xhat = std::make_shared<std::vector<T>>(X.size());
    auto rstd = std::make_shared<std::vector<T>>(R);
    Tensor<T> Y(X.shape);
    const T* g = value(gamma).data.data();
    const T* bt = value(beta).data.data();
    for (std::size_t r = 0; r < R; ++r) {
      const T* xr = X.data.data() + r * len;
      T mean{0}, var{0};
      for (std::size_t i = 0; i < len; ++i) mean += xr[i];
      mean /= T(len);
      for (std::size_t i = 0; i < len; ++i) var += (xr[i] - mean) * (xr[i] - mean);
      var /= T(len);
      const T rs = T(1) / std::sqrt(var + eps);
      (*rstd)[r] = rs;
      for (std::size_t i = 0; i < len; ++i) {
        const std::size_t c = (r % groups) * cg + i / S;
        const T h = (xr[i] - mean) * rs;
        (*xhat)[r * len + i] = h;
        Y.data[r * len + i] = h * g[c] + bt[c];
      }
    }
    Var y = make(std::move(Y), {x, gamma, beta});
    if (requires_grad(y))
      node(y).back = [this, x, gamma, beta, y, xhat, rstd, R, len, groups, cg, S] {
        const auto& gy = grad(y);
        const T* g = value(gamma).data.data();
        if (requires_grad(gamma) || requires_grad(beta)) {
          auto& gg = grad(gamma);
          auto& gb = grad(beta);
          for (std::size_t r = 0; r < R; ++r)
            for (std::size_t i = 0; i < len; ++i) {
              const std::size_t c = (r % groups) * cg + i / S;
              gg[c] += gy[r * len + i] * (*xhat)[r * len + i];
              gb[c] += gy[r * len + i];
            }
        }
        if (requires_grad(x)) {
          auto& gx = grad(x);
          for (std::size_t r = 0; r < R; ++r) {
            T m1{0}, m2{0};
            for (std::size_t i = 0; i < len; ++i) {
              const T dh = gy[r * len + i] * g[(r % groups) * cg + i / S];
              m1 += dh;
              m2 += dh * (*xhat)[r * len + i];
            }
            m1 /= T(len);
            m2 /= T(len);
            for (std::size_t i = 0; i < len; ++i) {
              const T dh = gy[r * len + i] * g[(r % groups) * cg + i / S];
              gx[r * len + i] += (*rstd)[r] * (dh - m1 - (*xhat)[r * len + i] * m2);
            }
          }
        }
      };
    return y;
  }

  /// Exact (erf) GELU.
  Var gelu(Var x) {
    return unary(x, [](T v) { return T(0.5) * v * (T(1) + std::erf(v * T(M_SQRT1_2))); },
                 [](T v) {
                   const T cdf = T(0.5) * (T(1) + std::erf(v * T(M_SQRT1_2)));
                   const T pdf = std::exp(T(-0.5) * v * v) * T(0.3989422804014327);
                   return cdf + v * pdf;
                 });
  }

  Var silu(Var x) {
    return unary(x, [](T v) { return v / (T(1) + std::exp(-v)); },
                 [](T v) {
                   const T s = T(1) / (T(1) + std::exp(-v));
                   return s * (T(1) + v * (T(1) - s));
                 });
  }

  /// y[i] = x[index[i]]; the backward pass scatter-adds.
  Var gather(Var x, IndexMap index, Shape out_shape) {
    const auto& X = value(x);
    const auto& idx = *index;
    if (idx.size() != numel(out_shape)) throw std::invalid_argument("gather: index/shape mismatch");
    Tensor<T> Y(std::move(out_shape));
    for (std::size_t i = 0; i < idx.size(); ++i) Y.data[i] = X.data[static_cast<std::size_t>(idx[i])];
    Var y = make(std::move(Y), {x});
    if (requires_grad(y))
      node(y).back = [this, x, y, index] {
        const auto& gy = grad(y);
        auto& gx = grad(x);
        const auto& idx = *index;
        for (std::size_t i = 0; i < idx.size(); ++i) gx[static_cast<std::size_t>(idx[i])] += gy[i];
      };
    return y;
  }

  /// Row gather: x viewed as rows of row_len; output row i is input row rows[i].
  Var gather_rows(Var x, IndexMap rows, std::size_t row_len, Shape out_shape) {
    const auto& X = value(x);
    const auto& idx = *rows;
    if (X.size() % row_len != 0 || idx.size() * row_len != numel(out_shape))
      throw std::invalid_argument("gather_rows: index/shape mismatch");
    Tensor<T> Y(std::move(out_shape));
    for (std::size_t i = 0; i < idx.size(); ++i)
      std::copy_n(X.data.data() + static_cast<std::size_t>(idx[i]) * row_len, row_len,
                  Y.data.data() + i * row_len);
    Var y = make(std::move(Y), {x});
    if (requires_grad(y))
      node(y).back = [this, x, y, rows, row_len] {
        const auto& gy = grad(y);
        auto& gx = grad(x);
        const auto& idx = *rows;
        for (std::size_t i = 0; i < idx.size(); ++i) {
          T* dst = gx.data() + static_cast<std::size_t>(idx[i]) * row_len;
          const T* src = gy.data() + i * row_len;
          for (std::size_t k = 0; k < row_len; ++k) dst[k] += src[k];
        }
      };
    return y;
  }

  Var reshape(Var x, Shape s) {
    if (numel(s) != size(x)) throw std::invalid_argument("reshape: element count mismatch");
    Tensor<T> Y(std::move(s), value(x).data);
    Var y = make(std::move(Y), {x});
    if (requires_grad(y))
      node(y).back = [this, x, y] {
        const auto& gy = grad(y);
        auto& gx = grad(x);
        for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += gy[i];
      };
    return y;
  }

  Var concat(Var a, Var b, std::size_t axis) {
    const auto& A = value(a);
    const auto& B = value(b);
    if (A.rank() != B.rank() || axis >= A.rank()) throw std::invalid_argument("concat: rank mismatch");
    for (std::size_t i = 0; i < A.rank(); ++i)
      if (i != axis && A.dim(i) != B.dim(i))
        throw std::invalid_argument("concat: shape mismatch " + shape_string(A.shape) + " vs " +
                                    shape_string(B.shape));
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= A.dim(i);
    for (std::size_t i = axis + 1; i < A.rank(); ++i) inner *= A.dim(i);
    const std::size_t la = A.dim(axis) * inner, lb = B.dim(axis) * inner;
    Shape os = A.shape;
    os[axis] += B.dim(axis);
    Tensor<T> Y(os);
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(A.data.data() + o * la, la, Y.data.data() + o * (la + lb));
      std::copy_n(B.data.data() + o * lb, lb, Y.data.data() + o * (la + lb) + la);
    }
    Var y = make(std::move(Y), {a, b});
    if (requires_grad(y))
      node(y).back = [this, a, b, y, outer, la, lb] {
        const auto& gy = grad(y);
        if (requires_grad(a)) {
          auto& ga = grad(a);
          for (std::size_t o = 0; o < outer; ++o)
            for (std::size_t i = 0; i < la; ++i) ga[o * la + i] += gy[o * (la + lb) + i];
        }
        if (requires_grad(b)) {
          auto& gb = grad(b);
          for (std::size_t o = 0; o < outer; ++o)
            for (std::size_t i = 0; i < lb; ++i) gb[o * lb + i] += gy[o * (la + lb) + la + i];
        }
      };
    return y;
  }

  /// Keeps [begin, end) along axis.
  Var slice(Var x, std::size_t axis, std::size_t begin, std::size_t end) {
    const auto& X = value(x);
    if (axis >= X.rank() || begin >= end || end > X.dim(axis))
      throw std::invalid_argument("slice: bad range");
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= X.dim(i);
    for (std::size_t i = axis + 1; i < X.rank(); ++i) inner *= X.dim(i);
    const std::size_t full = X.dim(axis) * inner, keep = (end - begin) * inner, off = begin * inner;
    Shape os = X.shape;
    os[axis] = end - begin;
    Tensor<T> Y(os);
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(X.data.data() + o * full + off, keep, Y.data.data() + o * keep);
    Var y = make(std::move(Y), {x});
    if (requires_grad(y))
      node(y).back = [this, x, y, outer, full, keep, off] {
        const auto& gy = grad(y);
        auto& gx = grad(x);
        for (std::size_t o = 0; o < outer; ++o)
          for (std::size_t i = 0; i < keep; ++i) gx[o * full + off + i] += gy[o * keep + i];
      };
    return y;
  }

  /// Multi-head attention over independent windows.
  ///
  /// qkv is [M, n, 3D] (query, key, value blocks along the last axis).
  /// The first n_spatial tokens of every window are spatial tokens; any
  /// remaining tokens (the time token) carry neither relative position
  /// bias nor mask. bias_table is [(2w-1)^2, heads] and rel_index maps a
  /// spatial pair (i, j) to a table row. mask, when non-empty, is
  /// [num_mask_windows, n_spatial, n_spatial] and window m uses slice
  /// m % num_mask_windows. Returns [M, n, D]. When probs_out is non-null
  /// the softmax matrix [M, heads, n, n] is copied into it.
  Var window_attention(Var qkv, std::size_t heads, std::size_t n_spatial, Var bias_table,
                       IndexMap rel_index, std::shared_ptr<const std::vector<T>> mask,
                       std::size_t num_mask_windows, std::vector<T>* probs_out = nullptr) {
    const auto& QKV = value(qkv);
    if (QKV.rank() != 3 || QKV.dim(2) % 3 != 0) throw std::invalid_argument("attention: qkv must be [M,n,3D]");
    const std::size_t M = QKV.dim(0), n = QKV.dim(1), D = QKV.dim(2) / 3;
    if (D % heads != 0) throw std::invalid_argument("attention: channels not divisible by heads");
    if (n_spatial > n) throw std::invalid_argument("attention: n_spatial > n");
    const std::size_t hd = D / heads;
    const T scale = T(1) / std::sqrt(T(hd));
    const bool has_bias = bias_table.valid();
    const bool has_mask = mask && !mask->empty();
    if (has_bias && rel_index->size() != n_spatial * n_spatial)
      throw std::invalid_argument("attention: relative index size mismatch");
    if (has_mask && mask->size() != num_mask_windows * n_spatial * n_spatial)
      throw std::invalid_argument("attention: mask size mismatch");

    auto probs = std::make_shared<std::vector<T>>(M * heads * n * n);
    Tensor<T> Y(Shape{M, n, D});
    const T* btab = has_bias ? value(bias_table).data.data() : nullptr;
    std::vector<T> row(n);
    for (std::size_t m = 0; m < M; ++m) {
      const T* base = QKV.data.data() + m * n * 3 * D;
      const T* mk = has_mask ? mask->data() + (m % num_mask_windows) * n_spatial * n_spatial : nullptr;
      for (std::size_t h = 0; h < heads; ++h) {
        T* P = probs->data() + ((m * heads + h) * n) * n;
        for (std::size_t i = 0; i < n; ++i) {
          const T* q = base + i * 3 * D + h * hd;
          T mx = -std::numeric_limits<T>::infinity();
          for (std::size_t j = 0; j < n; ++j) {
            const T* k = base + j * 3 * D + D + h * hd;
            T s{0};
            for (std::size_t c = 0; c < hd; ++c) s += q[c] * k[c];
            s *= scale;
            if (i < n_spatial && j < n_spatial) {
              if (has_bias) s += btab[static_cast<std::size_t>((*rel_index)[i * n_spatial + j]) * heads + h];
              if (has_mask) s += mk[i * n_spatial + j];
            }
            row[j] = s;
            mx = std::max(mx, s);
          }
          T sum{0};
          for (std::size_t j = 0; j < n; ++j) {
            row[j] = std::exp(row[j] - mx);
            sum += row[j];
          }
          for (std::size_t j = 0; j < n; ++j) P[i * n + j] = row[j] / sum;
          T* out = Y.data.data() + (m * n + i) * D + h * hd;
          for (std::size_t j = 0; j < n; ++j) {
            const T p = P[i * n + j];
            const T* v = base + j * 3 * D + 2 * D + h * hd;
            for (std::size_t c = 0; c < hd; ++c) out[c] += p * v[c];
          }
        }
      }
    }
    macs_ += 2 * M * n * n * D;
    if (probs_out) *probs_out = *probs;

    Var y = make(std::move(Y), {qkv, bias_table});
    if (requires_grad(y))
      node(y).back = [this, qkv, bias_table, y, probs, rel_index, M, n, D, heads, hd, n_spatial, scale,
                      has_bias] {
        const auto& gy = grad(y);
        const auto& QKV = value(qkv);
        const bool want_qkv = requires_grad(qkv);
        const bool want_bias = has_bias && requires_grad(bias_table);
        std::vector<T>* gq = want_qkv ? &grad(qkv) : nullptr;
        std::vector<T>* gb = want_bias ? &grad(bias_table) : nullptr;
        std::vector<T> dP(n), dS(n * n);
        for (std::size_t m = 0; m < M; ++m) {
          const T* base = QKV.data.data() + m * n * 3 * D;
          for (std::size_t h = 0; h < heads; ++h) {
            const T* P = probs->data() + ((m * heads + h) * n) * n;
            for (std::size_t i = 0; i < n; ++i) {
              const T* go = gy.data() + (m * n + i) * D + h * hd;
              T dot{0};
              for (std::size_t j = 0; j < n; ++j) {
                const T* v = base + j * 3 * D + 2 * D + h * hd;
                T s{0};
                for (std::size_t c = 0; c < hd; ++c) s += go[c] * v[c];
                dP[j] = s;
                dot += s * P[i * n + j];
                if (gq) {
                  T* gv = gq->data() + (m * n + j) * 3 * D + 2 * D + h * hd;
                  const T p = P[i * n + j];
                  for (std::size_t c = 0; c < hd; ++c) gv[c] += p * go[c];
                }
              }
              for (std::size_t j = 0; j < n; ++j) dS[i * n + j] = P[i * n + j] * (dP[j] - dot);
            }
            if (gb)
              for (std::size_t i = 0; i < n_spatial; ++i)
                for (std::size_t j = 0; j < n_spatial; ++j)
                  (*gb)[static_cast<std::size_t>((*rel_index)[i * n_spatial + j]) * heads + h] += dS[i * n + j];
            if (gq)
              for (std::size_t i = 0; i < n; ++i) {
                const T* q = base + i * 3 * D + h * hd;
                T* gqi = gq->data() + (m * n + i) * 3 * D + h * hd;
                for (std::size_t j = 0; j < n; ++j) {
                  const T ds = dS[i * n + j] * scale;
                  if (ds == T{0}) continue;
                  const T* k = base + j * 3 * D + D + h * hd;
                  T* gkj = gq->data() + (m * n + j) * 3 * D + D + h * hd;
                  for (std::size_t c = 0; c < hd; ++c) {
                    gqi[c] += ds * k[c];
                    gkj[c] += ds * q[c];
                  }
                }
              }
          }
        }
      };
    return y;
  }

  /// 2-D convolution of an NCHW tensor with a [O, C, k, k] kernel (cross-correlation).
  Var conv2d(Var x, Var w, Var b, std::size_t stride, std::size_t pad) {
    const auto& X = value(x);
    const auto& W = value(w);
    if (X.rank() != 4 || W.rank() != 4 || W.dim(1) != X.dim(1) || W.dim(2) != W.dim(3))
      throw std::invalid_argument("conv2d: incompatible shapes " + shape_string(X.shape) + " and " +
                                  shape_string(W.shape));
    const std::size_t B = X.dim(0), C = X.dim(1), H = X.dim(2), Wd = X.dim(3);
    const std::size_t O = W.dim(0), k = W.dim(2);
    if (H + 2 * pad < k || Wd + 2 * pad < k) throw std::invalid_argument("conv2d: kernel larger than input");
    const std::size_t Ho = (H + 2 * pad - k) / stride + 1, Wo = (Wd + 2 * pad - k) / stride + 1;
    const std::size_t P = Ho * Wo, K = C * k * k;

    // im2col index: column entry -> input offset within one sample, or -1 for padding.
    auto cols = std::make_shared<std::vector<Index>>(P * K);
    for (std::size_t oy = 0; oy < Ho; ++oy)
      for (std::size_t ox = 0; ox < Wo; ++ox)
        for (std::size_t c = 0; c < C; ++c)
          for (std::size_t ky = 0; ky < k; ++ky)
            for (std::size_t kx = 0; kx < k; ++kx) {
              const long iy = long(oy * stride + ky) - long(pad), ix = long(ox * stride + kx) - long(pad);
              const bool inside = iy >= 0 && ix >= 0 && iy < long(H) && ix < long(Wd);
              (*cols)[(oy * Wo + ox) * K + (c * k + ky) * k + kx] =
                  inside ? Index((c * H + std::size_t(iy)) * Wd + std::size_t(ix)) : Index(-1);
            }

    Tensor<T> Y(Shape{B, O, Ho, Wo});
    Mat col(P, K), out(P, O);
    for (std::size_t bi = 0; bi < B; ++bi) {
      const T* xs = X.data.data() + bi * C * H * Wd;
      for (std::size_t i = 0; i < P * K; ++i) col.data()[i] = (*cols)[i] >= 0 ? xs[(*cols)[i]] : T{0};
      out.noalias() = col * MapC(W.data.data(), O, K).transpose();
      for (std::size_t o = 0; o < O; ++o) {
        const T bias = b.valid() ? value(b).data[o] : T{0};
        for (std::size_t p = 0; p < P; ++p) Y.data[(bi * O + o) * P + p] = out(p, o) + bias;
      }
    }
    macs_ += B * P * K * O;
    Var y = make(std::move(Y), {x, w, b});
    if (requires_grad(y))
      node(y).back = [this, x, w, b, y, cols, B, C, H, Wd, O, P, K] {
        const auto& gy = grad(y);
        const auto& X = value(x);
        MapC Wm(value(w).data.data(), O, K);
        Mat col(P, K), gout(P, O), gcol(P, K);
        for (std::size_t bi = 0; bi < B; ++bi) {
          for (std::size_t o = 0; o < O; ++o)
            for (std::size_t p = 0; p < P; ++p) gout(p, o) = gy[(bi * O + o) * P + p];
          if (requires_grad(w)) {
            const T* xs = X.data.data() + bi * C * H * Wd;
            for (std::size_t i = 0; i < P * K; ++i) col.data()[i] = (*cols)[i] >= 0 ? xs[(*cols)[i]] : T{0};
            MapM(grad(w).data(), O, K).noalias() += gout.transpose() * col;
          }
          if (b.valid() && requires_grad(b)) VecM(grad(b).data(), O) += gout.colwise().sum();
          if (requires_grad(x)) {
            gcol.noalias() = gout * Wm;
            T* gx = grad(x).data() + bi * C * H * Wd;
            for (std::size_t i = 0; i < P * K; ++i)
              if ((*cols)[i] >= 0) gx[(*cols)[i]] += gcol.data()[i];
          }
        }
      };
    return y;
  }

  /// Mean squared error against a constant target; returns a scalar.
  Var mse_loss(Var pred, const Tensor<T>& target) {
    const auto& Pr = value(pred);
    if (Pr.size() != target.size()) throw std::invalid_argument("mse_loss: size mismatch");
    T acc{0};
    for (std::size_t i = 0; i < Pr.size(); ++i) {
      const T d = Pr.data[i] - target.data[i];
      acc += d * d;
    }
    const T n = T(Pr.size());
    Var y = make(Tensor<T>(Shape{1}, std::vector<T>{acc / n}), {pred});
    if (requires_grad(y)) {
      auto tgt = std::make_shared<std::vector<T>>(target.data);
      node(y).back = [this, pred, y, tgt, n] {
        const T g = grad(y)[0] * T(2) / n;
        auto& gp = grad(pred);
        const auto& P = value(pred).data;
        for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += g * (P[i] - (*tgt)[i]);
      };
    }
    return y;
  }

 private:
  struct Node {
    Tensor<T> own;
    const Tensor<T>* ext = nullptr;
    std::vector<T> grad;
    std::function<void()> back;
    std::vector<T>* sink = nullptr;
    bool requires_grad = false;
    const Tensor<T>& value() const { return ext ? *ext : own; }
  };

  Node& node(Var v) { return nodes_.at(v.id); }

  Var push(Node&& n) {
    nodes_.push_back(std::move(n));
    return Var{static_cast<int>(nodes_.size()) - 1};
  }

  Var make(Tensor<T> value, std::initializer_list<Var> parents) {
    Node n;
    n.own = std::move(value);
    if (record_)
      for (Var p : parents)
        if (p.valid() && nodes_[p.id].requires_grad) n.requires_grad = true;
    return push(std::move(n));
  }

  template <class F, class DF>
  Var unary(Var x, F f, DF df) {
    Tensor<T> Y = value(x);
    for (auto& v : Y.data) v = f(v);
    Var y = make(std::move(Y), {x});
    if (requires_grad(y))
      node(y).back = [this, x, y, df] {
        const auto& gy = grad(y);
        const auto& X = value(x).data;
        auto& gx = grad(x);
        for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += gy[i] * df(X[i]);
      };
    return y;
  }

  bool record_;
  std::uint64_t macs_ = 0;
  std::vector<Node> nodes_;
};

}  // namespace artfix::nn
