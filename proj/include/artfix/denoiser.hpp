#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "artfix/nn/graph.hpp"
#include "artfix/nn/window.hpp"
#include "artfix/tensor.hpp"

namespace artfix {

enum class Backbone { swin, unet };
enum class TimeInjection { concat_token, add };

inline const char* backbone_name(Backbone b) { return b == Backbone::swin ? "swin" : "unet"; }
inline const char* injection_name(TimeInjection t) {
  return t == TimeInjection::concat_token ? "concat_token" : "add";
}
inline Backbone parse_backbone(const std::string& s) {
  if (s == "swin") return Backbone::swin;
  if (s == "unet") return Backbone::unet;
  throw std::invalid_argument("unknown backbone '" + s + "'");
}
inline TimeInjection parse_injection(const std::string& s) {
  if (s == "concat_token" || s == "concat") return TimeInjection::concat_token;
  if (s == "add") return TimeInjection::add;
  throw std::invalid_argument("unknown time injection '" + s + "'");
}

struct DenoiserConfig {
  Backbone backbone = Backbone::swin;
  TimeInjection time_injection = TimeInjection::concat_token;
  int patch_size = 2;
  int window_size = 4;
  int embed_dim = 48;
  std::vector<int> depths{2, 2, 2};
  std::vector<int> num_heads{3, 6, 12};
  int image_size = 64;
  int in_channels = 3;
  int mlp_ratio = 4;
  int time_embed_dim = 0;  // 0 selects embed_dim

  std::size_t stages() const { return depths.size(); }
  std::size_t stage_dim(std::size_t i) const { return std::size_t(embed_dim) << i; }
  std::size_t stage_grid(std::size_t i) const {
    const std::size_t base = backbone == Backbone::swin ? std::size_t(image_size / patch_size)
                                                        : std::size_t(image_size);
    return base >> i;
  }
  std::size_t time_dim() const { return std::size_t(time_embed_dim > 0 ? time_embed_dim : embed_dim); }
  /// Window side used at stage i; no shift when it covers the whole grid.
  std::size_t stage_shift(std::size_t i, std::size_t block) const {
    const auto w = std::size_t(window_size);
    return (block % 2 == 1 && stage_grid(i) > w) ? w / 2 : 0;
  }

  void validate() const {
    auto fail = [](const std::string& m) { throw std::invalid_argument("invalid denoiser config: " + m); };
    if (depths.empty()) fail("depths must be non-empty");
    for (int d : depths)
      if (d < 1) fail("every stage needs at least one block");
    if (in_channels != 1 && in_channels != 3) fail("in_channels must be 1 or 3");
    if (embed_dim < 1 || image_size < 1) fail("embed_dim and image_size must be positive");
    if (time_dim() % 2 != 0) fail("time embedding dimension must be even");
    if (mlp_ratio < 1) fail("mlp_ratio must be >= 1");
    const std::size_t down = std::size_t(1) << (stages() - 1);
    if (backbone == Backbone::unet) {
      if (time_injection != TimeInjection::add) fail("the unet backbone supports additive time injection only");
      if (std::size_t(image_size) % down != 0) fail("image_size must be divisible by 2^(stages-1)");
      return;
    }
    if (patch_size < 1 || window_size < 1) fail("patch_size and window_size must be positive");
    if (std::size_t(image_size) % (std::size_t(patch_size) * down) != 0)
      fail("image_size must be divisible by patch_size * 2^(stages-1)");
    if (num_heads.size() != depths.size()) fail("num_heads needs one entry per stage");
    for (std::size_t i = 0; i < stages(); ++i) {
      if (num_heads[i] < 1 || stage_dim(i) % std::size_t(num_heads[i]) != 0)
        fail("stage " + std::to_string(i) + " width " + std::to_string(stage_dim(i)) +
             " not divisible by its head count");
      if (stage_grid(i) % std::size_t(window_size) != 0)
        fail("window " + std::to_string(window_size) + " does not divide stage " + std::to_string(i) +
             " grid side " + std::to_string(stage_grid(i)));
    }
  }

  std::string variant_name() const {
    if (backbone == Backbone::unet) return "unet";
    return time_injection == TimeInjection::concat_token ? "swin_concat" : "swin_add";
  }

  static DenoiserConfig desk_default() { return {}; }

  /// Full-resolution configuration used for complexity reports.
  static DenoiserConfig reference_full_scale() {
    DenoiserConfig c;
    c.image_size = 256;
    c.patch_size = 4;
    c.window_size = 8;
    c.embed_dim = 96;
    c.depths = {2, 2, 2, 2};
    c.num_heads = {3, 6, 12, 24};
    return c;
  }

  friend bool operator==(const DenoiserConfig&, const DenoiserConfig&) = default;
};

/// The three variants compared in the ablation: "swin_concat", "swin_add", "unet".
inline DenoiserConfig with_variant(DenoiserConfig c, const std::string& variant) {
  if (variant == "swin_concat") {
    c.backbone = Backbone::swin;
    c.time_injection = TimeInjection::concat_token;
  } else if (variant == "swin_add") {
    c.backbone = Backbone::swin;
    c.time_injection = TimeInjection::add;
  } else if (variant == "unet") {
    c.backbone = Backbone::unet;
    c.time_injection = TimeInjection::add;
  } else {
    throw std::invalid_argument("unknown variant '" + variant + "' (swin_concat, swin_add, unet)");
  }
  return c;
}

inline const std::vector<std::string>& variant_names() {
  static const std::vector<std::string> names{"swin_concat", "swin_add", "unet"};
  return names;
}

// ------------------------------------------------------------ inventory

enum class Init { zeros, ones, normal, fan_in };

struct ParamSpec {
  std::string name;
  Shape shape;
  Init init;
};

namespace detail {

inline std::size_t norm_groups(std::size_t channels) {
  for (std::size_t g = 8; g > 1; --g)
    if (channels % g == 0) return g;
  return 1;
}

struct Inventory {
  std::vector<ParamSpec> specs;

  void linear(const std::string& p, std::size_t in, std::size_t out, bool bias = true) {
    specs.push_back({p + ".weight", {out, in}, Init::normal});
    if (bias) specs.push_back({p + ".bias", {out}, Init::zeros});
  }
  void norm(const std::string& p, std::size_t d) {
    specs.push_back({p + ".weight", {d}, Init::ones});
    specs.push_back({p + ".bias", {d}, Init::zeros});
  }
  void conv(const std::string& p, std::size_t in, std::size_t out, std::size_t k) {
    specs.push_back({p + ".weight", {out, in, k, k}, Init::fan_in});
    specs.push_back({p + ".bias", {out}, Init::zeros});
  }
  void time_mlp(const std::string& p, std::size_t e, std::size_t d) {
    linear(p + ".fc1", e, d);
    linear(p + ".fc2", d, d);
  }
  void swin_block(const std::string& p, const DenoiserConfig& c, std::size_t stage) {
    const std::size_t d = c.stage_dim(stage), w = std::size_t(c.window_size);
    norm(p + ".norm1", d);
    linear(p + ".attn.qkv", d, 3 * d);
    specs.push_back({p + ".attn.rel_bias", {(2 * w - 1) * (2 * w - 1), std::size_t(c.num_heads[stage])}, Init::normal});
    linear(p + ".attn.proj", d, d);
    norm(p + ".norm2", d);
    linear(p + ".mlp.fc1", d, d * std::size_t(c.mlp_ratio));
    linear(p + ".mlp.fc2", d * std::size_t(c.mlp_ratio), d);
    time_mlp(p + ".time", c.time_dim(), d);
  }
  void res_block(const std::string& p, std::size_t in, std::size_t out, std::size_t e) {
    norm(p + ".norm1", in);
    conv(p + ".conv1", in, out, 3);
    time_mlp(p + ".time", e, out);
    norm(p + ".norm2", out);
    conv(p + ".conv2", out, out, 3);
    if (in != out) conv(p + ".skip", in, out, 1);
  }
};

/// Input channels of block j at U-Net level i on the encoder side.
inline std::size_t unet_down_in(const DenoiserConfig& c, std::size_t i, std::size_t j) {
  if (j > 0) return c.stage_dim(i);
  return i == 0 ? c.stage_dim(0) : c.stage_dim(i - 1);
}

}  // namespace detail

inline std::vector<ParamSpec> param_inventory(const DenoiserConfig& c) {
  c.validate();
  detail::Inventory inv;
  const std::size_t S = c.stages(), C = std::size_t(c.in_channels), E = c.time_dim();
  if (c.backbone == Backbone::swin) {
    const std::size_t pp = std::size_t(c.patch_size * c.patch_size);
    inv.linear("patch_embed", C * pp, c.stage_dim(0));
    inv.norm("patch_embed.norm", c.stage_dim(0));
    for (std::size_t i = 0; i + 1 < S; ++i) {
      for (int j = 0; j < c.depths[i]; ++j)
        inv.swin_block("enc" + std::to_string(i) + ".block" + std::to_string(j), c, i);
      inv.norm("enc" + std::to_string(i) + ".merge.norm", 4 * c.stage_dim(i));
      inv.linear("enc" + std::to_string(i) + ".merge.reduction", 4 * c.stage_dim(i), 2 * c.stage_dim(i), false);
    }
    for (int j = 0; j < c.depths[S - 1]; ++j) inv.swin_block("mid.block" + std::to_string(j), c, S - 1);
    for (std::size_t k = S - 1; k-- > 0;) {
      const std::string p = "dec" + std::to_string(k);
      inv.linear(p + ".expand", c.stage_dim(k + 1), 2 * c.stage_dim(k + 1), false);
      inv.norm(p + ".expand.norm", c.stage_dim(k));
      inv.linear(p + ".fuse", 2 * c.stage_dim(k), c.stage_dim(k));
      for (int j = 0; j < c.depths[k]; ++j) inv.swin_block(p + ".block" + std::to_string(j), c, k);
    }
    inv.norm("head.norm", c.stage_dim(0));
    inv.linear("head.proj", c.stage_dim(0), C * pp);
  } else {
    inv.conv("conv_in", C, c.stage_dim(0), 3);
    for (std::size_t i = 0; i < S; ++i) {
      for (int j = 0; j < c.depths[i]; ++j)
        inv.res_block("down" + std::to_string(i) + ".block" + std::to_string(j),
                      detail::unet_down_in(c, i, std::size_t(j)), c.stage_dim(i), E);
      if (i + 1 < S) inv.conv("down" + std::to_string(i) + ".downsample", c.stage_dim(i), c.stage_dim(i), 3);
    }
    inv.res_block("mid.block0", c.stage_dim(S - 1), c.stage_dim(S - 1), E);
    for (std::size_t k = S; k-- > 0;) {
      const std::string p = "up" + std::to_string(k);
      if (k + 1 < S) inv.conv(p + ".upsample", c.stage_dim(k + 1), c.stage_dim(k), 3);
      for (int j = 0; j < c.depths[k]; ++j)
        inv.res_block(p + ".block" + std::to_string(j), j == 0 ? 2 * c.stage_dim(k) : c.stage_dim(k),
                      c.stage_dim(k), E);
    }
    inv.norm("out.norm", c.stage_dim(0));
    inv.conv("out.conv", c.stage_dim(0), C, 3);
  }
  return inv.specs;
}

inline std::size_t param_count(const DenoiserConfig& c) {
  std::size_t n = 0;
  for (const auto& s : param_inventory(c)) n += numel(s.shape);
  return n;
}

/// Floating-point operations of one forward pass on a single image,
/// counted as 2 x multiply-accumulates of every matrix product, attention
/// product and convolution.
inline std::uint64_t flop_count(const DenoiserConfig& c) {
  c.validate();
  std::uint64_t macs = 0;
  const std::uint64_t S = c.stages(), C = std::uint64_t(c.in_channels), E = c.time_dim();
  auto time_mlp = [&](std::uint64_t d) { macs += E * d + d * d; };
  if (c.backbone == Backbone::swin) {
    const std::uint64_t pp = std::uint64_t(c.patch_size * c.patch_size), w = std::uint64_t(c.window_size);
    const bool concat = c.time_injection == TimeInjection::concat_token;
    auto block = [&](std::uint64_t stage) {
      const std::uint64_t G = c.stage_grid(stage), D = c.stage_dim(stage), L = G * G;
      const std::uint64_t n = w * w + (concat ? 1 : 0), nw = L / (w * w);
      time_mlp(D);
      macs += nw * n * D * 3 * D;      // qkv
      macs += 2 * nw * n * n * D;      // scores and weighted values
      macs += L * D * D;               // output projection
      macs += 2 * L * D * D * std::uint64_t(c.mlp_ratio);
    };
    const std::uint64_t G0 = c.stage_grid(0), D0 = c.stage_dim(0);
    macs += G0 * G0 * C * pp * D0;
    for (std::uint64_t i = 0; i + 1 < S; ++i) {
      for (int j = 0; j < c.depths[i]; ++j) block(i);
      const std::uint64_t g = c.stage_grid(i + 1), d = c.stage_dim(i);
      macs += g * g * 4 * d * 2 * d;
    }
    for (int j = 0; j < c.depths[S - 1]; ++j) block(S - 1);
    for (std::uint64_t k = S - 1; k-- > 0;) {
      const std::uint64_t gn = c.stage_grid(k + 1), dn = c.stage_dim(k + 1);
      const std::uint64_t g = c.stage_grid(k), d = c.stage_dim(k);
      macs += gn * gn * dn * 2 * dn;
      macs += g * g * 2 * d * d;
      for (int j = 0; j < c.depths[k]; ++j) block(k);
    }
    macs += G0 * G0 * D0 * C * pp;
  } else {
    auto conv = [&](std::uint64_t out_side, std::uint64_t in, std::uint64_t out, std::uint64_t k) {
      macs += out_side * out_side * in * k * k * out;
    };
    auto res = [&](std::uint64_t side, std::uint64_t in, std::uint64_t out) {
      conv(side, in, out, 3);
      time_mlp(out);
      conv(side, out, out, 3);
      if (in != out) conv(side, in, out, 1);
    };
    conv(c.stage_grid(0), C, c.stage_dim(0), 3);
    for (std::uint64_t i = 0; i < S; ++i) {
      for (int j = 0; j < c.depths[i]; ++j)
        res(c.stage_grid(i), detail::unet_down_in(c, i, std::size_t(j)), c.stage_dim(i));
      if (i + 1 < S) conv(c.stage_grid(i + 1), c.stage_dim(i), c.stage_dim(i), 3);
    }
    res(c.stage_grid(S - 1), c.stage_dim(S - 1), c.stage_dim(S - 1));
    for (std::uint64_t k = S; k-- > 0;) {
      if (k + 1 < S) conv(c.stage_grid(k), c.stage_dim(k + 1), c.stage_dim(k), 3);
      for (int j = 0; j < c.depths[k]; ++j)
        res(c.stage_grid(k), j == 0 ? 2 * c.stage_dim(k) : c.stage_dim(k), c.stage_dim(k));
    }
    conv(c.stage_grid(0), c.stage_dim(0), C, 3);
  }
  return 2 * macs;
}

// -------------------------------------------------------------- weights

/// Named parameter tensors of one denoiser.
template <class T>
struct DenoiserWeights {
  std::map<std::string, Tensor<T>> tensors;

  const Tensor<T>& at(const std::string& name) const {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw std::out_of_range("missing weight '" + name + "'");
    return it->second;
  }
  std::size_t element_count() const {
    std::size_t n = 0;
    for (const auto& [k, v] : tensors) n += v.size();
    return n;
  }
  template <class U>
  DenoiserWeights<U> cast() const {
    DenoiserWeights<U> out;
    for (const auto& [k, v] : tensors) out.tensors.emplace(k, v.template cast<U>());
    return out;
  }
  friend bool operator==(const DenoiserWeights&, const DenoiserWeights&) = default;
};

template <class T>
using GradientMap = std::map<std::string, std::vector<T>>;

/// Throws unless the weight names and shapes equal the config's inventory.
template <class T>
void check_weights(const DenoiserWeights<T>& w, const DenoiserConfig& c) {
  const auto inv = param_inventory(c);
  if (inv.size() != w.tensors.size())
    throw std::invalid_argument("weight set has " + std::to_string(w.tensors.size()) + " tensors, config expects " +
                                std::to_string(inv.size()));
  for (const auto& s : inv) {
    const auto& t = w.at(s.name);
    if (t.shape != s.shape)
      throw std::invalid_argument("weight '" + s.name + "' has shape " + shape_string(t.shape) + ", expected " +
                                  shape_string(s.shape));
  }
}

template <class T>
DenoiserWeights<T> init_weights(const DenoiserConfig& c, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  DenoiserWeights<T> w;
  for (const auto& s : param_inventory(c)) {
    Tensor<T> t(s.shape);
    switch (s.init) {
      case Init::zeros: break;
      case Init::ones: std::fill(t.data.begin(), t.data.end(), T(1)); break;
      case Init::normal:
        for (auto& v : t.data) v = T(0.02 * normal(rng));
        break;
      case Init::fan_in: {
        const double std_dev = 1.0 / std::sqrt(double(t.size() / s.shape[0]));
        for (auto& v : t.data) v = T(std_dev * normal(rng));
        break;
      }
    }
    w.tensors.emplace(s.name, std::move(t));
  }
  return w;
}

template <class T>
GradientMap<T> zero_gradients(const DenoiserWeights<T>& w) {
  GradientMap<T> g;
  for (const auto& [k, v] : w.tensors) g.emplace(k, std::vector<T>(v.size(), T{0}));
  return g;
}

/// Sinusoidal embedding of integer timesteps: [B, dim], sines then cosines.
template <class T>
Tensor<T> sinusoidal_embedding(std::span<const int> t, std::size_t dim) {
  const std::size_t half = dim / 2;
  Tensor<T> out(Shape{t.size(), dim});
  for (std::size_t b = 0; b < t.size(); ++b)
    for (std::size_t i = 0; i < half; ++i) {
      const double f = std::exp(-std::log(10000.0) * double(i) / double(half));
      out.data[b * dim + i] = T(std::sin(double(t[b]) * f));
      out.data[b * dim + half + i] = T(std::cos(double(t[b]) * f));
    }
  return out;
}

// -------------------------------------------------------------- building blocks

/// Binds named weights as graph parameters.
template <class T>
class WeightBinder {
 public:
  WeightBinder(nn::Graph<T>& g, const DenoiserWeights<T>& w, GradientMap<T>* grads)
      : g_(g), w_(w), grads_(grads) {}
  nn::Var operator()(const std::string& name) const {
    std::vector<T>* sink = nullptr;
    if (grads_) sink = &(*grads_)[name];
    return g_.parameter(w_.at(name), sink);
  }
  nn::Graph<T>& graph() const { return g_; }

 private:
  nn::Graph<T>& g_;
  const DenoiserWeights<T>& w_;
  GradientMap<T>* grads_;
};

/// Per-block time token: two learnable linear layers with a SiLU between,
/// applied to the sinusoidal embedding [B, E]. Returns [B, D].
template <class T>
nn::Var time_token(nn::Graph<T>& g, nn::Var sinusoid, const WeightBinder<T>& p, const std::string& prefix) {
  nn::Var h = g.linear(sinusoid, p(prefix + ".fc1.weight"), p(prefix + ".fc1.bias"));
  h = g.silu(h);
  return g.linear(h, p(prefix + ".fc2.weight"), p(prefix + ".fc2.bias"));
}

struct AttentionGeometry {
  std::size_t batch = 1, grid_h = 0, grid_w = 0, channels = 0, heads = 1, window = 1, shift = 0;
};

struct AttentionParams {
  nn::Var qkv_weight, qkv_bias, rel_bias, proj_weight, proj_bias;
};

/// Windowed multi-head self-attention over tokens xn [B, L, D].
///
/// concat_token: the time token tt [B, D] is appended to every window,
/// attention runs over window^2 + 1 tokens, and the time token's output
/// is dropped before the projection. add: tt is broadcast-added to every
/// token first. An invalid tt disables time conditioning.
template <class T>
nn::Var windowed_attention(nn::Graph<T>& g, nn::Var xn, nn::Var tt, const AttentionParams& p,
                           const AttentionGeometry& geo, TimeInjection mode, std::vector<T>* probs = nullptr) {
  const std::size_t B = geo.batch, L = geo.grid_h * geo.grid_w, D = geo.channels, w = geo.window;
  const std::size_t ws = w * w, nw = L / ws;
  if (g.size(xn) != B * L * D) throw std::invalid_argument("windowed_attention: token shape mismatch");
  const bool concat = tt.valid() && mode == TimeInjection::concat_token;
  if (tt.valid() && g.size(tt) != B * D)
    throw std::invalid_argument("windowed_attention: time token width " + std::to_string(g.size(tt) / B) +
                                " != token width " + std::to_string(D));
  if (tt.valid() && mode == TimeInjection::add) xn = g.add_broadcast(xn, tt, L, D, 1);

  nn::Var win = g.gather_rows(xn, nn::partition_index(B, geo.grid_h, geo.grid_w, w, geo.shift), D,
                              Shape{B * nw, ws, D});
  if (concat) {
    auto owner = std::make_shared<std::vector<nn::Index>>(B * nw);
    for (std::size_t m = 0; m < B * nw; ++m) (*owner)[m] = nn::Index(m / nw);
    nn::Var ttw = g.gather_rows(tt, owner, D, Shape{B * nw, 1, D});
    win = g.concat(win, ttw, 1);
  }
  nn::Var qkv = g.linear(win, p.qkv_weight, p.qkv_bias);
  std::shared_ptr<const std::vector<T>> mask;
  if (geo.shift > 0)
    mask = std::make_shared<const std::vector<T>>(nn::shifted_attention_mask<T>(geo.grid_h, geo.grid_w, w, geo.shift));
  nn::Var att = g.window_attention(qkv, geo.heads, ws, p.rel_bias, nn::relative_position_index(w), mask, nw, probs);
  if (concat) att = g.slice(att, 1, 0, ws);
  att = g.linear(att, p.proj_weight, p.proj_bias);
  return g.gather_rows(att, nn::reverse_index(B, geo.grid_h, geo.grid_w, w, geo.shift), D, Shape{B, L, D});
}

// -------------------------------------------------------------- network

/// Time-conditioned noise predictor eps_theta(x, t).
template <class T>
class Denoiser {
 public:
  explicit Denoiser(DenoiserConfig c) : c_(std::move(c)) { c_.validate(); }

  const DenoiserConfig& config() const { return c_; }

  /// Records the forward pass for x [B, C, H, W] and timesteps t (one per
  /// sample) on g; returns the predicted noise with x's shape. Gradients
  /// of bound weights accumulate into grads when it is non-null.
  nn::Var forward(nn::Graph<T>& g, const DenoiserWeights<T>& w, GradientMap<T>* grads, const Tensor<T>& x,
                  std::span<const int> t) const {
    const std::size_t S = std::size_t(c_.image_size), C = std::size_t(c_.in_channels);
    if (x.rank() != 4 || x.dim(1) != C || x.dim(2) != S || x.dim(3) != S)
      throw std::invalid_argument("denoiser input " + shape_string(x.shape) + " does not match config (" +
                                  std::to_string(C) + " channels, " + std::to_string(S) + "x" +
                                  std::to_string(S) + ")");
    if (t.size() != x.dim(0)) throw std::invalid_argument("denoiser needs one timestep per sample");
    for (int ti : t)
      if (ti < 0) throw std::out_of_range("negative timestep");
    check_weights(w, c_);
    WeightBinder<T> p(g, w, grads);
    nn::Var sinusoid = g.constant(sinusoidal_embedding<T>(t, c_.time_dim()));
    nn::Var in = g.constant(x);
    return c_.backbone == Backbone::swin ? swin_forward(g, p, in, sinusoid, x.dim(0))
                                         : unet_forward(g, p, in, sinusoid, x.dim(0));
  }

  Tensor<T> predict(const DenoiserWeights<T>& w, const Tensor<T>& x, std::span<const int> t) const {
    nn::Graph<T> g(false);
    return g.value(forward(g, w, nullptr, x, t));
  }

 private:
  nn::Var swin_block(nn::Graph<T>& g, const WeightBinder<T>& p, nn::Var h, nn::Var sinusoid, const std::string& pre,
                     std::size_t stage, std::size_t block, std::size_t B) const {
    const std::size_t G = c_.stage_grid(stage), D = c_.stage_dim(stage);
    nn::Var tt = time_token(g, sinusoid, p, pre + ".time");
    nn::Var xn = g.layer_norm(h, p(pre + ".norm1.weight"), p(pre + ".norm1.bias"));
    const AttentionParams ap{p(pre + ".attn.qkv.weight"), p(pre + ".attn.qkv.bias"), p(pre + ".attn.rel_bias"),
                             p(pre + ".attn.proj.weight"), p(pre + ".attn.proj.bias")};
    const AttentionGeometry geo{B, G, G, D, std::size_t(c_.num_heads[stage]), std::size_t(c_.window_size),
                                c_.stage_shift(stage, block)};
    h = g.add(h, windowed_attention(g, xn, tt, ap, geo, c_.time_injection));
    nn::Var m = g.layer_norm(h, p(pre + ".norm2.weight"), p(pre + ".norm2.bias"));
    m = g.gelu(g.linear(m, p(pre + ".mlp.fc1.weight"), p(pre + ".mlp.fc1.bias")));
    m = g.linear(m, p(pre + ".mlp.fc2.weight"), p(pre + ".mlp.fc2.bias"));
    return g.add(h, m);
  }

  /// 2x2 neighbourhood concat [B, G^2, D] -> [B, (G/2)^2, 4D], then norm and reduction to 2D.
  nn::Var patch_merge(nn::Graph<T>& g, const WeightBinder<T>& p, nn::Var h, const std::string& pre,
                      std::size_t stage, std::size_t B) const {
    const std::size_t G = c_.stage_grid(stage), D = c_.stage_dim(stage), H = G / 2;
    auto rows = std::make_shared<std::vector<nn::Index>>(B * H * H * 4);
    std::size_t o = 0;
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < H; ++x)
          for (std::size_t k = 0; k < 4; ++k) {
            const std::size_t dy = k % 2, dx = k / 2;
            (*rows)[o++] = nn::Index((b * G + 2 * y + dy) * G + 2 * x + dx);
          }
    nn::Var m = g.gather_rows(h, rows, D, Shape{B, H * H, 4 * D});
    m = g.layer_norm(m, p(pre + ".norm.weight"), p(pre + ".norm.bias"));
    return g.linear(m, p(pre + ".reduction.weight"));
  }

  /// [B, G^2, D'] -> linear to 2D' -> [B, (2G)^2, D'/2] -> norm.
  nn::Var patch_expand(nn::Graph<T>& g, const WeightBinder<T>& p, nn::Var h, const std::string& pre,
                       std::size_t from_stage, std::size_t B) const {
    const std::size_t G = c_.stage_grid(from_stage), Dn = c_.stage_dim(from_stage), d = Dn / 2, G2 = 2 * G;
    nn::Var e = g.linear(h, p(pre + ".weight"));
    auto rows = std::make_shared<std::vector<nn::Index>>(B * G2 * G2);
    std::size_t o = 0;
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t Y = 0; Y < G2; ++Y)
        for (std::size_t X = 0; X < G2; ++X) {
          const std::size_t k = (Y % 2) * 2 + X % 2;
          (*rows)[o++] = nn::Index(((b * G + Y / 2) * G + X / 2) * 4 + k);
        }
    e = g.gather_rows(e, rows, d, Shape{B, G2 * G2, d});
    return g.layer_norm(e, p(pre + ".norm.weight"), p(pre + ".norm.bias"));
  }

  /// Element map between an image [B, C, H, W] and patch tokens [B, G^2, C p^2].
  std::shared_ptr<std::vector<nn::Index>> patch_map(std::size_t B) const {
    const std::size_t C = std::size_t(c_.in_channels), P = std::size_t(c_.patch_size);
    const std::size_t G = c_.stage_grid(0), S = std::size_t(c_.image_size), K = C * P * P;
    auto idx = std::make_shared<std::vector<nn::Index>>(B * G * G * K);
    std::size_t o = 0;
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t gy = 0; gy < G; ++gy)
        for (std::size_t gx = 0; gx < G; ++gx)
          for (std::size_t c = 0; c < C; ++c)
            for (std::size_t py = 0; py < P; ++py)
              for (std::size_t px = 0; px < P; ++px)
                (*idx)[o++] = nn::Index(((b * C + c) * S + gy * P + py) * S + gx * P + px);
    return idx;
  }

  nn::Var swin_forward(nn::Graph<T>& g, const WeightBinder<T>& p, nn::Var x, nn::Var sinusoid, std::size_t B) const {
    const std::size_t St = c_.stages(), C = std::size_t(c_.in_channels), P = std::size_t(c_.patch_size);
    const std::size_t G0 = c_.stage_grid(0), K = C * P * P, S = std::size_t(c_.image_size);
    const auto to_tokens = patch_map(B);
    nn::Var h = g.gather(x, to_tokens, Shape{B, G0 * G0, K});
    h = g.linear(h, p("patch_embed.weight"), p("patch_embed.bias"));
    h = g.layer_norm(h, p("patch_embed.norm.weight"), p("patch_embed.norm.bias"));

    std::vector<nn::Var> skips;
    for (std::size_t i = 0; i + 1 < St; ++i) {
      const std::string pre = "enc" + std::to_string(i);
      for (int j = 0; j < c_.depths[i]; ++j)
        h = swin_block(g, p, h, sinusoid, pre + ".block" + std::to_string(j), i, std::size_t(j), B);
      skips.push_back(h);
      h = patch_merge(g, p, h, pre + ".merge", i, B);
    }
    for (int j = 0; j < c_.depths[St - 1]; ++j)
      h = swin_block(g, p, h, sinusoid, "mid.block" + std::to_string(j), St - 1, std::size_t(j), B);
    for (std::size_t k = St - 1; k-- > 0;) {
      const std::string pre = "dec" + std::to_string(k);
      h = patch_expand(g, p, h, pre + ".expand", k + 1, B);
      h = g.concat(h, skips[k], 2);
      h = g.linear(h, p(pre + ".fuse.weight"), p(pre + ".fuse.bias"));
      for (int j = 0; j < c_.depths[k]; ++j)
        h = swin_block(g, p, h, sinusoid, pre + ".block" + std::to_string(j), k, std::size_t(j), B);
    }
    h = g.layer_norm(h, p("head.norm.weight"), p("head.norm.bias"));
    h = g.linear(h, p("head.proj.weight"), p("head.proj.bias"));

    auto to_image = std::make_shared<std::vector<nn::Index>>(to_tokens->size());
    for (std::size_t i = 0; i < to_tokens->size(); ++i)
      (*to_image)[static_cast<std::size_t>((*to_tokens)[i])] = nn::Index(i);
    return g.gather(h, to_image, Shape{B, C, S, S});
  }

  nn::Var res_block(nn::Graph<T>& g, const WeightBinder<T>& p, nn::Var x, nn::Var sinusoid, const std::string& pre,
                    std::size_t in, std::size_t out) const {
    const Shape& s = g.shape(x);
    const std::size_t HW = s[2] * s[3];
    nn::Var h = g.group_norm(x, detail::norm_groups(in), p(pre + ".norm1.weight"), p(pre + ".norm1.bias"));
    h = g.conv2d(g.silu(h), p(pre + ".conv1.weight"), p(pre + ".conv1.bias"), 1, 1);
    h = g.add_broadcast(h, time_token(g, sinusoid, p, pre + ".time"), 1, out, HW);
    h = g.group_norm(h, detail::norm_groups(out), p(pre + ".norm2.weight"), p(pre + ".norm2.bias"));
    h = g.conv2d(g.silu(h), p(pre + ".conv2.weight"), p(pre + ".conv2.bias"), 1, 1);
    nn::Var skip = in == out ? x : g.conv2d(x, p(pre + ".skip.weight"), p(pre + ".skip.bias"), 1, 0);
    return g.add(skip, h);
  }

  static nn::Var upsample2(nn::Graph<T>& g, nn::Var x) {
    const Shape s = g.shape(x);
    const std::size_t BC = s[0] * s[1], H = s[2], W = s[3];
    auto idx = std::make_shared<std::vector<nn::Index>>(BC * 4 * H * W);
    std::size_t o = 0;
    for (std::size_t i = 0; i < BC; ++i)
      for (std::size_t y = 0; y < 2 * H; ++y)
        for (std::size_t x2 = 0; x2 < 2 * W; ++x2) (*idx)[o++] = nn::Index((i * H + y / 2) * W + x2 / 2);
    return g.gather(x, idx, Shape{s[0], s[1], 2 * H, 2 * W});
  }

  nn::Var unet_forward(nn::Graph<T>& g, const WeightBinder<T>& p, nn::Var x, nn::Var sinusoid, std::size_t) const {
    const std::size_t St = c_.stages();
    nn::Var h = g.conv2d(x, p("conv_in.weight"), p("conv_in.bias"), 1, 1);
    std::vector<nn::Var> skips;
    for (std::size_t i = 0; i < St; ++i) {
      const std::string pre = "down" + std::to_string(i);
      for (int j = 0; j < c_.depths[i]; ++j)
        h = res_block(g, p, h, sinusoid, pre + ".block" + std::to_string(j), detail::unet_down_in(c_, i, std::size_t(j)),
                      c_.stage_dim(i));
      skips.push_back(h);
      if (i + 1 < St) h = g.conv2d(h, p(pre + ".downsample.weight"), p(pre + ".downsample.bias"), 2, 1);
    }
    h = res_block(g, p, h, sinusoid, "mid.block0", c_.stage_dim(St - 1), c_.stage_dim(St - 1));
    for (std::size_t k = St; k-- > 0;) {
      const std::string pre = "up" + std::to_string(k);
      if (k + 1 < St) h = g.conv2d(upsample2(g, h), p(pre + ".upsample.weight"), p(pre + ".upsample.bias"), 1, 1);
      h = g.concat(h, skips[k], 1);
      for (int j = 0; j < c_.depths[k]; ++j)
        h = res_block(g, p, h, sinusoid, pre + ".block" + std::to_string(j),
                      j == 0 ? 2 * c_.stage_dim(k) : c_.stage_dim(k), c_.stage_dim(k));
    }
    h = g.group_norm(h, detail::norm_groups(c_.stage_dim(0)), p("out.norm.weight"), p("out.norm.bias"));
    return g.conv2d(g.silu(h), p("out.conv.weight"), p("out.conv.bias"), 1, 1);
  }

  DenoiserConfig c_;
};

// ------------------------------------------------------- standalone entry points

/// Linear layers of one block's time embedding.
template <class T>
struct TimeTokenWeights {
  Tensor<T> fc1_weight, fc1_bias, fc2_weight, fc2_bias;

  /// Extracts the time embedding of the block with the given prefix.
  static TimeTokenWeights from(const DenoiserWeights<T>& w, const std::string& block_prefix) {
    const std::string p = block_prefix + ".time";
    return {w.at(p + ".fc1.weight"), w.at(p + ".fc1.bias"), w.at(p + ".fc2.weight"), w.at(p + ".fc2.bias")};
  }
};

/// Token vector [D] for timestep t under one block's weights.
template <class T>
std::vector<T> time_token(int t, const TimeTokenWeights<T>& w) {
  if (t < 0) throw std::out_of_range("negative timestep");
  nn::Graph<T> g(false);
  const int ts[1] = {t};
  const std::size_t E = w.fc1_weight.dim(1);
  nn::Var h = g.linear(g.constant(sinusoidal_embedding<T>(ts, E)), g.parameter(w.fc1_weight, nullptr),
                       g.parameter(w.fc1_bias, nullptr));
  h = g.linear(g.silu(h), g.parameter(w.fc2_weight, nullptr), g.parameter(w.fc2_bias, nullptr));
  return g.value(h).data;
}

template <class T>
struct AttentionWeights {
  Tensor<T> qkv_weight, qkv_bias, rel_bias, proj_weight, proj_bias;

  static AttentionWeights from(const DenoiserWeights<T>& w, const std::string& block_prefix) {
    const std::string p = block_prefix + ".attn";
    return {w.at(p + ".qkv.weight"), w.at(p + ".qkv.bias"), w.at(p + ".rel_bias"), w.at(p + ".proj.weight"),
            w.at(p + ".proj.bias")};
  }
};

template <class T>
struct AttentionResult {
  nn::TokenGrid<T> output;
  /// Softmax rows [windows, heads, n, n], n = window^2 (+1 with a time token).
  std::vector<T> probabilities;
  std::size_t tokens_per_window = 0;
};

/// Window attention over a token grid with an optional time token tt [N, D]
/// (empty for none). Shift selects the shifted-window mask.
template <class T>
AttentionResult<T> attend_with_time(const nn::TokenGrid<T>& grid, const Tensor<T>& tt, const AttentionWeights<T>& w,
                                    std::size_t heads, std::size_t window, std::size_t shift,
                                    TimeInjection mode = TimeInjection::concat_token) {
  grid.validate();
  const std::size_t B = grid.batch(), D = grid.channels();
  if (!tt.data.empty() && tt.size() != B * D)
    throw std::invalid_argument("time token dimension " + std::to_string(tt.size() / std::max<std::size_t>(B, 1)) +
                                " does not match token channels " + std::to_string(D));
  nn::Graph<T> g(false);
  nn::Var x = g.constant(grid.tokens);
  nn::Var t = tt.data.empty() ? nn::Var{} : g.constant(Tensor<T>(Shape{B, D}, tt.data));
  const AttentionParams p{g.parameter(w.qkv_weight, nullptr), g.parameter(w.qkv_bias, nullptr),
                          g.parameter(w.rel_bias, nullptr), g.parameter(w.proj_weight, nullptr),
                          g.parameter(w.proj_bias, nullptr)};
  AttentionResult<T> r;
  nn::Var out = windowed_attention(g, x, t, p, {B, grid.grid_h, grid.grid_w, D, heads, window, shift}, mode,
                                   &r.probabilities);
  r.output = {g.value(out), grid.grid_h, grid.grid_w};
  r.tokens_per_window = window * window + ((t.valid() && mode == TimeInjection::concat_token) ? 1 : 0);
  return r;
}

}  // namespace artfix
