#pragma once

#include <cmath>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "artfix/denoiser.hpp"

namespace artfix {

struct AdamConfig {
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  /// Global L2 gradient-norm clip; unset disables clipping.
  std::optional<double> grad_clip;

  void validate() const {
    if (!(learning_rate >= 0)) throw std::invalid_argument("learning_rate must be >= 0");
    if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1)) throw std::invalid_argument("adam betas must lie in [0,1)");
    if (!(eps > 0)) throw std::invalid_argument("adam eps must be positive");
    if (grad_clip && !(*grad_clip > 0)) throw std::invalid_argument("grad_clip must be positive");
  }
};

/// Adam with bias correction and no weight decay.
template <class T>
class Adam {
 public:
  explicit Adam(AdamConfig c = {}) : c_(c) { c_.validate(); }

  const AdamConfig& config() const { return c_; }
  long steps() const { return t_; }

  /// Applies one update; returns the gradient norm before clipping.
  double step(DenoiserWeights<T>& w, const GradientMap<T>& grads) {
    double norm2 = 0;
    for (const auto& [name, g] : grads)
      for (T v : g) norm2 += double(v) * double(v);
    const double norm = std::sqrt(norm2);
    const double scale = (c_.grad_clip && norm > *c_.grad_clip) ? *c_.grad_clip / norm : 1.0;

    ++t_;
    const double bc1 = 1.0 - std::pow(c_.beta1, double(t_)), bc2 = 1.0 - std::pow(c_.beta2, double(t_));
    for (auto& [name, param] : w.tensors) {
      auto git = grads.find(name);
      if (git == grads.end()) throw std::invalid_argument("adam: no gradient for '" + name + "'");
      const auto& g = git->second;
      if (g.size() != param.size()) throw std::invalid_argument("adam: gradient size mismatch for '" + name + "'");
      auto& m = m_[name];
      auto& v = v_[name];
      if (m.empty()) {
        m.assign(param.size(), T{0});
        v.assign(param.size(), T{0});
      }
      for (std::size_t i = 0; i < param.size(); ++i) {
        const double gi = double(g[i]) * scale;
        const double mi = c_.beta1 * double(m[i]) + (1 - c_.beta1) * gi;
        const double vi = c_.beta2 * double(v[i]) + (1 - c_.beta2) * gi * gi;
        m[i] = T(mi);
        v[i] = T(vi);
        const double update = c_.learning_rate * (mi / bc1) / (std::sqrt(vi / bc2) + c_.eps);
        param.data[i] = T(double(param.data[i]) - update);
      }
    }
    return norm;
  }

  /// Moment tensors keyed "adam.m/<param>" and "adam.v/<param>".
  std::map<std::string, std::vector<T>> state() const {
    std::map<std::string, std::vector<T>> s;
    for (const auto& [k, m] : m_) s.emplace("adam.m/" + k, m);
    for (const auto& [k, v] : v_) s.emplace("adam.v/" + k, v);
    return s;
  }

  void load_state(const std::map<std::string, std::vector<T>>& s, long steps) {
    m_.clear();
    v_.clear();
    for (const auto& [k, val] : s) {
      if (k.rfind("adam.m/", 0) == 0) m_[k.substr(7)] = val;
      else if (k.rfind("adam.v/", 0) == 0) v_[k.substr(7)] = val;
      else throw std::invalid_argument("unknown optimizer state entry '" + k + "'");
    }
    t_ = steps;
  }

 private:
  AdamConfig c_;
  long t_ = 0;
  std::map<std::string, std::vector<T>> m_, v_;
};

}  // namespace artfix
