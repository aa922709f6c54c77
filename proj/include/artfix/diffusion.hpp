#pragma once

#include <cmath>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "artfix/image.hpp"

namespace artfix {

enum class ScheduleKind { linear, constant };

inline ScheduleKind parse_schedule_kind(const std::string& s) {
  if (s == "linear") return ScheduleKind::linear;
  if (s == "constant") return ScheduleKind::constant;
  throw std::invalid_argument("unknown schedule kind '" + s + "'");
}

inline const char* schedule_kind_name(ScheduleKind k) {
  return k == ScheduleKind::linear ? "linear" : "constant";
}

/// Precomputed diffusion coefficients. All arrays are indexed by the
/// timestep t directly; slot 0 of beta/alpha/posterior_var is unused
/// (beta(0) = 0) so that alpha_bar(0) = 1.
class NoiseSchedule {
 public:
  NoiseSchedule() = default;

  int steps() const { return T_; }
  ScheduleKind kind() const { return kind_; }
  double beta_start() const { return beta_start_; }
  double beta_end() const { return beta_end_; }

  double beta(int t) const { return beta_.at(check(t, 1)); }
  double alpha(int t) const { return alpha_.at(check(t, 1)); }
  double alpha_bar(int t) const { return alpha_bar_.at(check(t, 0)); }
  /// 1 - abar_t accumulated without cancellation; exactly beta_1 at t = 1.
  double one_minus_alpha_bar(int t) const { return one_minus_alpha_bar_.at(check(t, 0)); }
  double posterior_var(int t) const { return posterior_var_.at(check(t, 1)); }

  const std::vector<double>& alpha_bars() const { return alpha_bar_; }

  friend NoiseSchedule make_schedule(int, ScheduleKind, double, double);

 private:
  std::size_t check(int t, int lo) const {
    if (t < lo || t > T_)
      throw std::out_of_range("timestep " + std::to_string(t) + " outside [" + std::to_string(lo) +
                              "," + std::to_string(T_) + "]");
    return static_cast<std::size_t>(t);
  }

  int T_ = 0;
  ScheduleKind kind_ = ScheduleKind::linear;
  double beta_start_ = 0, beta_end_ = 0;
  std::vector<double> beta_, alpha_, alpha_bar_, one_minus_alpha_bar_, posterior_var_;
};

inline NoiseSchedule make_schedule(int T, ScheduleKind kind = ScheduleKind::linear,
                                   double beta_start = 1e-4, double beta_end = 0.02) {
  if (T < 1) throw std::invalid_argument("schedule needs T >= 1");
  if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0))
    throw std::invalid_argument("beta bounds must satisfy 0 < beta_start <= beta_end < 1");

  NoiseSchedule s;
  s.T_ = T;
  s.kind_ = kind;
  s.beta_start_ = beta_start;
  s.beta_end_ = beta_end;
  const auto n = static_cast<std::size_t>(T) + 1;
  s.beta_.assign(n, 0.0);
  s.alpha_.assign(n, 1.0);
  s.alpha_bar_.assign(n, 1.0);
  s.one_minus_alpha_bar_.assign(n, 0.0);
  s.posterior_var_.assign(n, 0.0);
  for (int t = 1; t <= T; ++t) {
    double b = beta_start;
    if (kind == ScheduleKind::linear && T > 1)
      b = beta_start + (beta_end - beta_start) * double(t - 1) / double(T - 1);
    s.beta_[t] = b;
    s.alpha_[t] = 1.0 - b;
    s.alpha_bar_[t] = s.alpha_bar_[t - 1] * s.alpha_[t];
    s.one_minus_alpha_bar_[t] = s.one_minus_alpha_bar_[t - 1] + s.alpha_bar_[t - 1] * b;
    s.posterior_var_[t] = b * s.one_minus_alpha_bar_[t - 1] / s.one_minus_alpha_bar_[t];
  }
  return s;
}

namespace detail {
inline void require_same(const ImageTensor& a, const ImageTensor& b, const char* what) {
  if (!a.same_shape(b))
    throw std::invalid_argument(std::string(what) + ": shape mismatch " + shape_string(a.values.shape) +
                                " vs " + shape_string(b.values.shape));
}
}  // namespace detail

/// Closed-form marginal sqrt(abar_t) x0 + sqrt(1 - abar_t) eps.
inline ImageTensor forward_sample(const ImageTensor& x0, int t, const ImageTensor& eps,
                                  const NoiseSchedule& s) {
  detail::require_same(x0, eps, "forward_sample");
  const double ab = s.alpha_bar(t);
  if (t == 0) return x0;
  const double a = std::sqrt(ab), b = std::sqrt(s.one_minus_alpha_bar(t));
  ImageTensor out = x0;
  for (std::size_t i = 0; i < out.size(); ++i)
    out.values[i] = a * x0.values[i] + b * eps.values[i];
  return out;
}

/// One Markov transition q(x_t | x_{t-1}).
inline ImageTensor forward_step(const ImageTensor& prev, int t, const ImageTensor& eps,
                                const NoiseSchedule& s) {
  detail::require_same(prev, eps, "forward_step");
  const double a = std::sqrt(s.alpha(t)), b = std::sqrt(s.beta(t));
  ImageTensor out = prev;
  for (std::size_t i = 0; i < out.size(); ++i)
    out.values[i] = a * prev.values[i] + b * eps.values[i];
  return out;
}

struct Posterior {
  ImageTensor mean;
  double variance = 0;
};

/// Parameters of q(x_{t-1} | x_t, x0).
inline Posterior posterior_params(const ImageTensor& x0, const ImageTensor& xt, int t,
                                  const NoiseSchedule& s) {
  if (t == 0) throw std::out_of_range("posterior undefined at t = 0");
  detail::require_same(x0, xt, "posterior_params");
  const double om = s.one_minus_alpha_bar(t);
  const double c0 = std::sqrt(s.alpha_bar(t - 1)) * s.beta(t) / om;
  const double ct = std::sqrt(s.alpha(t)) * s.one_minus_alpha_bar(t - 1) / om;
  Posterior p{xt, s.posterior_var(t)};
  for (std::size_t i = 0; i < xt.size(); ++i) p.mean.values[i] = c0 * x0.values[i] + ct * xt.values[i];
  return p;
}

struct DiffusionLossSample {
  ImageTensor x0;
  int t = 1;
  ImageTensor epsilon;
  ImageTensor xt;
};

inline DiffusionLossSample make_loss_sample(const ImageTensor& x0, int t, const ImageTensor& eps,
                                            const NoiseSchedule& s) {
  if (t < 1) throw std::out_of_range("training timestep must be >= 1");
  return {x0, t, eps, forward_sample(x0, t, eps, s)};
}

/// Simplified objective: mean squared error between true and predicted noise.
template <class T>
double loss_target(std::span<const T> epsilon, std::span<const T> predicted) {
  if (epsilon.size() != predicted.size() || epsilon.empty())
    throw std::invalid_argument("loss_target: shape mismatch");
  double acc = 0;
  for (std::size_t i = 0; i < epsilon.size(); ++i) {
    const double d = double(predicted[i]) - double(epsilon[i]);
    acc += d * d;
  }
  return acc / double(epsilon.size());
}

inline double loss_target(const DiffusionLossSample& sample, const ImageTensor& predicted) {
  detail::require_same(sample.epsilon, predicted, "loss_target");
  return loss_target<double>(sample.epsilon.values.span(), predicted.values.span());
}

/// Ancestral step x_t -> x_{t-1} with variance equal to the posterior
/// variance; z is ignored at t = 1.
inline ImageTensor reverse_step(const ImageTensor& xt, const ImageTensor& predicted_eps, int t,
                                const ImageTensor& z, const NoiseSchedule& s) {
  if (t < 1) throw std::out_of_range("reverse_step needs t >= 1");
  detail::require_same(xt, predicted_eps, "reverse_step");
  detail::require_same(xt, z, "reverse_step");
  const double inv_sqrt_alpha = 1.0 / std::sqrt(s.alpha(t));
  const double eps_coef = s.beta(t) / std::sqrt(s.one_minus_alpha_bar(t));
  const double sigma = t == 1 ? 0.0 : std::sqrt(s.posterior_var(t));
  ImageTensor out = xt;
  for (std::size_t i = 0; i < xt.size(); ++i) {
    double v = inv_sqrt_alpha * (xt.values[i] - eps_coef * predicted_eps.values[i]);
    if (sigma != 0.0) v += sigma * z.values[i];
    out.values[i] = v;
  }
  return out;
}

}  // namespace artfix
