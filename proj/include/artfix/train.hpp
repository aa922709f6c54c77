#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "artfix/checkpoint.hpp"
#include "artfix/data.hpp"
#include "artfix/denoiser.hpp"
#include "artfix/diffusion.hpp"
#include "artfix/optim.hpp"
#include "artfix/random.hpp"

namespace artfix {

struct TrainConfig {
  double learning_rate = 1e-4;
  int batch_size = 8;
  int total_steps = 2000;
  std::string optimizer = "adam";
  double beta1 = 0.9;
  double beta2 = 0.999;
  std::optional<double> grad_clip;
  int checkpoint_every = 500;
  std::uint64_t seed = 0;
  /// Exponential moving average of the weights; 0 disables it.
  double ema_decay = 0.0;

  void validate() const {
    if (!(learning_rate >= 0)) throw std::invalid_argument("learning_rate must be >= 0");
    if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
    if (total_steps < 0) throw std::invalid_argument("total_steps must be >= 0");
    if (optimizer != "adam") throw std::invalid_argument("optimizer must be 'adam'");
    if (checkpoint_every < 0) throw std::invalid_argument("checkpoint_every must be >= 0");
    if (!(ema_decay >= 0 && ema_decay < 1)) throw std::invalid_argument("ema_decay must lie in [0,1)");
    adam().validate();
  }

  AdamConfig adam() const {
    AdamConfig a;
    a.learning_rate = learning_rate;
    a.beta1 = beta1;
    a.beta2 = beta2;
    a.grad_clip = grad_clip;
    return a;
  }
};

/// Thrown when a step produces a non-finite loss; what() carries the dump.
struct TrainingDiverged : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Uniform timestep in [1, T].
inline int sample_timestep(Rng& rng, int T) { return rng.uniform_int(1, T); }

/// Denoiser training on clean images only. Minibatches walk epochs of a
/// seed-fixed shuffle; timesteps and noise come from one RNG whose state is
/// checkpointed, so a resumed run continues the same trajectory.
class Trainer {
 public:
  Trainer(DenoiserConfig dc, TrainConfig tc, ScheduleParams sp, std::vector<ImageTensor> images)
      : dc_(std::move(dc)), tc_(std::move(tc)), sp_(sp), schedule_(sp.build()), net_(dc_), images_(std::move(images)),
        opt_(tc_.adam()), rng_(tc_.seed) {
    tc_.validate();
    if (images_.empty()) throw std::invalid_argument("training set is empty");
    for (auto& im : images_) {
      if (im.batch() != 1 || im.channels() != std::size_t(dc_.in_channels) ||
          im.height() != std::size_t(dc_.image_size) || im.width() != std::size_t(dc_.image_size))
        throw std::invalid_argument("training image " + shape_string(im.values.shape) + " does not match the model");
      if (im.domain != ValueDomain::signed11) im = im.converted(ValueDomain::signed11);
    }
    weights_ = init_weights<float>(dc_, tc_.seed);
    if (tc_.ema_decay > 0) ema_ = weights_;
  }

  /// Continues from a checkpoint written by a trainer with the same configs.
  void resume(const Checkpoint& c) {
    if (!(c.config == dc_) || !(c.schedule == sp_)) throw std::invalid_argument("checkpoint does not match the run configuration");
    weights_ = c.weights;
    std::map<std::string, std::vector<float>> adam_state;
    for (const auto& [k, v] : c.optimizer_state) {
      if (k.rfind("ema/", 0) == 0) continue;
      adam_state.emplace(k, v);
    }
    opt_.load_state(adam_state, long(c.step));
    if (tc_.ema_decay > 0) {
      ema_ = weights_;
      for (auto& [k, t] : ema_->tensors) {
        auto it = c.optimizer_state.find("ema/" + k);
        if (it != c.optimizer_state.end()) t.data = it->second;
      }
    }
    step_ = c.step;
    rng_.restore(c.rng_state);
  }

  std::int64_t step_count() const { return step_; }
  const DenoiserWeights<float>& weights() const { return weights_; }
  const NoiseSchedule& schedule() const { return schedule_; }

  /// Indices of the minibatch used at a given step.
  std::vector<std::size_t> batch_indices(std::int64_t step) {
    const std::size_t n = images_.size(), b = std::min<std::size_t>(std::size_t(tc_.batch_size), n);
    const std::size_t per_epoch = (n + b - 1) / b;
    const std::uint64_t epoch = std::uint64_t(step) / per_epoch;
    if (!order_ || order_epoch_ != epoch) {
      order_ = shuffled_order(n, tc_.seed * 0x9e3779b97f4a7c15ull + epoch);
      order_epoch_ = epoch;
    }
    const std::size_t start = (std::size_t(step) % per_epoch) * b;
    return {order_->begin() + std::ptrdiff_t(start), order_->begin() + std::ptrdiff_t(std::min(n, start + b))};
  }

  /// One optimizer update; returns the minibatch loss.
  double step() {
    const ImageTensor x0 = stack_images(images_, batch_indices(step_));
    const std::size_t B = x0.batch(), per = x0.size() / B;
    std::vector<int> ts(B);
    for (int& t : ts) t = sample_timestep(rng_, schedule_.steps());
    const ImageTensor eps = rng_.normal_like(x0);
    ImageTensor xt = x0;
    for (std::size_t b = 0; b < B; ++b) {
      const double a = std::sqrt(schedule_.alpha_bar(ts[b])), s = std::sqrt(schedule_.one_minus_alpha_bar(ts[b]));
      for (std::size_t i = b * per; i < (b + 1) * per; ++i) xt.values[i] = a * x0.values[i] + s * eps.values[i];
    }

    nn::Graph<float> g(true);
    GradientMap<float> grads = zero_gradients(weights_);
    const nn::Var pred = net_.forward(g, weights_, &grads, xt.values.cast<float>(), ts);
    const nn::Var loss = g.mse_loss(pred, eps.values.cast<float>());
    const double L = double(g.value(loss).data[0]);
    if (!std::isfinite(L)) throw TrainingDiverged(diagnostic(L, ts));
    g.backward(loss);
    opt_.step(weights_, grads);
    if (ema_) {
      const double d = tc_.ema_decay;
      for (auto& [k, t] : ema_->tensors) {
        const auto& src = weights_.tensors.at(k).data;
        for (std::size_t i = 0; i < t.size(); ++i) t.data[i] = float(d * t.data[i] + (1 - d) * src[i]);
      }
    }
    ++step_;
    return L;
  }

  /// Snapshot of the full run state.
  Checkpoint checkpoint() const {
    Checkpoint c;
    c.config = dc_;
    c.schedule = sp_;
    c.weights = weights_;
    for (auto& [k, v] : opt_.state()) c.optimizer_state.emplace(k, v);
    if (ema_)
      for (const auto& [k, t] : ema_->tensors) c.optimizer_state.emplace("ema/" + k, t.data);
    c.step = step_;
    c.rng_state = rng_.state();
    return c;
  }

 private:
  std::string diagnostic(double loss, const std::vector<int>& ts) const {
    std::ostringstream os;
    os << "non-finite loss " << loss << " at step " << step_ << "; timesteps";
    for (int t : ts) os << ' ' << t;
    for (const auto& [k, t] : weights_.tensors) {
      std::size_t bad = 0;
      double mx = 0;
      for (float v : t.data) {
        if (!std::isfinite(v)) ++bad;
        else mx = std::max(mx, double(std::abs(v)));
      }
      if (bad) os << "\n  " << k << ": " << bad << " non-finite entries";
      else if (mx > 1e3) os << "\n  " << k << ": max |w| " << mx;
    }
    return os.str();
  }

  DenoiserConfig dc_;
  TrainConfig tc_;
  ScheduleParams sp_;
  NoiseSchedule schedule_;
  Denoiser<float> net_;
  std::vector<ImageTensor> images_;
  DenoiserWeights<float> weights_;
  std::optional<DenoiserWeights<float>> ema_;
  Adam<float> opt_;
  Rng rng_;
  std::int64_t step_ = 0;
  std::optional<std::vector<std::size_t>> order_;
  std::uint64_t order_epoch_ = 0;
};

struct TrainResult {
  Checkpoint final;
  std::vector<double> losses;
};

using CheckpointSink = std::function<void(const Checkpoint&)>;
using StepSink = std::function<void(std::int64_t step, double loss)>;

/// Runs tc.total_steps updates, handing a checkpoint to on_checkpoint every
/// checkpoint_every steps and after the last one.
inline TrainResult train(std::vector<ImageTensor> images, const DenoiserConfig& dc, const TrainConfig& tc,
                         const ScheduleParams& sp, const CheckpointSink& on_checkpoint = {},
                         const StepSink& on_step = {}) {
  Trainer tr(dc, tc, sp, std::move(images));
  TrainResult r;
  r.losses.reserve(std::size_t(tc.total_steps));
  for (int s = 0; s < tc.total_steps; ++s) {
    const double L = tr.step();
    r.losses.push_back(L);
    if (on_step) on_step(tr.step_count(), L);
    if (on_checkpoint && tc.checkpoint_every > 0 && tr.step_count() % tc.checkpoint_every == 0 &&
        s + 1 < tc.total_steps)
      on_checkpoint(tr.checkpoint());
  }
  r.final = tr.checkpoint();
  if (on_checkpoint) on_checkpoint(r.final);
  return r;
}

}  // namespace artfix
