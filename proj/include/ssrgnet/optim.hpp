#pragma once

#include <cmath>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "ssrgnet/autodiff.hpp"

namespace ssrgnet {

class OptimizerError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

struct OptimizerState {
  std::vector<Tensor> m;
  std::vector<Tensor> v;
  std::size_t step = 0;

  static OptimizerState zeros_like(const ParamStore& store) {
    OptimizerState s;
    for (const auto& p : store) {
      s.m.emplace_back(p.value.shape(), 0.0);
      s.v.emplace_back(p.value.shape(), 0.0);
    }
    return s;
  }
};

/// Learning rate per parameter group.
struct LearningRates {
  double sequence = 1e-5;
  double graph = 3e-4;
  double operator()(ParamGroup g) const { return g == ParamGroup::sequence ? sequence : graph; }
};

/// Decoupled weight decay Adam:
///   θ ← θ − lr · ( m̂ / (√v̂ + eps) + weight_decay · θ )
inline void adamw_step(ParamStore& params, const GradientMap& grads, OptimizerState& state,
                       const AdamWConfig& cfg, const LearningRates& lr) {
  if (grads.size() != params.size() || state.m.size() != params.size() ||
      state.v.size() != params.size())
    throw OptimizerError("adamw_step: parameter, gradient and moment counts differ");
  for (std::size_t p = 0; p < params.size(); ++p) {
    if (grads[p].shape() != params[p].value.shape() || state.m[p].shape() != params[p].value.shape())
      throw OptimizerError("adamw_step: shape mismatch for " + params[p].name);
    for (double g : grads[p].data())
      if (!std::isfinite(g)) throw OptimizerError("adamw_step: non-finite gradient for " + params[p].name);
  }

  const std::size_t t = ++state.step;
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
  for (std::size_t p = 0; p < params.size(); ++p) {
    const double rate = lr(params[p].group);
    auto theta = params[p].value.data();
    auto m = state.m[p].data();
    auto v = state.v[p].data();
    const auto g = grads[p].data();
    for (std::size_t i = 0; i < theta.size(); ++i) {
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
      v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
      const double mhat = m[i] / c1;
      const double vhat = v[i] / c2;
      theta[i] -= rate * (mhat / (std::sqrt(vhat) + cfg.eps) + cfg.weight_decay * theta[i]);
    }
  }
}

/// Tracks validation loss; stop once `patience` consecutive epochs fail to
/// improve on the best so far.
class EarlyStopping {
 public:
  explicit EarlyStopping(std::size_t patience) : patience_(patience) {
    if (patience == 0) throw OptimizerError("patience must be >= 1");
  }

  /// Returns true when training should stop after this epoch.
  bool update(double val_loss) {
    ++epoch_;
    if (val_loss < best_) {
      best_ = val_loss;
      best_epoch_ = epoch_;
      bad_ = 0;
      return false;
    }
    return ++bad_ >= patience_;
  }

  bool improved_last() const { return best_epoch_ == epoch_; }
  double best() const { return best_; }
  std::size_t best_epoch() const { return best_epoch_; }  // 1-based, 0 = none yet
  std::size_t epoch() const { return epoch_; }

 private:
  std::size_t patience_;
  std::size_t epoch_ = 0;
  std::size_t best_epoch_ = 0;
  std::size_t bad_ = 0;
  double best_ = std::numeric_limits<double>::infinity();
};

}  // namespace ssrgnet
