#pragma once

#include <cmath>
#include <vector>

#include "rcpilot/nn/layers.hpp"

namespace rcpilot::nn {

/// Mean squared error over every element of the batch; accumulated in double.
template <typename T>
double mse(const Tensor<T>& pred, const Tensor<T>& target) {
  require(pred.shape() == target.shape(), Errc::shape_mismatch,
          "mse: prediction " + shape_str(pred.shape()) + " vs target " + shape_str(target.shape()));
  require(pred.size() > 0, Errc::invalid_argument, "mse of empty tensors");
  double sum = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double d = static_cast<double>(pred[i]) - static_cast<double>(target[i]);
    sum += d * d;
  }
  return sum / static_cast<double>(pred.size());
}

template <typename T>
Tensor<T> mse_grad(const Tensor<T>& pred, const Tensor<T>& target) {
  require(pred.shape() == target.shape(), Errc::shape_mismatch,
          "mse: prediction " + shape_str(pred.shape()) + " vs target " + shape_str(target.shape()));
  Tensor<T> g(pred.shape());
  const T scale = static_cast<T>(2.0 / static_cast<double>(pred.size()));
  for (std::size_t i = 0; i < pred.size(); ++i) g[i] = scale * (pred[i] - target[i]);
  return g;
}

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// Adam with bias correction. Moments are kept per parameter in double.
template <typename T>
class Adam {
 public:
  explicit Adam(std::vector<Param<T>> params, AdamConfig cfg = {}) : params_(std::move(params)), cfg_(cfg) {
    require(cfg.learning_rate > 0, Errc::invalid_argument, "learning rate must be > 0");
    for (const auto& p : params_) {
      m_.emplace_back(p.value->size(), 0.0);
      v_.emplace_back(p.value->size(), 0.0);
    }
  }

  std::size_t steps() const { return t_; }

  void step() {
    ++t_;
    const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t k = 0; k < params_.size(); ++k) {
      auto& w = *params_[k].value;
      const auto& g = *params_[k].grad;
      auto& m = m_[k];
      auto& v = v_[k];
      for (std::size_t i = 0; i < w.size(); ++i) {
        const double gi = static_cast<double>(g[i]);
        m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * gi;
        v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * gi * gi;
        const double mhat = m[i] / c1;
        const double vhat = v[i] / c2;
        w[i] = static_cast<T>(static_cast<double>(w[i]) - cfg_.learning_rate * mhat / (std::sqrt(vhat) + cfg_.epsilon));
      }
    }
  }

 private:
  std::vector<Param<T>> params_;
  AdamConfig cfg_;
  std::vector<std::vector<double>> m_, v_;
  std::size_t t_ = 0;
};

template <typename T>
void zero_grad(const std::vector<Param<T>>& params) {
  for (const auto& p : params) p.grad->fill(T{0});
}

}  // namespace rcpilot::nn
