#pragma once

#include "odlc/autodiff.hpp"

namespace odlc {

struct AdamConfig {
  double learning_rate = 4e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// Bias-corrected Adam. Moments are keyed by parameter position in the set.
template <class T>
class Adam {
 public:
  explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

  const AdamConfig& config() const { return cfg_; }
  long steps() const { return step_; }
  const std::vector<Tensor<T>>& first_moments() const { return m_; }
  const std::vector<Tensor<T>>& second_moments() const { return v_; }

  /// Applies one update from the accumulated Parameter::grad values. A
  /// non-finite gradient rejects the whole step and leaves all state intact.
  void step(ParameterSet<T>& params) {
    for (size_t i = 0; i < params.size(); ++i)
      if (!params[i].grad.all_finite())
        throw Error("adam: non-finite gradient in '" + params[i].name + "', step rejected");
    if (m_.empty()) {
      for (size_t i = 0; i < params.size(); ++i) {
        m_.emplace_back(params[i].value.shape());
        v_.emplace_back(params[i].value.shape());
      }
    }
    require(m_.size() == params.size(), "adam: parameter set changed between steps");
    ++step_;
    const double b1 = cfg_.beta1, b2 = cfg_.beta2;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(step_));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(step_));
    for (size_t i = 0; i < params.size(); ++i) {
      auto& p = params[i];
      require(p.value.shape() == m_[i].shape(), "adam: shape changed for '" + p.name + "'");
      for (size_t k = 0; k < p.value.size(); ++k) {
        const double g = p.grad[k];
        const double m = b1 * m_[i][k] + (1 - b1) * g;
        const double v = b2 * v_[i][k] + (1 - b2) * g * g;
        m_[i][k] = static_cast<T>(m);
        v_[i][k] = static_cast<T>(v);
        const double mhat = m / c1, vhat = v / c2;
        p.value[k] = static_cast<T>(p.value[k] - cfg_.learning_rate * mhat / (std::sqrt(vhat) + cfg_.epsilon));
      }
    }
  }

 private:
  AdamConfig cfg_;
  long step_ = 0;
  std::vector<Tensor<T>> m_, v_;
};

template <class T>
double global_grad_norm(const ParameterSet<T>& params) {
  double s = 0;
  for (size_t i = 0; i < params.size(); ++i)
    for (T g : params[i].grad.data()) s += static_cast<double>(g) * g;
  return std::sqrt(s);
}

/// Rescales all gradients so their global L2 norm is at most max_norm.
/// Returns the norm before clipping.
template <class T>
double clip_grad_norm(ParameterSet<T>& params, double max_norm) {
  const double norm = global_grad_norm(params);
  if (norm > max_norm && norm > 0) {
    const T f = static_cast<T>(max_norm / norm);
    for (size_t i = 0; i < params.size(); ++i)
      for (T& g : params[i].grad.data()) g *= f;
  }
  return norm;
}

}  // namespace odlc
