#pragma once

#include <Eigen/Core>

#include <cmath>
#include <string>
#include <vector>

#include "biloop/error.hpp"

namespace biloop {

/// A trainable tensor and its gradient, viewed as flat arrays.
struct ParamRef {
  double* value;
  const double* grad;
  Eigen::Index size;
};

template <typename Derived, typename GradDerived>
ParamRef param_ref(Eigen::PlainObjectBase<Derived>& value,
                   const Eigen::PlainObjectBase<GradDerived>& grad) {
  require(value.size() == grad.size(), "optimizer: gradient shape mismatch");
  return ParamRef{value.data(), grad.data(), value.size()};
}

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// Adam with bias correction. Parameter order must stay fixed across steps.
class Adam {
 public:
  explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

  void set_learning_rate(double lr) { cfg_.learning_rate = lr; }
  double learning_rate() const { return cfg_.learning_rate; }

  void step(const std::vector<ParamRef>& params) {
    if (m_.empty()) {
      for (const auto& p : params) {
        m_.push_back(Eigen::ArrayXd::Zero(p.size));
        v_.push_back(Eigen::ArrayXd::Zero(p.size));
      }
    }
    require(m_.size() == params.size(), "optimizer: parameter list changed between steps");
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, double(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, double(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      const auto& p = params[i];
      Eigen::Map<Eigen::ArrayXd> value(p.value, p.size);
      Eigen::Map<const Eigen::ArrayXd> grad(p.grad, p.size);
      m_[i] = cfg_.beta1 * m_[i] + (1.0 - cfg_.beta1) * grad;
      v_[i] = cfg_.beta2 * v_[i] + (1.0 - cfg_.beta2) * grad.square();
      value -= cfg_.learning_rate * (m_[i] / bc1) / ((v_[i] / bc2).sqrt() + cfg_.epsilon);
    }
  }

 private:
  AdamConfig cfg_;
  long t_ = 0;
  std::vector<Eigen::ArrayXd> m_, v_;
};

}  // namespace biloop
