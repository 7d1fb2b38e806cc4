#pragma once

#include <cmath>
#include <vector>

#include "mpe/nn/layers.hpp"

namespace mpe::nn {

struct AdamWConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-2;
};

// AdamW with decoupled weight decay.
template <typename T>
class AdamW {
 public:
  AdamW(std::vector<Param<T>*> params, AdamWConfig cfg) : params_(std::move(params)), cfg_(cfg) {
    for (auto* p : params_) {
      m_.push_back(zeros_like(p->w));
      v_.push_back(zeros_like(p->w));
    }
  }

  void zero_grad() {
    for (auto* p : params_) p->g.zero();
  }

  void step() {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, t_);
    const double bc2 = 1.0 - std::pow(cfg_.beta2, t_);
    for (size_t k = 0; k < params_.size(); ++k) {
      Param<T>& p = *params_[k];
      Tensor<T>& m = m_[k];
      Tensor<T>& v = v_[k];
      const int64_t n = p.w.numel();
      for (int64_t i = 0; i < n; ++i) {
        const double g = static_cast<double>(p.g.at(i));
        const double mi = cfg_.beta1 * static_cast<double>(m.at(i)) + (1.0 - cfg_.beta1) * g;
        const double vi = cfg_.beta2 * static_cast<double>(v.at(i)) + (1.0 - cfg_.beta2) * g * g;
        m.at(i) = static_cast<T>(mi);
        v.at(i) = static_cast<T>(vi);
        const double update = (mi / bc1) / (std::sqrt(vi / bc2) + cfg_.eps);
        p.w.at(i) = static_cast<T>(static_cast<double>(p.w.at(i)) -
                                   lr_ * (update + cfg_.weight_decay * static_cast<double>(p.w.at(i))));
      }
    }
  }

  double lr() const { return lr_; }
  void set_lr(double lr) { lr_ = lr; }
  void reset_lr_to_initial() { lr_ = cfg_.lr; }

 private:
  std::vector<Param<T>*> params_;
  AdamWConfig cfg_;
  std::vector<Tensor<T>> m_, v_;
  double lr_ = cfg_.lr;
  int64_t t_ = 0;
};

}  // namespace mpe::nn
