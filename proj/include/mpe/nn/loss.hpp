#pragma once

#include <cmath>
#include <vector>

#include "mpe/tensor.hpp"

namespace mpe::nn {

// Mean binary cross-entropy over all cells; pred already sigmoid-activated.
// Returns the loss and fills grad with dL/dpred.
template <typename T>
double bce_loss(const Tensor<T>& pred, const Tensor<T>& target, Tensor<T>* grad) {
  MPE_CHECK(pred.same_shape(target), "bce shape mismatch");
  const int64_t n = pred.numel();
  const T eps = std::is_same_v<T, double> ? T(1e-12) : T(1e-7);
  double loss = 0;
  if (grad) *grad = zeros_like(pred);
  for (int64_t i = 0; i < n; ++i) {
    T p = std::min(std::max(pred.at(i), eps), T(1) - eps);
    const T t = target.at(i);
    loss -= static_cast<double>(t) * std::log(static_cast<double>(p)) +
            (1.0 - static_cast<double>(t)) * std::log(1.0 - static_cast<double>(p));
    if (grad) grad->at(i) = (p - t) / (p * (T(1) - p)) / static_cast<T>(n);
  }
  return loss / static_cast<double>(n);
}

// Mean categorical cross-entropy on raw logits with integer class targets.
template <typename T>
double softmax_ce_loss(const Tensor<T>& logits, const std::vector<int>& target, Tensor<T>* grad) {
  const int64_t B = logits.dim(0), C = logits.dim(1);
  MPE_CHECK(static_cast<int64_t>(target.size()) == B, "ce target size mismatch");
  double loss = 0;
  if (grad) *grad = zeros_like(logits);
  std::vector<T> p(static_cast<size_t>(C));
  for (int64_t b = 0; b < B; ++b) {
    const T* x = logits.data() + b * C;
    T mx = x[0];
    for (int64_t c = 1; c < C; ++c) mx = std::max(mx, x[c]);
    T sum = 0;
    for (int64_t c = 0; c < C; ++c) {
      p[static_cast<size_t>(c)] = std::exp(x[c] - mx);
      sum += p[static_cast<size_t>(c)];
    }
    const int cls = target[static_cast<size_t>(b)];
    MPE_CHECK(cls >= 0 && cls < C, "class out of range");
    loss -= std::log(static_cast<double>(p[static_cast<size_t>(cls)] / sum));
    if (grad)
      for (int64_t c = 0; c < C; ++c)
        grad->at(b, c) = (p[static_cast<size_t>(c)] / sum - (c == cls ? T(1) : T(0))) /
                         static_cast<T>(B);
  }
  return loss / static_cast<double>(B);
}

}  // namespace mpe::nn
