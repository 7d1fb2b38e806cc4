#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <initializer_list>
#include <vector>

#include "mpe/common.hpp"

namespace mpe {

// Dense row-major tensor, up to 4 axes. Deliberately minimal: shape plus
// storage, with flat access helpers for the hand-written kernels.
template <typename T>
struct Tensor {
  std::vector<int64_t> shape;
  std::vector<T> v;

  Tensor() = default;
  explicit Tensor(std::vector<int64_t> s) : shape(std::move(s)), v(numel_of(shape), T(0)) {}
  Tensor(std::initializer_list<int64_t> s) : Tensor(std::vector<int64_t>(s)) {}

  static int64_t numel_of(const std::vector<int64_t>& s) {
    int64_t n = 1;
    for (auto d : s) n *= d;
    return n;
  }

  int64_t numel() const { return static_cast<int64_t>(v.size()); }
  int64_t dim(int i) const { return shape[static_cast<size_t>(i)]; }
  int ndim() const { return static_cast<int>(shape.size()); }

  T* data() { return v.data(); }
  const T* data() const { return v.data(); }

  T& at(int64_t i) { return v[static_cast<size_t>(i)]; }
  const T& at(int64_t i) const { return v[static_cast<size_t>(i)]; }

  T& at(int64_t a, int64_t b) { return v[static_cast<size_t>(a * shape[1] + b)]; }
  const T& at(int64_t a, int64_t b) const { return v[static_cast<size_t>(a * shape[1] + b)]; }

  T& at(int64_t a, int64_t b, int64_t c) {
    return v[static_cast<size_t>((a * shape[1] + b) * shape[2] + c)];
  }
  const T& at(int64_t a, int64_t b, int64_t c) const {
    return v[static_cast<size_t>((a * shape[1] + b) * shape[2] + c)];
  }

  T& at(int64_t a, int64_t b, int64_t c, int64_t d) {
    return v[static_cast<size_t>(((a * shape[1] + b) * shape[2] + c) * shape[3] + d)];
  }
  const T& at(int64_t a, int64_t b, int64_t c, int64_t d) const {
    return v[static_cast<size_t>(((a * shape[1] + b) * shape[2] + c) * shape[3] + d)];
  }

  void fill(T x) { std::fill(v.begin(), v.end(), x); }
  void zero() { fill(T(0)); }

  Tensor reshaped(std::vector<int64_t> s) const {
    MPE_CHECK(numel_of(s) == numel(), "reshape element count mismatch");
    Tensor out;
    out.shape = std::move(s);
    out.v = v;
    return out;
  }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }
};

template <typename T>
Tensor<T> zeros_like(const Tensor<T>& t) {
  return Tensor<T>(t.shape);
}

}  // namespace mpe
