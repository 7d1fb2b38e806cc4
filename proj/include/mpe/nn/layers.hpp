#pragma once

#include <omp.h>

#include <cmath>
#include <cstring>
#include <memory>
#include <string>
#include <vector>

#include "mpe/blas.hpp"
#include "mpe/common.hpp"
#include "mpe/nn/fftconv.hpp"
#include "mpe/rng.hpp"
#include "mpe/tensor.hpp"

namespace mpe::nn {

template <typename T>
struct Param {
  Tensor<T> w;
  Tensor<T> g;
  std::string name;

  void resize(std::vector<int64_t> shape, std::string n) {
    w = Tensor<T>(std::move(shape));
    g = zeros_like(w);
    name = std::move(n);
  }
  int64_t numel() const { return w.numel(); }
};

// Shared per-model execution state. The seed/step pair keys the counter-based
// dropout masks, so a run is reproducible independent of thread count.
struct RunState {
  bool training = true;
  uint64_t seed = 0;
  uint64_t step = 0;
  int next_layer_uid = 0;
};

template <typename T>
class Module {
 public:
  virtual ~Module() = default;
  virtual Tensor<T> forward(const Tensor<T>& x) = 0;
  virtual Tensor<T> backward(const Tensor<T>& gy) = 0;
  virtual void collect_params(std::vector<Param<T>*>& out) {}
};

inline uint64_t mix64(uint64_t x) {
  x ^= x >> 33;
  x *= 0xff51afd7ed558ccdULL;
  x ^= x >> 33;
  x *= 0xc4ceb9fe1a85ec53ULL;
  x ^= x >> 33;
  return x;
}

// ---------------------------------------------------------------------------
// Conv2d: im2col + GEMM, with an FFT fast path (float, large odd kernels).

template <typename T>
class Conv2d : public Module<T> {
 public:
  Conv2d(int ic, int oc, int kh, int kw, int sh = 1, int sw = 1, int ph = 0, int pw = 0,
         const std::string& name = "conv")
      : ic_(ic), oc_(oc), kh_(kh), kw_(kw), sh_(sh), sw_(sw), ph_(ph), pw_(pw) {
    w.resize({oc, ic, kh, kw}, name + ".weight");
    b.resize({oc}, name + ".bias");
    if constexpr (std::is_same_v<T, float>) {
      if (FftConvEngine::suitable(kh, kw, sh, sw, ph, pw))
        fft_ = std::make_unique<FftConvEngine>(ic, oc, kh, kw);
    }
  }

  void init(Rng& rng) {
    double bound = 1.0 / std::sqrt(static_cast<double>(ic_) * kh_ * kw_);
    for (auto& x : w.w.v) x = static_cast<T>(rng.uniform(-bound, bound));
    for (auto& x : b.w.v) x = static_cast<T>(rng.uniform(-bound, bound));
  }

  Tensor<T> forward(const Tensor<T>& x) override {
    MPE_CHECK(x.ndim() == 4 && x.dim(1) == ic_, "conv2d input shape mismatch");
    if (keep_state && !fft_) x_ = x;
    const int64_t B = x.dim(0), H = x.dim(2), W = x.dim(3);
    h_ = H;
    w_in_ = W;
    const int64_t OH = (H + 2 * ph_ - kh_) / sh_ + 1;
    const int64_t OW = (W + 2 * pw_ - kw_) / sw_ + 1;
    Tensor<T> y({B, oc_, OH, OW});

    if (fft_) {
      if constexpr (std::is_same_v<T, float>) {
        fft_->forward(x.data(), static_cast<int>(B), H, W, w.w.data(), y.data(), keep_state);
        add_bias(y);
        return y;
      }
    }

    const int64_t K = static_cast<int64_t>(ic_) * kh_ * kw_;
    const int64_t tile = tile_rows(OH, OW, K);
#pragma omp parallel num_threads(mpe::num_threads())
    {
      std::vector<T> col(static_cast<size_t>(K) * tile * OW);
#pragma omp for schedule(static) collapse(2)
      for (int64_t bb = 0; bb < B; ++bb) {
        for (int64_t t0 = 0; t0 < OH; t0 += tile) {
          const int64_t rows = std::min(tile, OH - t0);
          im2col(x.data() + bb * ic_ * H * W, H, W, t0, rows, OW, col.data());
          // ldc = OH*OW places each output-channel row of the tile directly
          // into the [bb, o, t0.., :] slab.
          gemm(false, false, oc_, static_cast<int>(rows * OW), static_cast<int>(K), T(1),
               w.w.data(), static_cast<int>(K), col.data(), static_cast<int>(rows * OW), T(0),
               y.data() + (bb * oc_) * OH * OW + t0 * OW, static_cast<int>(OH * OW));
        }
      }
    }
    add_bias(y);
    return y;
  }

  Tensor<T> backward(const Tensor<T>& gy) override;

  void collect_params(std::vector<Param<T>*>& out) override {
    out.push_back(&w);
    out.push_back(&b);
  }

  Param<T> w, b;
  bool keep_state = true;

 private:
  void add_bias(Tensor<T>& y) {
    const int64_t B = y.dim(0), plane = y.dim(2) * y.dim(3);
#pragma omp parallel for schedule(static) collapse(2) num_threads(mpe::num_threads())
    for (int64_t bb = 0; bb < B; ++bb)
      for (int64_t o = 0; o < oc_; ++o) {
        T* p = y.data() + (bb * oc_ + o) * plane;
        const T bo = b.w.at(o);
        for (int64_t i = 0; i < plane; ++i) p[i] += bo;
      }
  }

  static int64_t tile_rows(int64_t oh, int64_t ow, int64_t k) {
    const int64_t budget = 48LL * 1024 * 1024 / static_cast<int64_t>(sizeof(T));
    int64_t rows = budget / std::max<int64_t>(1, k * ow);
    return std::max<int64_t>(1, std::min(rows, oh));
  }

  // Column matrix for output rows [t0, t0+rows): K x (rows * OW).
  void im2col(const T* x, int64_t H, int64_t W, int64_t t0, int64_t rows, int64_t OW,
              T* col) const {
    const int64_t N = rows * OW;
    for (int c = 0; c < ic_; ++c)
      for (int u = 0; u < kh_; ++u)
        for (int v = 0; v < kw_; ++v) {
          T* dst = col + ((static_cast<int64_t>(c) * kh_ + u) * kw_ + v) * N;
          for (int64_t r = 0; r < rows; ++r) {
            const int64_t ii = (t0 + r) * sh_ + u - ph_;
            T* drow = dst + r * OW;
            if (ii < 0 || ii >= H) {
              std::fill(drow, drow + OW, T(0));
              continue;
            }
            const T* xrow = x + (static_cast<int64_t>(c) * H + ii) * W;
            for (int64_t j = 0; j < OW; ++j) {
              const int64_t jj = j * sw_ + v - pw_;
              drow[j] = (jj >= 0 && jj < W) ? xrow[jj] : T(0);
            }
          }
        }
  }

  void col2im_add(const T* col, int64_t H, int64_t W, int64_t t0, int64_t rows, int64_t OW,
                  T* gx) const {
    const int64_t N = rows * OW;
    for (int c = 0; c < ic_; ++c)
      for (int u = 0; u < kh_; ++u)
        for (int v = 0; v < kw_; ++v) {
          const T* src = col + ((static_cast<int64_t>(c) * kh_ + u) * kw_ + v) * N;
          for (int64_t r = 0; r < rows; ++r) {
            const int64_t ii = (t0 + r) * sh_ + u - ph_;
            if (ii < 0 || ii >= H) continue;
            T* grow = gx + (static_cast<int64_t>(c) * H + ii) * W;
            const T* srow = src + r * OW;
            for (int64_t j = 0; j < OW; ++j) {
              const int64_t jj = j * sw_ + v - pw_;
              if (jj >= 0 && jj < W) grow[jj] += srow[j];
            }
          }
        }
  }

  int ic_, oc_, kh_, kw_, sh_, sw_, ph_, pw_;
  int64_t h_ = 0, w_in_ = 0;
  Tensor<T> x_;
  std::unique_ptr<FftConvEngine> fft_;
};

template <typename T>
Tensor<T> Conv2d<T>::backward(const Tensor<T>& gy) {
  MPE_CHECK(fft_ != nullptr || (keep_state && x_.numel() > 0),
            "conv2d backward without stored input");
  const int64_t B = gy.dim(0), H = h_, W = w_in_;
  const int64_t OH = gy.dim(2), OW = gy.dim(3);
  Tensor<T> gx({B, ic_, H, W});

  // bias grad
  for (int64_t o = 0; o < oc_; ++o) {
    T s = 0;
    for (int64_t bb = 0; bb < B; ++bb) {
      const T* p = gy.data() + (bb * oc_ + o) * OH * OW;
      for (int64_t i = 0; i < OH * OW; ++i) s += p[i];
    }
    b.g.at(o) += s;
  }

  if (fft_) {
    if constexpr (std::is_same_v<T, float>) {
      fft_->backward(w.w.data(), gy.data(), gx.data(), w.g.data());
      x_ = Tensor<T>();
      return gx;
    }
  }

  const int64_t K = static_cast<int64_t>(ic_) * kh_ * kw_;
  const int64_t tile = tile_rows(OH, OW, K);
  const int nth = mpe::num_threads();
  std::vector<std::vector<T>> gw_local(static_cast<size_t>(nth));

#pragma omp parallel num_threads(nth)
  {
    const int tid = omp_get_thread_num();
    gw_local[tid].assign(static_cast<size_t>(oc_) * K, T(0));
    std::vector<T> col(static_cast<size_t>(K) * tile * OW);
    std::vector<T> gcol(static_cast<size_t>(K) * tile * OW);
    std::vector<T> gy_tile(static_cast<size_t>(oc_) * tile * OW);
    // Parallel over examples only: adjacent tiles write overlapping halo rows
    // of the same gx plane.
#pragma omp for schedule(static)
    for (int64_t bb = 0; bb < B; ++bb) {
      for (int64_t t0 = 0; t0 < OH; t0 += tile) {
        const int64_t rows = std::min(tile, OH - t0);
        const int64_t N = rows * OW;
        im2col(x_.data() + bb * ic_ * H * W, H, W, t0, rows, OW, col.data());
        for (int64_t o = 0; o < oc_; ++o)
          std::memcpy(gy_tile.data() + o * N, gy.data() + (bb * oc_ + o) * OH * OW + t0 * OW,
                      sizeof(T) * static_cast<size_t>(N));
        gemm(false, true, oc_, static_cast<int>(K), static_cast<int>(N), T(1), gy_tile.data(),
             static_cast<int>(N), col.data(), static_cast<int>(N), T(1), gw_local[tid].data(),
             static_cast<int>(K));
        gemm(true, false, static_cast<int>(K), static_cast<int>(N), oc_, T(1), w.w.data(),
             static_cast<int>(K), gy_tile.data(), static_cast<int>(N), T(0), gcol.data(),
             static_cast<int>(N));
        col2im_add(gcol.data(), H, W, t0, rows, OW, gx.data() + bb * ic_ * H * W);
      }
    }
  }
  for (int t = 0; t < nth; ++t)
    for (int64_t i = 0; i < w.g.numel(); ++i) w.g.at(i) += gw_local[static_cast<size_t>(t)][static_cast<size_t>(i)];
  x_ = Tensor<T>();
  return gx;
}

// ---------------------------------------------------------------------------

template <typename T>
class MaxPool2d : public Module<T> {
 public:
  MaxPool2d(int kh, int kw, int sh, int sw, int ph = 0, int pw = 0)
      : kh_(kh), kw_(kw), sh_(sh), sw_(sw), ph_(ph), pw_(pw) {}

  Tensor<T> forward(const Tensor<T>& x) override {
    const int64_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    h_ = H;
    w_ = W;
    const int64_t OH = (H + 2 * ph_ - kh_) / sh_ + 1;
    const int64_t OW = (W + 2 * pw_ - kw_) / sw_ + 1;
    Tensor<T> y({B, C, OH, OW});
    arg_.assign(static_cast<size_t>(B * C * OH * OW), 0);
#pragma omp parallel for schedule(static) collapse(2) num_threads(mpe::num_threads())
    for (int64_t bb = 0; bb < B; ++bb)
      for (int64_t c = 0; c < C; ++c) {
        const T* xp = x.data() + (bb * C + c) * H * W;
        T* yp = y.data() + (bb * C + c) * OH * OW;
        int32_t* ap = arg_.data() + (bb * C + c) * OH * OW;
        for (int64_t oi = 0; oi < OH; ++oi)
          for (int64_t oj = 0; oj < OW; ++oj) {
            T best = -std::numeric_limits<T>::infinity();
            int32_t besti = -1;
            for (int u = 0; u < kh_; ++u) {
              const int64_t ii = oi * sh_ + u - ph_;
              if (ii < 0 || ii >= H) continue;
              for (int v = 0; v < kw_; ++v) {
                const int64_t jj = oj * sw_ + v - pw_;
                if (jj < 0 || jj >= W) continue;
                const T val = xp[ii * W + jj];
                if (val > best) {
                  best = val;
                  besti = static_cast<int32_t>(ii * W + jj);
                }
              }
            }
            yp[oi * OW + oj] = besti >= 0 ? best : T(0);
            ap[oi * OW + oj] = besti;
          }
      }
    oh_ = OH;
    ow_ = OW;
    return y;
  }

  Tensor<T> backward(const Tensor<T>& gy) override {
    const int64_t B = gy.dim(0), C = gy.dim(1);
    Tensor<T> gx({B, C, h_, w_});
#pragma omp parallel for schedule(static) collapse(2) num_threads(mpe::num_threads())
    for (int64_t bb = 0; bb < B; ++bb)
      for (int64_t c = 0; c < C; ++c) {
        const T* gp = gy.data() + (bb * C + c) * oh_ * ow_;
        const int32_t* ap = arg_.data() + (bb * C + c) * oh_ * ow_;
        T* xp = gx.data() + (bb * C + c) * h_ * w_;
        for (int64_t i = 0; i < oh_ * ow_; ++i)
          if (ap[i] >= 0) xp[ap[i]] += gp[i];
      }
    return gx;
  }

 private:
  int kh_, kw_, sh_, sw_, ph_, pw_;
  int64_t h_ = 0, w_ = 0, oh_ = 0, ow_ = 0;
  std::vector<int32_t> arg_;
};

// ---------------------------------------------------------------------------
// Activations. Masks are kept as bit vectors so large conv activations do not
// have to be duplicated.

template <typename T>
class LeakyReLU : public Module<T> {
 public:
  explicit LeakyReLU(T slope) : slope_(slope) {}

  Tensor<T> forward(const Tensor<T>& x) override {
    Tensor<T> y = x;
    const int64_t n = y.numel();
    mask_.assign(static_cast<size_t>((n + 63) / 64), 0);
#pragma omp parallel for schedule(static) num_threads(mpe::num_threads())
    for (int64_t w = 0; w < static_cast<int64_t>(mask_.size()); ++w) {
      uint64_t bits = 0;
      const int64_t base = w * 64;
      const int64_t end = std::min<int64_t>(base + 64, n);
      for (int64_t i = base; i < end; ++i) {
        T& v = y.at(i);
        if (v > T(0)) {
          bits |= 1ULL << (i - base);
        } else {
          v *= slope_;
        }
      }
      mask_[static_cast<size_t>(w)] = bits;
    }
    return y;
  }

  Tensor<T> backward(const Tensor<T>& gy) override {
    Tensor<T> gx = gy;
    const int64_t n = gx.numel();
#pragma omp parallel for schedule(static) num_threads(mpe::num_threads())
    for (int64_t w = 0; w < static_cast<int64_t>(mask_.size()); ++w) {
      const uint64_t bits = mask_[static_cast<size_t>(w)];
      const int64_t base = w * 64;
      const int64_t end = std::min<int64_t>(base + 64, n);
      for (int64_t i = base; i < end; ++i)
        if (!(bits >> (i - base) & 1)) gx.at(i) *= slope_;
    }
    return gx;
  }

 private:
  T slope_;
  std::vector<uint64_t> mask_;
};

template <typename T>
class ReLU : public Module<T> {
 public:
  Tensor<T> forward(const Tensor<T>& x) override {
    Tensor<T> y = x;
    const int64_t n = y.numel();
    mask_.assign(static_cast<size_t>((n + 63) / 64), 0);
#pragma omp parallel for schedule(static) num_threads(mpe::num_threads())
    for (int64_t w = 0; w < static_cast<int64_t>(mask_.size()); ++w) {
      uint64_t bits = 0;
      const int64_t base = w * 64;
      const int64_t end = std::min<int64_t>(base + 64, n);
      for (int64_t i = base; i < end; ++i) {
        if (y.at(i) > T(0))
          bits |= 1ULL << (i - base);
        else
          y.at(i) = T(0);
      }
      mask_[static_cast<size_t>(w)] = bits;
    }
    return y;
  }
  Tensor<T> backward(const Tensor<T>& gy) override {
    Tensor<T> gx = gy;
    const int64_t n = gx.numel();
#pragma omp parallel for schedule(static) num_threads(mpe::num_threads())
    for (int64_t w = 0; w < static_cast<int64_t>(mask_.size()); ++w) {
      const uint64_t bits = mask_[static_cast<size_t>(w)];
      const int64_t base = w * 64;
      const int64_t end = std::min<int64_t>(base + 64, n);
      for (int64_t i = base; i < end; ++i)
        if (!(bits >> (i - base) & 1)) gx.at(i) = T(0);
    }
    return gx;
  }

 private:
  std::vector<uint64_t> mask_;
};

template <typename T>
class Sigmoid : public Module<T> {
 public:
  Tensor<T> forward(const Tensor<T>& x) override {
    y_ = x;
    for (auto& v : y_.v) v = T(1) / (T(1) + std::exp(-v));
    return y_;
  }
  Tensor<T> backward(const Tensor<T>& gy) override {
    Tensor<T> gx = gy;
    for (int64_t i = 0; i < gx.numel(); ++i) gx.at(i) *= y_.at(i) * (T(1) - y_.at(i));
    return gx;
  }

 private:
  Tensor<T> y_;
};

// Inverted dropout with counter-based masks: nothing is stored, backward
// regenerates the same mask from (seed, step, layer uid).
template <typename T>
class Dropout : public Module<T> {
 public:
  Dropout(T p, RunState* state) : p_(p), state_(state), uid_(state->next_layer_uid++) {}

  Tensor<T> forward(const Tensor<T>& x) override {
    if (!state_->training || p_ <= T(0)) {
      active_ = false;
      return x;
    }
    active_ = true;
    key_ = mix64(state_->seed ^ mix64(state_->step * 2654435761ULL + static_cast<uint64_t>(uid_)));
    Tensor<T> y = x;
    apply(y);
    return y;
  }

  Tensor<T> backward(const Tensor<T>& gy) override {
    if (!active_) return gy;
    Tensor<T> gx = gy;
    apply(gx);
    return gx;
  }

 private:
  void apply(Tensor<T>& t) const {
    const uint64_t thresh = static_cast<uint64_t>(static_cast<double>(p_) * 18446744073709551615.0);
    const T scale = T(1) / (T(1) - p_);
    const int64_t n = t.numel();
#pragma omp parallel for schedule(static) num_threads(mpe::num_threads())
    for (int64_t i = 0; i < n; ++i) {
      const uint64_t h = mix64(key_ ^ static_cast<uint64_t>(i));
      t.at(i) = h < thresh ? T(0) : t.at(i) * scale;
    }
  }

  T p_;
  RunState* state_;
  int uid_;
  bool active_ = false;
  uint64_t key_ = 0;
};

// ---------------------------------------------------------------------------
// Normalization layers.

// Normalizes each frame over (channel, bin) with affine weights [C, F].
// Input layout [B, C, T, F].
template <typename T>
class FrameLayerNorm : public Module<T> {
 public:
  FrameLayerNorm(int c, int f, const std::string& name = "input_norm") : c_(c), f_(f) {
    g.resize({c, f}, name + ".gain");
    b.resize({c, f}, name + ".bias");
    g.w.fill(T(1));
  }

  Tensor<T> forward(const Tensor<T>& x) override {
    const int64_t B = x.dim(0), C = x.dim(1), TT = x.dim(2), F = x.dim(3);
    MPE_CHECK(C == c_ && F == f_, "frame layer norm shape mismatch");
    x_ = x;
    mean_ = Tensor<T>({B, TT});
    inv_ = Tensor<T>({B, TT});
    Tensor<T> y({B, C, TT, F});
    const T n = static_cast<T>(C * F);
#pragma omp parallel for schedule(static) collapse(2) num_threads(mpe::num_threads())
    for (int64_t bb = 0; bb < B; ++bb)
      for (int64_t t = 0; t < TT; ++t) {
        T mu = 0;
        for (int64_t c = 0; c < C; ++c)
          for (int64_t f = 0; f < F; ++f) mu += x.at(bb, c, t, f);
        mu /= n;
        T var = 0;
        for (int64_t c = 0; c < C; ++c)
          for (int64_t f = 0; f < F; ++f) {
            const T d = x.at(bb, c, t, f) - mu;
            var += d * d;
          }
        var /= n;
        const T inv = T(1) / std::sqrt(var + eps_);
        mean_.at(bb, t) = mu;
        inv_.at(bb, t) = inv;
        for (int64_t c = 0; c < C; ++c)
          for (int64_t f = 0; f < F; ++f)
            y.at(bb, c, t, f) = (x.at(bb, c, t, f) - mu) * inv * g.w.at(c, f) + b.w.at(c, f);
      }
    return y;
  }

  Tensor<T> backward(const Tensor<T>& gy) override {
    const int64_t B = x_.dim(0), C = x_.dim(1), TT = x_.dim(2), F = x_.dim(3);
    Tensor<T> gx({B, C, TT, F});
    const T n = static_cast<T>(C * F);
    const int nth = mpe::num_threads();
    std::vector<Tensor<T>> gg(static_cast<size_t>(nth), zeros_like(g.g));
    std::vector<Tensor<T>> gb(static_cast<size_t>(nth), zeros_like(b.g));
#pragma omp parallel num_threads(nth)
    {
      const int tid = omp_get_thread_num();
#pragma omp for schedule(static) collapse(2)
      for (int64_t bb = 0; bb < B; ++bb)
        for (int64_t t = 0; t < TT; ++t) {
          const T mu = mean_.at(bb, t), inv = inv_.at(bb, t);
          T sum_gxh = 0, sum_gxh_xh = 0;
          for (int64_t c = 0; c < C; ++c)
            for (int64_t f = 0; f < F; ++f) {
              const T xh = (x_.at(bb, c, t, f) - mu) * inv;
              const T gxh = gy.at(bb, c, t, f) * g.w.at(c, f);
              sum_gxh += gxh;
              sum_gxh_xh += gxh * xh;
              gg[tid].at(c, f) += gy.at(bb, c, t, f) * xh;
              gb[tid].at(c, f) += gy.at(bb, c, t, f);
            }
          for (int64_t c = 0; c < C; ++c)
            for (int64_t f = 0; f < F; ++f) {
              const T xh = (x_.at(bb, c, t, f) - mu) * inv;
              const T gxh = gy.at(bb, c, t, f) * g.w.at(c, f);
              gx.at(bb, c, t, f) = inv / n * (n * gxh - sum_gxh - xh * sum_gxh_xh);
            }
        }
    }
    for (int t = 0; t < nth; ++t)
      for (int64_t i = 0; i < g.g.numel(); ++i) {
        g.g.at(i) += gg[static_cast<size_t>(t)].at(i);
        b.g.at(i) += gb[static_cast<size_t>(t)].at(i);
      }
    x_ = Tensor<T>();
    return gx;
  }

  void collect_params(std::vector<Param<T>*>& out) override {
    out.push_back(&g);
    out.push_back(&b);
  }

  Param<T> g, b;

 private:
  int c_, f_;
  static constexpr T eps_ = T(1e-5);
  Tensor<T> x_, mean_, inv_;
};

// Layer norm over the last axis, input [R..., d].
template <typename T>
class LayerNorm : public Module<T> {
 public:
  explicit LayerNorm(int d, const std::string& name = "ln") : d_(d) {
    g.resize({d}, name + ".gain");
    b.resize({d}, name + ".bias");
    g.w.fill(T(1));
  }

  Tensor<T> forward(const Tensor<T>& x) override {
    MPE_CHECK(x.shape.back() == d_, "layer norm dim mismatch");
    x_ = x;
    const int64_t R = x.numel() / d_;
    mean_ = Tensor<T>({R});
    inv_ = Tensor<T>({R});
    Tensor<T> y = x;
    for (int64_t r = 0; r < R; ++r) {
      const T* xp = x.data() + r * d_;
      T* yp = y.data() + r * d_;
      T mu = 0;
      for (int i = 0; i < d_; ++i) mu += xp[i];
      mu /= static_cast<T>(d_);
      T var = 0;
      for (int i = 0; i < d_; ++i) var += (xp[i] - mu) * (xp[i] - mu);
      var /= static_cast<T>(d_);
      const T inv = T(1) / std::sqrt(var + eps_);
      mean_.at(r) = mu;
      inv_.at(r) = inv;
      for (int i = 0; i < d_; ++i) yp[i] = (xp[i] - mu) * inv * g.w.at(i) + b.w.at(i);
    }
    return y;
  }

  Tensor<T> backward(const Tensor<T>& gy) override {
    const int64_t R = x_.numel() / d_;
    Tensor<T> gx = zeros_like(x_);
    for (int64_t r = 0; r < R; ++r) {
      const T* xp = x_.data() + r * d_;
      const T* gp = gy.data() + r * d_;
      T* op = gx.data() + r * d_;
      const T mu = mean_.at(r), inv = inv_.at(r);
      T s1 = 0, s2 = 0;
      for (int i = 0; i < d_; ++i) {
        const T xh = (xp[i] - mu) * inv;
        const T gxh = gp[i] * g.w.at(i);
        s1 += gxh;
        s2 += gxh * xh;
        g.g.at(i) += gp[i] * xh;
        b.g.at(i) += gp[i];
      }
      for (int i = 0; i < d_; ++i) {
        const T xh = (xp[i] - mu) * inv;
        const T gxh = gp[i] * g.w.at(i);
        op[i] = inv / static_cast<T>(d_) * (static_cast<T>(d_) * gxh - s1 - xh * s2);
      }
    }
    x_ = Tensor<T>();
    return gx;
  }

  void collect_params(std::vector<Param<T>*>& out) override {
    out.push_back(&g);
    out.push_back(&b);
  }

  Param<T> g, b;

 private:
  int d_;
  static constexpr T eps_ = T(1e-5);
  Tensor<T> x_, mean_, inv_;
};

template <typename T>
class BatchNorm2d : public Module<T> {
 public:
  BatchNorm2d(int c, RunState* state, const std::string& name = "bn") : c_(c), state_(state) {
    g.resize({c}, name + ".gain");
    b.resize({c}, name + ".bias");
    g.w.fill(T(1));
    running_mean_ = Tensor<T>({c});
    running_var_ = Tensor<T>({c});
    running_var_.fill(T(1));
  }

  Tensor<T> forward(const Tensor<T>& x) override {
    const int64_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    MPE_CHECK(C == c_, "batch norm channel mismatch");
    Tensor<T> y({B, C, H, W});
    const int64_t n = B * H * W;
    if (state_->training) {
      x_ = x;
      mean_ = Tensor<T>({C});
      inv_ = Tensor<T>({C});
#pragma omp parallel for schedule(static) num_threads(mpe::num_threads())
      for (int64_t c = 0; c < C; ++c) {
        T mu = 0;
        for (int64_t bb = 0; bb < B; ++bb) {
          const T* p = x.data() + (bb * C + c) * H * W;
          for (int64_t i = 0; i < H * W; ++i) mu += p[i];
        }
        mu /= static_cast<T>(n);
        T var = 0;
        for (int64_t bb = 0; bb < B; ++bb) {
          const T* p = x.data() + (bb * C + c) * H * W;
          for (int64_t i = 0; i < H * W; ++i) var += (p[i] - mu) * (p[i] - mu);
        }
        var /= static_cast<T>(n);
        mean_.at(c) = mu;
        inv_.at(c) = T(1) / std::sqrt(var + eps_);
        running_mean_.at(c) = (T(1) - momentum_) * running_mean_.at(c) + momentum_ * mu;
        // unbiased variance in the running estimate
        const T varu = n > 1 ? var * static_cast<T>(n) / static_cast<T>(n - 1) : var;
        running_var_.at(c) = (T(1) - momentum_) * running_var_.at(c) + momentum_ * varu;
        const T gain = g.w.at(c), bias = b.w.at(c), iv = inv_.at(c);
        for (int64_t bb = 0; bb < B; ++bb) {
          const T* p = x.data() + (bb * C + c) * H * W;
          T* q = y.data() + (bb * C + c) * H * W;
          for (int64_t i = 0; i < H * W; ++i) q[i] = (p[i] - mu) * iv * gain + bias;
        }
      }
    } else {
#pragma omp parallel for schedule(static) num_threads(mpe::num_threads())
      for (int64_t c = 0; c < C; ++c) {
        const T mu = running_mean_.at(c);
        const T iv = T(1) / std::sqrt(running_var_.at(c) + eps_);
        const T gain = g.w.at(c), bias = b.w.at(c);
        for (int64_t bb = 0; bb < B; ++bb) {
          const T* p = x.data() + (bb * C + c) * H * W;
          T* q = y.data() + (bb * C + c) * H * W;
          for (int64_t i = 0; i < H * W; ++i) q[i] = (p[i] - mu) * iv * gain + bias;
        }
      }
    }
    return y;
  }

  Tensor<T> backward(const Tensor<T>& gy) override {
    const int64_t B = x_.dim(0), C = x_.dim(1), H = x_.dim(2), W = x_.dim(3);
    const int64_t n = B * H * W;
    Tensor<T> gx({B, C, H, W});
#pragma omp parallel for schedule(static) num_threads(mpe::num_threads())
    for (int64_t c = 0; c < C; ++c) {
      const T mu = mean_.at(c), iv = inv_.at(c), gain = g.w.at(c);
      T s1 = 0, s2 = 0;
      for (int64_t bb = 0; bb < B; ++bb) {
        const T* xp = x_.data() + (bb * C + c) * H * W;
        const T* gp = gy.data() + (bb * C + c) * H * W;
        for (int64_t i = 0; i < H * W; ++i) {
          s1 += gp[i];
          s2 += gp[i] * (xp[i] - mu) * iv;
        }
      }
      g.g.at(c) += s2;
      b.g.at(c) += s1;
      for (int64_t bb = 0; bb < B; ++bb) {
        const T* xp = x_.data() + (bb * C + c) * H * W;
        const T* gp = gy.data() + (bb * C + c) * H * W;
        T* op = gx.data() + (bb * C + c) * H * W;
        for (int64_t i = 0; i < H * W; ++i) {
          const T xh = (xp[i] - mu) * iv;
          op[i] = gain * iv / static_cast<T>(n) *
                  (static_cast<T>(n) * gp[i] - s1 - xh * s2);
        }
      }
    }
    x_ = Tensor<T>();
    return gx;
  }

  void collect_params(std::vector<Param<T>*>& out) override {
    out.push_back(&g);
    out.push_back(&b);
  }

  Param<T> g, b;
  Tensor<T> running_mean_, running_var_;

 private:
  int c_;
  RunState* state_;
  static constexpr T eps_ = T(1e-5);
  static constexpr T momentum_ = T(0.1);
  Tensor<T> x_, mean_, inv_;
};

// ---------------------------------------------------------------------------

template <typename T>
class Linear : public Module<T> {
 public:
  Linear(int in, int out, const std::string& name = "linear") : in_(in), out_(out) {
    w.resize({out, in}, name + ".weight");
    b.resize({out}, name + ".bias");
  }

  void init(Rng& rng) {
    double bound = 1.0 / std::sqrt(static_cast<double>(in_));
    for (auto& x : w.w.v) x = static_cast<T>(rng.uniform(-bound, bound));
    for (auto& x : b.w.v) x = static_cast<T>(rng.uniform(-bound, bound));
  }

  Tensor<T> forward(const Tensor<T>& x) override {
    MPE_CHECK(x.shape.back() == in_, "linear input dim mismatch");
    x_ = x;
    std::vector<int64_t> oshape = x.shape;
    oshape.back() = out_;
    Tensor<T> y(oshape);
    const int64_t R = x.numel() / in_;
    gemm(false, true, static_cast<int>(R), out_, in_, T(1), x.data(), in_, w.w.data(), in_, T(0),
         y.data(), out_);
    for (int64_t r = 0; r < R; ++r)
      for (int i = 0; i < out_; ++i) y.at(r * out_ + i) += b.w.at(i);
    return y;
  }

  Tensor<T> backward(const Tensor<T>& gy) override {
    const int64_t R = x_.numel() / in_;
    gemm(true, false, out_, in_, static_cast<int>(R), T(1), gy.data(), out_, x_.data(), in_, T(1),
         w.g.data(), in_);
    for (int64_t r = 0; r < R; ++r)
      for (int i = 0; i < out_; ++i) b.g.at(i) += gy.at(r * out_ + i);
    Tensor<T> gx = zeros_like(x_);
    gemm(false, false, static_cast<int>(R), in_, out_, T(1), gy.data(), out_, w.w.data(), in_, T(0),
         gx.data(), in_);
    x_ = Tensor<T>();
    return gx;
  }

  void collect_params(std::vector<Param<T>*>& out) override {
    out.push_back(&w);
    out.push_back(&b);
  }

  Param<T> w, b;

 private:
  int in_, out_;
  Tensor<T> x_;
};

// ---------------------------------------------------------------------------
// Free-function graph pieces used by the U-net wiring.

// Nearest-neighbour x2 upsampling to an explicit target size; the last output
// row/column replicates the edge when the target is odd.
template <typename T>
Tensor<T> upsample2_nearest(const Tensor<T>& x, int64_t th, int64_t tw) {
  const int64_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  Tensor<T> y({B, C, th, tw});
  for (int64_t b = 0; b < B; ++b)
    for (int64_t c = 0; c < C; ++c)
      for (int64_t i = 0; i < th; ++i) {
        const int64_t si = std::min(i / 2, H - 1);
        for (int64_t j = 0; j < tw; ++j) y.at(b, c, i, j) = x.at(b, c, si, std::min(j / 2, W - 1));
      }
  return y;
}

template <typename T>
Tensor<T> upsample2_nearest_backward(const Tensor<T>& gy, int64_t h, int64_t w) {
  const int64_t B = gy.dim(0), C = gy.dim(1), TH = gy.dim(2), TW = gy.dim(3);
  Tensor<T> gx({B, C, h, w});
  for (int64_t b = 0; b < B; ++b)
    for (int64_t c = 0; c < C; ++c)
      for (int64_t i = 0; i < TH; ++i) {
        const int64_t si = std::min(i / 2, h - 1);
        for (int64_t j = 0; j < TW; ++j)
          gx.at(b, c, si, std::min(j / 2, w - 1)) += gy.at(b, c, i, j);
      }
  return gx;
}

template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
  MPE_CHECK(a.dim(0) == b.dim(0) && a.dim(2) == b.dim(2) && a.dim(3) == b.dim(3),
            "concat shape mismatch");
  const int64_t B = a.dim(0), Ca = a.dim(1), Cb = b.dim(1), H = a.dim(2), W = a.dim(3);
  Tensor<T> y({B, Ca + Cb, H, W});
  const size_t plane = static_cast<size_t>(H * W);
  for (int64_t bb = 0; bb < B; ++bb) {
    std::memcpy(y.data() + (bb * (Ca + Cb)) * H * W, a.data() + bb * Ca * H * W,
                sizeof(T) * plane * static_cast<size_t>(Ca));
    std::memcpy(y.data() + (bb * (Ca + Cb) + Ca) * H * W, b.data() + bb * Cb * H * W,
                sizeof(T) * plane * static_cast<size_t>(Cb));
  }
  return y;
}

template <typename T>
void split_channels(const Tensor<T>& g, int64_t ca, Tensor<T>& ga, Tensor<T>& gb) {
  const int64_t B = g.dim(0), C = g.dim(1), H = g.dim(2), W = g.dim(3);
  const int64_t cb = C - ca;
  ga = Tensor<T>({B, ca, H, W});
  gb = Tensor<T>({B, cb, H, W});
  const size_t plane = static_cast<size_t>(H * W);
  for (int64_t bb = 0; bb < B; ++bb) {
    std::memcpy(ga.data() + bb * ca * H * W, g.data() + (bb * C) * H * W,
                sizeof(T) * plane * static_cast<size_t>(ca));
    std::memcpy(gb.data() + bb * cb * H * W, g.data() + (bb * C + ca) * H * W,
                sizeof(T) * plane * static_cast<size_t>(cb));
  }
}

}  // namespace mpe::nn
