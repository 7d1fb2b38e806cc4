#pragma once

#include <cmath>
#include <memory>

#include "mpe/nn/layers.hpp"

namespace mpe::nn {

// Multi-head self-attention over [B, S, d] with d % heads == 0.
template <typename T>
class MultiHeadSelfAttention : public Module<T> {
 public:
  MultiHeadSelfAttention(int d, int heads, const std::string& name = "mha")
      : d_(d), heads_(heads), dh_(d / heads), wq_(d, d, name + ".q"), wk_(d, d, name + ".k"),
        wv_(d, d, name + ".v"), wo_(d, d, name + ".out") {
    MPE_CHECK(d % heads == 0, "embedding dim must divide by head count");
  }

  void init(Rng& rng) {
    wq_.init(rng);
    wk_.init(rng);
    wv_.init(rng);
    wo_.init(rng);
  }

  Tensor<T> forward(const Tensor<T>& x) override {
    const int64_t B = x.dim(0), S = x.dim(1);
    MPE_CHECK(x.dim(2) == d_, "attention dim mismatch");
    s_ = S;
    q_ = wq_.forward(x);
    k_ = wk_.forward(x);
    v_ = wv_.forward(x);
    probs_ = Tensor<T>({B, heads_, S, S});
    Tensor<T> ctx({B, S, d_});
    const T scale = T(1) / std::sqrt(static_cast<T>(dh_));
    std::vector<T> scores(static_cast<size_t>(S) * S);
    std::vector<T> qh(static_cast<size_t>(S) * dh_), kh(qh.size()), vh(qh.size()),
        ch(qh.size());
    for (int64_t b = 0; b < B; ++b)
      for (int h = 0; h < heads_; ++h) {
        gather_head(q_, b, h, qh.data());
        gather_head(k_, b, h, kh.data());
        gather_head(v_, b, h, vh.data());
        gemm(false, true, static_cast<int>(S), static_cast<int>(S), dh_, scale, qh.data(), dh_,
             kh.data(), dh_, T(0), scores.data(), static_cast<int>(S));
        T* prow = probs_.data() + ((b * heads_ + h) * S) * S;
        for (int64_t i = 0; i < S; ++i) softmax_row(scores.data() + i * S, prow + i * S, S);
        gemm(false, false, static_cast<int>(S), dh_, static_cast<int>(S), T(1), prow,
             static_cast<int>(S), vh.data(), dh_, T(0), ch.data(), dh_);
        scatter_head(ch.data(), b, h, ctx);
      }
    ctx_ = ctx;
    return wo_.forward(ctx);
  }

  Tensor<T> backward(const Tensor<T>& gy) override {
    const int64_t B = gy.dim(0), S = s_;
    Tensor<T> gctx = wo_.backward(gy);
    Tensor<T> gq({B, S, d_}), gk({B, S, d_}), gv({B, S, d_});
    const T scale = T(1) / std::sqrt(static_cast<T>(dh_));
    std::vector<T> qh(static_cast<size_t>(S) * dh_), kh(qh.size()), vh(qh.size()), gch(qh.size()),
        gqh(qh.size()), gkh(qh.size()), gvh(qh.size());
    std::vector<T> gp(static_cast<size_t>(S) * S), gs(gp.size());
    for (int64_t b = 0; b < B; ++b)
      for (int h = 0; h < heads_; ++h) {
        gather_head(q_, b, h, qh.data());
        gather_head(k_, b, h, kh.data());
        gather_head(v_, b, h, vh.data());
        gather_head(gctx, b, h, gch.data());
        const T* prow = probs_.data() + ((b * heads_ + h) * S) * S;
        // dL/dV = P^T * dC ; dL/dP = dC * V^T
        gemm(true, false, static_cast<int>(S), dh_, static_cast<int>(S), T(1), prow,
             static_cast<int>(S), gch.data(), dh_, T(0), gvh.data(), dh_);
        gemm(false, true, static_cast<int>(S), static_cast<int>(S), dh_, T(1), gch.data(), dh_,
             vh.data(), dh_, T(0), gp.data(), static_cast<int>(S));
        for (int64_t i = 0; i < S; ++i) {
          const T* p = prow + i * S;
          const T* g = gp.data() + i * S;
          T dot = 0;
          for (int64_t j = 0; j < S; ++j) dot += p[j] * g[j];
          T* o = gs.data() + i * S;
          for (int64_t j = 0; j < S; ++j) o[j] = p[j] * (g[j] - dot);
        }
        gemm(false, false, static_cast<int>(S), dh_, static_cast<int>(S), scale, gs.data(),
             static_cast<int>(S), kh.data(), dh_, T(0), gqh.data(), dh_);
        gemm(true, false, static_cast<int>(S), dh_, static_cast<int>(S), scale, gs.data(),
             static_cast<int>(S), qh.data(), dh_, T(0), gkh.data(), dh_);
        scatter_head(gqh.data(), b, h, gq);
        scatter_head(gkh.data(), b, h, gk);
        scatter_head(gvh.data(), b, h, gv);
      }
    Tensor<T> gx = wq_.backward(gq);
    Tensor<T> gk_in = wk_.backward(gk);
    Tensor<T> gv_in = wv_.backward(gv);
    for (int64_t i = 0; i < gx.numel(); ++i) gx.at(i) += gk_in.at(i) + gv_in.at(i);
    q_ = k_ = v_ = ctx_ = Tensor<T>();
    probs_ = Tensor<T>();
    return gx;
  }

  void collect_params(std::vector<Param<T>*>& out) override {
    wq_.collect_params(out);
    wk_.collect_params(out);
    wv_.collect_params(out);
    wo_.collect_params(out);
  }

 private:
  static void softmax_row(const T* x, T* p, int64_t n) {
    T mx = x[0];
    for (int64_t i = 1; i < n; ++i) mx = std::max(mx, x[i]);
    T sum = 0;
    for (int64_t i = 0; i < n; ++i) {
      p[i] = std::exp(x[i] - mx);
      sum += p[i];
    }
    for (int64_t i = 0; i < n; ++i) p[i] /= sum;
  }

  void gather_head(const Tensor<T>& t, int64_t b, int h, T* out) const {
    for (int64_t s = 0; s < s_; ++s)
      std::memcpy(out + s * dh_, t.data() + (b * s_ + s) * d_ + static_cast<int64_t>(h) * dh_,
                  sizeof(T) * static_cast<size_t>(dh_));
  }
  void scatter_head(const T* in, int64_t b, int h, Tensor<T>& t) const {
    for (int64_t s = 0; s < s_; ++s)
      std::memcpy(t.data() + (b * s_ + s) * d_ + static_cast<int64_t>(h) * dh_, in + s * dh_,
                  sizeof(T) * static_cast<size_t>(dh_));
  }

  int d_, heads_, dh_;
  int64_t s_ = 0;
  Linear<T> wq_, wk_, wv_, wo_;
  Tensor<T> q_, k_, v_, ctx_, probs_;
};

// Post-norm transformer encoder block: x -> LN(x + Drop(MHA(x))) -> LN(. + Drop(FF(.))).
template <typename T>
class TransformerBlock : public Module<T> {
 public:
  TransformerBlock(int d, int ff_hidden, int heads, T dropout, RunState* state,
                   const std::string& name = "block")
      : mha_(d, heads, name + ".attn"), drop1_(dropout, state), ln1_(d, name + ".ln1"),
        ff1_(d, ff_hidden, name + ".ff1"), ff2_(ff_hidden, d, name + ".ff2"),
        drop2_(dropout, state), ln2_(d, name + ".ln2") {}

  void init(Rng& rng) {
    mha_.init(rng);
    ff1_.init(rng);
    ff2_.init(rng);
  }

  Tensor<T> forward(const Tensor<T>& x) override {
    Tensor<T> a = drop1_.forward(mha_.forward(x));
    for (int64_t i = 0; i < a.numel(); ++i) a.at(i) += x.at(i);
    Tensor<T> h = ln1_.forward(a);
    Tensor<T> f = drop2_.forward(ff2_.forward(relu_.forward(ff1_.forward(h))));
    for (int64_t i = 0; i < f.numel(); ++i) f.at(i) += h.at(i);
    return ln2_.forward(f);
  }

  Tensor<T> backward(const Tensor<T>& gy) override {
    Tensor<T> g = ln2_.backward(gy);
    Tensor<T> gf = ff1_.backward(relu_.backward(ff2_.backward(drop2_.backward(g))));
    for (int64_t i = 0; i < gf.numel(); ++i) gf.at(i) += g.at(i);
    Tensor<T> ga = ln1_.backward(gf);
    Tensor<T> gx = mha_.backward(drop1_.backward(ga));
    for (int64_t i = 0; i < gx.numel(); ++i) gx.at(i) += ga.at(i);
    return gx;
  }

  void collect_params(std::vector<Param<T>*>& out) override {
    mha_.collect_params(out);
    ln1_.collect_params(out);
    ff1_.collect_params(out);
    ff2_.collect_params(out);
    ln2_.collect_params(out);
  }

 private:
  MultiHeadSelfAttention<T> mha_;
  Dropout<T> drop1_;
  LayerNorm<T> ln1_;
  Linear<T> ff1_;
  ReLU<T> relu_;
  Linear<T> ff2_;
  Dropout<T> drop2_;
  LayerNorm<T> ln2_;
};

// Fixed sine/cosine encodings added over a flattened sequence.
template <typename T>
void add_positional_encoding(Tensor<T>& x) {
  const int64_t B = x.dim(0), S = x.dim(1), d = x.dim(2);
  for (int64_t s = 0; s < S; ++s)
    for (int64_t i = 0; i < d; ++i) {
      const double angle =
          static_cast<double>(s) / std::pow(10000.0, 2.0 * static_cast<double>(i / 2) / static_cast<double>(d));
      const T pe = static_cast<T>(i % 2 == 0 ? std::sin(angle) : std::cos(angle));
      for (int64_t b = 0; b < B; ++b) x.at(b, s, i) += pe;
    }
}

}  // namespace mpe::nn
