#pragma once

#include <cmath>
#include <vector>

#include "mpe/nn/layers.hpp"

namespace mpe::nn {

// Bidirectional LSTM over [B, S, D] -> [B, S, 2*hidden], optionally stacked.
// Gate layout follows the usual (i, f, g, o) convention with weights
// w_ih [4H, D], w_hh [4H, H] and two bias vectors per direction.
template <typename T>
class BiLstm : public Module<T> {
 public:
  BiLstm(int input, int hidden, int layers, const std::string& name = "blstm")
      : input_(input), hidden_(hidden), layers_(layers) {
    for (int l = 0; l < layers_; ++l) {
      const int in_dim = l == 0 ? input_ : 2 * hidden_;
      for (int dir = 0; dir < 2; ++dir) {
        Dir d;
        const std::string tag =
            name + ".l" + std::to_string(l) + (dir == 0 ? ".fwd" : ".bwd");
        d.w_ih.resize({4 * hidden_, in_dim}, tag + ".w_ih");
        d.w_hh.resize({4 * hidden_, hidden_}, tag + ".w_hh");
        d.b_ih.resize({4 * hidden_}, tag + ".b_ih");
        d.b_hh.resize({4 * hidden_}, tag + ".b_hh");
        dirs_.push_back(std::move(d));
      }
    }
  }

  void init(Rng& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(hidden_));
    for (auto& d : dirs_)
      for (auto* p : {&d.w_ih, &d.w_hh, &d.b_ih, &d.b_hh})
        for (auto& x : p->w.v) x = static_cast<T>(rng.uniform(-bound, bound));
  }

  Tensor<T> forward(const Tensor<T>& x) override {
    MPE_CHECK(x.dim(2) == input_, "lstm input dim mismatch");
    b_ = x.dim(0);
    s_ = x.dim(1);
    layer_in_.assign(static_cast<size_t>(layers_), Tensor<T>());
    Tensor<T> cur = x;
    for (int l = 0; l < layers_; ++l) {
      layer_in_[static_cast<size_t>(l)] = cur;
      Tensor<T> out({b_, s_, 2 * hidden_});
      run_dir(l, 0, cur, out);
      run_dir(l, 1, cur, out);
      cur = std::move(out);
    }
    return cur;
  }

  Tensor<T> backward(const Tensor<T>& gy) override {
    Tensor<T> g = gy;
    for (int l = layers_ - 1; l >= 0; --l) {
      Tensor<T> gin = zeros_like(layer_in_[static_cast<size_t>(l)]);
      back_dir(l, 0, g, gin);
      back_dir(l, 1, g, gin);
      g = std::move(gin);
    }
    layer_in_.clear();
    return g;
  }

  void collect_params(std::vector<Param<T>*>& out) override {
    for (auto& d : dirs_) {
      out.push_back(&d.w_ih);
      out.push_back(&d.w_hh);
      out.push_back(&d.b_ih);
      out.push_back(&d.b_hh);
    }
  }

  int out_dim() const { return 2 * hidden_; }

 private:
  struct Dir {
    Param<T> w_ih, w_hh, b_ih, b_hh;
    // saved activations, one entry per time step: gates post-nonlinearity,
    // cell state, tanh(cell), hidden
    Tensor<T> gates, cell, tanhc, hidden_states;
  };

  Dir& dir(int layer, int d) { return dirs_[static_cast<size_t>(layer) * 2 + d]; }

  static T sigm(T v) { return T(1) / (T(1) + std::exp(-v)); }

  void run_dir(int layer, int d, const Tensor<T>& x, Tensor<T>& out) {
    Dir& D = dir(layer, d);
    const int in_dim = layer == 0 ? input_ : 2 * hidden_;
    const int H = hidden_;
    D.gates = Tensor<T>({s_, b_, 4 * H});
    D.cell = Tensor<T>({s_, b_, H});
    D.tanhc = Tensor<T>({s_, b_, H});
    D.hidden_states = Tensor<T>({s_, b_, H});
    std::vector<T> h_prev(static_cast<size_t>(b_) * H, T(0));
    std::vector<T> c_prev(static_cast<size_t>(b_) * H, T(0));
    std::vector<T> xt(static_cast<size_t>(b_) * in_dim);
    std::vector<T> z(static_cast<size_t>(b_) * 4 * H);

    for (int64_t step = 0; step < s_; ++step) {
      const int64_t t = d == 0 ? step : s_ - 1 - step;
      for (int64_t bb = 0; bb < b_; ++bb)
        std::memcpy(xt.data() + bb * in_dim, x.data() + (bb * s_ + t) * in_dim,
                    sizeof(T) * static_cast<size_t>(in_dim));
      // z = x_t W_ih^T + h_{t-1} W_hh^T + biases
      gemm(false, true, static_cast<int>(b_), 4 * H, in_dim, T(1), xt.data(), in_dim,
           D.w_ih.w.data(), in_dim, T(0), z.data(), 4 * H);
      gemm(false, true, static_cast<int>(b_), 4 * H, H, T(1), h_prev.data(), H, D.w_hh.w.data(), H,
           T(1), z.data(), 4 * H);
      for (int64_t bb = 0; bb < b_; ++bb) {
        T* zp = z.data() + bb * 4 * H;
        T* gate = D.gates.data() + (step * b_ + bb) * 4 * H;
        T* cs = D.cell.data() + (step * b_ + bb) * H;
        T* tc = D.tanhc.data() + (step * b_ + bb) * H;
        T* hs = D.hidden_states.data() + (step * b_ + bb) * H;
        for (int j = 0; j < H; ++j) {
          const T i_g = sigm(zp[j] + D.b_ih.w.at(j) + D.b_hh.w.at(j));
          const T f_g = sigm(zp[H + j] + D.b_ih.w.at(H + j) + D.b_hh.w.at(H + j));
          const T g_g = std::tanh(zp[2 * H + j] + D.b_ih.w.at(2 * H + j) + D.b_hh.w.at(2 * H + j));
          const T o_g = sigm(zp[3 * H + j] + D.b_ih.w.at(3 * H + j) + D.b_hh.w.at(3 * H + j));
          const T c = f_g * c_prev[static_cast<size_t>(bb) * H + j] + i_g * g_g;
          const T th = std::tanh(c);
          gate[j] = i_g;
          gate[H + j] = f_g;
          gate[2 * H + j] = g_g;
          gate[3 * H + j] = o_g;
          cs[j] = c;
          tc[j] = th;
          hs[j] = o_g * th;
        }
        std::memcpy(h_prev.data() + bb * H, hs, sizeof(T) * static_cast<size_t>(H));
        std::memcpy(c_prev.data() + bb * H, cs, sizeof(T) * static_cast<size_t>(H));
        T* op = out.data() + (bb * s_ + t) * 2 * H + (d == 0 ? 0 : H);
        std::memcpy(op, hs, sizeof(T) * static_cast<size_t>(H));
      }
    }
  }

  void back_dir(int layer, int d, const Tensor<T>& gout, Tensor<T>& gin) {
    Dir& D = dir(layer, d);
    const Tensor<T>& x = layer_in_[static_cast<size_t>(layer)];
    const int in_dim = layer == 0 ? input_ : 2 * hidden_;
    const int H = hidden_;
    std::vector<T> gh(static_cast<size_t>(b_) * H, T(0));
    std::vector<T> gc(static_cast<size_t>(b_) * H, T(0));
    std::vector<T> gz(static_cast<size_t>(b_) * 4 * H);
    std::vector<T> xt(static_cast<size_t>(b_) * in_dim);
    std::vector<T> gx(static_cast<size_t>(b_) * in_dim);
    std::vector<T> hprev(static_cast<size_t>(b_) * H);
    std::vector<T> ghp(static_cast<size_t>(b_) * H);

    for (int64_t step = s_ - 1; step >= 0; --step) {
      const int64_t t = d == 0 ? step : s_ - 1 - step;
      // add the incoming gradient for this step's hidden output
      for (int64_t bb = 0; bb < b_; ++bb) {
        const T* gp = gout.data() + (bb * s_ + t) * 2 * H + (d == 0 ? 0 : H);
        for (int j = 0; j < H; ++j) gh[static_cast<size_t>(bb) * H + j] += gp[j];
      }
      // previous hidden/cell values
      for (int64_t bb = 0; bb < b_; ++bb) {
        if (step > 0) {
          std::memcpy(hprev.data() + bb * H, D.hidden_states.data() + ((step - 1) * b_ + bb) * H,
                      sizeof(T) * static_cast<size_t>(H));
        } else {
          std::fill(hprev.begin() + bb * H, hprev.begin() + (bb + 1) * H, T(0));
        }
      }
      for (int64_t bb = 0; bb < b_; ++bb) {
        const T* gate = D.gates.data() + (step * b_ + bb) * 4 * H;
        const T* tc = D.tanhc.data() + (step * b_ + bb) * H;
        T* gzp = gz.data() + bb * 4 * H;
        for (int j = 0; j < H; ++j) {
          const T i_g = gate[j], f_g = gate[H + j], g_g = gate[2 * H + j], o_g = gate[3 * H + j];
          const T ghj = gh[static_cast<size_t>(bb) * H + j];
          const T gcj = gc[static_cast<size_t>(bb) * H + j] + ghj * o_g * (T(1) - tc[j] * tc[j]);
          const T cprev = step > 0 ? D.cell.at(step - 1, bb, j) : T(0);
          gzp[j] = gcj * g_g * i_g * (T(1) - i_g);
          gzp[H + j] = gcj * cprev * f_g * (T(1) - f_g);
          gzp[2 * H + j] = gcj * i_g * (T(1) - g_g * g_g);
          gzp[3 * H + j] = ghj * tc[j] * o_g * (T(1) - o_g);
          gc[static_cast<size_t>(bb) * H + j] = gcj * f_g;
        }
      }
      for (int64_t bb = 0; bb < b_; ++bb)
        std::memcpy(xt.data() + bb * in_dim, x.data() + (bb * s_ + t) * in_dim,
                    sizeof(T) * static_cast<size_t>(in_dim));
      // parameter grads
      gemm(true, false, 4 * H, in_dim, static_cast<int>(b_), T(1), gz.data(), 4 * H, xt.data(),
           in_dim, T(1), D.w_ih.g.data(), in_dim);
      gemm(true, false, 4 * H, H, static_cast<int>(b_), T(1), gz.data(), 4 * H, hprev.data(), H,
           T(1), D.w_hh.g.data(), H);
      for (int64_t bb = 0; bb < b_; ++bb)
        for (int j = 0; j < 4 * H; ++j) {
          D.b_ih.g.at(j) += gz[static_cast<size_t>(bb) * 4 * H + j];
          D.b_hh.g.at(j) += gz[static_cast<size_t>(bb) * 4 * H + j];
        }
      // input and recurrent grads
      gemm(false, false, static_cast<int>(b_), in_dim, 4 * H, T(1), gz.data(), 4 * H,
           D.w_ih.w.data(), in_dim, T(0), gx.data(), in_dim);
      for (int64_t bb = 0; bb < b_; ++bb) {
        T* gp = gin.data() + (bb * s_ + t) * in_dim;
        for (int j = 0; j < in_dim; ++j) gp[j] += gx[static_cast<size_t>(bb) * in_dim + j];
      }
      gemm(false, false, static_cast<int>(b_), H, 4 * H, T(1), gz.data(), 4 * H, D.w_hh.w.data(), H,
           T(0), ghp.data(), H);
      std::copy(ghp.begin(), ghp.end(), gh.begin());
    }
  }

  int input_, hidden_, layers_;
  int64_t b_ = 0, s_ = 0;
  std::vector<Dir> dirs_;
  std::vector<Tensor<T>> layer_in_;
};

}  // namespace mpe::nn
