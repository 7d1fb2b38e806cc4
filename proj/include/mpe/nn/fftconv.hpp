#pragma once

#include <complex>
#include <cstdint>
#include <vector>

namespace mpe::nn {

// FFT-based 2D correlation for large odd kernels with stride 1 and "same"
// zero padding. Used as the fast path behind Conv2d for the 15x15
// prefiltering layers, where im2col GEMM wastes two orders of magnitude in
// arithmetic. Single precision only; the double path always uses im2col.
class FftConvEngine {
 public:
  FftConvEngine(int in_ch, int out_ch, int kh, int kw);
  ~FftConvEngine();

  FftConvEngine(const FftConvEngine&) = delete;
  FftConvEngine& operator=(const FftConvEngine&) = delete;

  static bool suitable(int kh, int kw, int sh, int sw, int ph, int pw);

  // x: [B, in_ch, H, W], w: [out_ch, in_ch, kh, kw], y: [B, out_ch, H, W].
  // When keep_state is set, the input spectra are retained for backward().
  void forward(const float* x, int batch, int64_t h, int64_t w_dim, const float* w, float* y,
               bool keep_state);

  // gy: [B, out_ch, H, W]. gx (optional): [B, in_ch, H, W] is overwritten;
  // gw (optional): [out_ch, in_ch, kh, kw] is accumulated into.
  void backward(const float* w, const float* gy, float* gx, float* gw);

 private:
  struct Impl;
  Impl* impl_;
};

}  // namespace mpe::nn
