#include "mpe/nn/fftconv.hpp"

#include <fftw3.h>
#include <omp.h>

#include <cstring>
#include <map>
#include <mutex>

#include "mpe/common.hpp"

namespace mpe::nn {

namespace {

using cfloat = std::complex<float>;

int next_fast(int n) {
  for (;; ++n) {
    int m = n;
    for (int p : {2, 3, 5, 7})
      while (m % p == 0) m /= p;
    if (m == 1) return n;
  }
}

struct PlanPair {
  fftwf_plan r2c = nullptr;
  fftwf_plan c2r = nullptr;
};

// Plan creation is not thread-safe in FFTW; executions on distinct arrays are.
std::mutex g_plan_mutex;
std::map<std::pair<int, int>, PlanPair> g_plans;

PlanPair get_plans(int fh, int fw) {
  std::lock_guard<std::mutex> lock(g_plan_mutex);
  auto key = std::make_pair(fh, fw);
  auto it = g_plans.find(key);
  if (it != g_plans.end()) return it->second;
  std::vector<float> re(static_cast<size_t>(fh) * fw);
  std::vector<cfloat> cx(static_cast<size_t>(fh) * (fw / 2 + 1));
  PlanPair p;
  p.r2c = fftwf_plan_dft_r2c_2d(fh, fw, re.data(), reinterpret_cast<fftwf_complex*>(cx.data()),
                                FFTW_ESTIMATE | FFTW_UNALIGNED);
  p.c2r = fftwf_plan_dft_c2r_2d(fh, fw, reinterpret_cast<fftwf_complex*>(cx.data()), re.data(),
                                FFTW_ESTIMATE | FFTW_UNALIGNED);
  g_plans[key] = p;
  return p;
}

}  // namespace

struct FftConvEngine::Impl {
  int ic, oc, kh, kw, ph, pw;

  int batch = 0;
  int64_t h = 0, w = 0;
  int fh = 0, fw = 0, fwc = 0;
  PlanPair plans;

  std::vector<cfloat> x_spec;  // [B, ic, fh, fwc], kept for backward

  size_t plane() const { return static_cast<size_t>(fh) * fwc; }

  void setup(int64_t hh, int64_t ww) {
    if (hh == h && ww == w && fh != 0) return;
    h = hh;
    w = ww;
    fh = next_fast(static_cast<int>(h) + kh - 1);
    fw = next_fast(static_cast<int>(w) + kw - 1);
    fwc = fw / 2 + 1;
    plans = get_plans(fh, fw);
  }

  // rfft2 of a zero-padded [h, w] plane placed at the origin.
  void fft_plane(const float* src, int64_t hh, int64_t ww, cfloat* dst, float* scratch) const {
    std::memset(scratch, 0, sizeof(float) * static_cast<size_t>(fh) * fw);
    for (int64_t i = 0; i < hh; ++i)
      std::memcpy(scratch + i * fw, src + i * ww, sizeof(float) * static_cast<size_t>(ww));
    fftwf_execute_dft_r2c(plans.r2c, scratch, reinterpret_cast<fftwf_complex*>(dst));
  }

  void ifft_plane(cfloat* spec, float* dst_scratch) const {
    fftwf_execute_dft_c2r(plans.c2r, reinterpret_cast<fftwf_complex*>(spec), dst_scratch);
  }

  // Kernel spectra, optionally with the kernel reversed in both axes
  // (reversed = correlation, unreversed = the transposed/gradient pass).
  void weight_spectra(const float* wts, bool reversed, std::vector<cfloat>& out) const {
    out.assign(static_cast<size_t>(oc) * ic * plane(), cfloat(0));
#pragma omp parallel num_threads(mpe::num_threads())
    {
      std::vector<float> scratch(static_cast<size_t>(fh) * fw);
      std::vector<float> kb(static_cast<size_t>(kh) * kw);
#pragma omp for schedule(static)
      for (int p = 0; p < oc * ic; ++p) {
        const float* src = wts + static_cast<size_t>(p) * kh * kw;
        if (reversed) {
          for (int u = 0; u < kh; ++u)
            for (int v = 0; v < kw; ++v) kb[static_cast<size_t>(u) * kw + v] = src[(kh - 1 - u) * kw + (kw - 1 - v)];
        } else {
          std::memcpy(kb.data(), src, sizeof(float) * kb.size());
        }
        fft_plane(kb.data(), kh, kw, out.data() + static_cast<size_t>(p) * plane(), scratch.data());
      }
    }
  }
};

FftConvEngine::FftConvEngine(int in_ch, int out_ch, int kh, int kw) : impl_(new Impl) {
  impl_->ic = in_ch;
  impl_->oc = out_ch;
  impl_->kh = kh;
  impl_->kw = kw;
  impl_->ph = kh / 2;
  impl_->pw = kw / 2;
}

FftConvEngine::~FftConvEngine() { delete impl_; }

bool FftConvEngine::suitable(int kh, int kw, int sh, int sw, int ph, int pw) {
  return sh == 1 && sw == 1 && kh % 2 == 1 && kw % 2 == 1 && ph == kh / 2 && pw == kw / 2 &&
         kh * kw >= 81;
}

void FftConvEngine::forward(const float* x, int batch, int64_t h, int64_t w_dim, const float* w,
                            float* y, bool keep_state) {
  Impl& im = *impl_;
  im.setup(h, w_dim);
  im.batch = batch;
  const size_t pl = im.plane();
  const size_t hw = static_cast<size_t>(h) * w_dim;
  const float scale = 1.0f / (static_cast<float>(im.fh) * im.fw);

  std::vector<cfloat> wspec;
  im.weight_spectra(w, /*reversed=*/true, wspec);

  im.x_spec.assign(static_cast<size_t>(batch) * im.ic * pl, cfloat(0));

#pragma omp parallel num_threads(mpe::num_threads())
  {
    std::vector<float> scratch(static_cast<size_t>(im.fh) * im.fw);
    std::vector<cfloat> acc(pl);
#pragma omp for schedule(static)
    for (int b = 0; b < batch; ++b) {
      cfloat* xs = im.x_spec.data() + static_cast<size_t>(b) * im.ic * pl;
      for (int c = 0; c < im.ic; ++c)
        im.fft_plane(x + (static_cast<size_t>(b) * im.ic + c) * hw, h, w_dim, xs + c * pl,
                     scratch.data());
      for (int o = 0; o < im.oc; ++o) {
        std::fill(acc.begin(), acc.end(), cfloat(0));
        for (int c = 0; c < im.ic; ++c) {
          const cfloat* ws = wspec.data() + (static_cast<size_t>(o) * im.ic + c) * pl;
          const cfloat* xc = xs + c * pl;
          for (size_t i = 0; i < pl; ++i) acc[i] += xc[i] * ws[i];
        }
        im.ifft_plane(acc.data(), scratch.data());
        float* dst = y + (static_cast<size_t>(b) * im.oc + o) * hw;
        for (int64_t i = 0; i < h; ++i) {
          const float* row = scratch.data() + (i + im.ph) * im.fw + im.pw;
          for (int64_t j = 0; j < w_dim; ++j) dst[i * w_dim + j] = row[j] * scale;
        }
      }
    }
  }
  if (!keep_state) im.x_spec.clear();
}

void FftConvEngine::backward(const float* w, const float* gy, float* gx, float* gw) {
  Impl& im = *impl_;
  MPE_CHECK(!im.x_spec.empty() || gw == nullptr, "fft conv backward without stored forward state");
  const size_t pl = im.plane();
  const size_t hw = static_cast<size_t>(im.h) * im.w;
  const float scale = 1.0f / (static_cast<float>(im.fh) * im.fw);
  const int batch = im.batch;

  std::vector<cfloat> wspec;
  if (gx) im.weight_spectra(w, /*reversed=*/false, wspec);

  std::vector<cfloat> gw_spec;
  if (gw) gw_spec.assign(static_cast<size_t>(im.oc) * im.ic * pl, cfloat(0));

  // Spectra of the current example's gy planes, shared by all threads.
  std::vector<cfloat> gys(static_cast<size_t>(im.oc) * pl);

  const int nth = mpe::num_threads();
#pragma omp parallel num_threads(nth)
  {
    std::vector<float> scratch(static_cast<size_t>(im.fh) * im.fw);
    std::vector<cfloat> acc(pl);
    const int tid = omp_get_thread_num();
    // Output channels are partitioned across threads so each gw_spec plane
    // has a single writer and batch accumulation order stays fixed.
    const int oc_lo = static_cast<int>(static_cast<int64_t>(im.oc) * tid / nth);
    const int oc_hi = static_cast<int>(static_cast<int64_t>(im.oc) * (tid + 1) / nth);

    for (int b = 0; b < batch; ++b) {
      for (int o = oc_lo; o < oc_hi; ++o)
        im.fft_plane(gy + (static_cast<size_t>(b) * im.oc + o) * hw, im.h, im.w, gys.data() + o * pl,
                     scratch.data());
#pragma omp barrier
      if (gx) {
        // gx = conv(gy, w) gathered at (+ph, +pw); input channels split across threads.
        const int ic_lo = static_cast<int>(static_cast<int64_t>(im.ic) * tid / nth);
        const int ic_hi = static_cast<int>(static_cast<int64_t>(im.ic) * (tid + 1) / nth);
        for (int c = ic_lo; c < ic_hi; ++c) {
          std::fill(acc.begin(), acc.end(), cfloat(0));
          for (int o = 0; o < im.oc; ++o) {
            const cfloat* ws = wspec.data() + (static_cast<size_t>(o) * im.ic + c) * pl;
            const cfloat* gs = gys.data() + o * pl;
            for (size_t i = 0; i < pl; ++i) acc[i] += gs[i] * ws[i];
          }
          im.ifft_plane(acc.data(), scratch.data());
          float* dst = gx + (static_cast<size_t>(b) * im.ic + c) * hw;
          for (int64_t i = 0; i < im.h; ++i) {
            const float* row = scratch.data() + (i + im.ph) * im.fw + im.pw;
            for (int64_t j = 0; j < im.w; ++j) dst[i * im.w + j] = row[j] * scale;
          }
        }
      }
      if (gw) {
        const cfloat* xs = im.x_spec.data() + static_cast<size_t>(b) * im.ic * pl;
        for (int o = oc_lo; o < oc_hi; ++o) {
          const cfloat* gs = gys.data() + o * pl;
          for (int c = 0; c < im.ic; ++c) {
            cfloat* dst = gw_spec.data() + (static_cast<size_t>(o) * im.ic + c) * pl;
            const cfloat* xc = xs + c * pl;
            for (size_t i = 0; i < pl; ++i) dst[i] += std::conj(gs[i]) * xc[i];
          }
        }
      }
#pragma omp barrier
    }

    if (gw) {
      // Circular cross-correlation lags (u - ph, v - pw) wrap around the ends.
#pragma omp for schedule(static)
      for (int p = 0; p < im.oc * im.ic; ++p) {
        std::copy(gw_spec.begin() + static_cast<size_t>(p) * pl,
                  gw_spec.begin() + static_cast<size_t>(p + 1) * pl, acc.begin());
        im.ifft_plane(acc.data(), scratch.data());
        float* dst = gw + static_cast<size_t>(p) * im.kh * im.kw;
        for (int u = 0; u < im.kh; ++u) {
          int su = (u - im.ph + im.fh) % im.fh;
          for (int v = 0; v < im.kw; ++v) {
            int sv = (v - im.pw + im.fw) % im.fw;
            dst[u * im.kw + v] += scratch[static_cast<size_t>(su) * im.fw + sv] * scale;
          }
        }
      }
    }
  }
  im.x_spec.clear();
}

}  // namespace mpe::nn
