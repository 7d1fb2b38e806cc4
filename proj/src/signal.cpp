#include "mpe/signal.hpp"

#include <fftw3.h>
#include <omp.h>

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstring>
#include <fstream>
#include <numbers>

#include "mpe/common.hpp"

namespace mpe {

namespace {

constexpr double kA4 = 440.0;
// C1 = MIDI 24
const double kFreqC1 = kA4 * std::pow(2.0, (24.0 - 69.0) / 12.0);
const double kQ = 1.0 / (std::pow(2.0, 1.0 / kBinsPerOctave) - 1.0);

// Half-band decimation filter: windowed sinc, cutoff 0.23 of the input rate.
std::vector<double> halfband_filter() {
  const int half = 47;
  std::vector<double> h(2 * half + 1);
  const double fc = 0.23;
  for (int n = -half; n <= half; ++n) {
    const double t = 2.0 * fc * n;
    const double sinc = n == 0 ? 1.0 : std::sin(std::numbers::pi * t) / (std::numbers::pi * t);
    const double win = 0.5 + 0.5 * std::cos(std::numbers::pi * n / (half + 1));
    h[static_cast<size_t>(n + half)] = 2.0 * fc * sinc * win;
  }
  return h;
}

std::vector<float> decimate2(const std::vector<float>& x, const std::vector<double>& h) {
  const int half = static_cast<int>(h.size() / 2);
  const int64_t n_out = static_cast<int64_t>(x.size() + 1) / 2;
  std::vector<float> y(static_cast<size_t>(n_out));
  const int64_t n = static_cast<int64_t>(x.size());
  for (int64_t m = 0; m < n_out; ++m) {
    const int64_t c = 2 * m;
    double acc = 0;
    for (int k = -half; k <= half; ++k) {
      const int64_t i = c + k;
      if (i >= 0 && i < n) acc += h[static_cast<size_t>(k + half)] * x[static_cast<size_t>(i)];
    }
    y[static_cast<size_t>(m)] = static_cast<float>(acc);
  }
  return y;
}

}  // namespace

double frame_time(int64_t frame_index) {
  MPE_CHECK(frame_index >= 0, "negative frame index");
  return static_cast<double>(frame_index) * kHopLength / kSampleRate;
}

int64_t frame_count(int64_t n_samples) { return n_samples / kHopLength + 1; }

double bin_frequency(int bin, double harmonic_factor, double tuning_cents) {
  // bin 1 is the C1 center; each semitone owns three bins with the nominal
  // pitch on the middle one.
  return harmonic_factor * kFreqC1 *
         std::pow(2.0, (static_cast<double>(bin - 1) / kBinsPerOctave) + tuning_cents / 1200.0);
}

double estimate_tuning(const AudioTrack& track, bool* silent_warning) {
  if (silent_warning) *silent_warning = false;
  const int64_t n = static_cast<int64_t>(track.samples.size());
  const int win = 4096, hop = 2048;
  if (n < win) {
    if (silent_warning) *silent_warning = true;
    return 0.0;
  }

  std::vector<float> re(win);
  std::vector<std::complex<float>> cx(static_cast<size_t>(win / 2 + 1));
  fftwf_plan plan = fftwf_plan_dft_r2c_1d(win, re.data(),
                                          reinterpret_cast<fftwf_complex*>(cx.data()),
                                          FFTW_ESTIMATE | FFTW_UNALIGNED);
  std::vector<double> window(win);
  for (int i = 0; i < win; ++i)
    window[static_cast<size_t>(i)] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * i / win);

  std::vector<double> hist(100, 0.0);
  std::vector<double> hist_dev(100, 0.0);  // magnitude-weighted deviation sums
  double peak_mag_max = 0.0;
  const double fmin = 60.0, fmax = 5000.0;
  for (int64_t start = 0; start + win <= n; start += hop) {
    for (int i = 0; i < win; ++i)
      re[static_cast<size_t>(i)] =
          static_cast<float>(track.samples[static_cast<size_t>(start + i)] * window[static_cast<size_t>(i)]);
    fftwf_execute(plan);
    std::vector<double> mag(cx.size());
    for (size_t i = 0; i < cx.size(); ++i) mag[i] = std::abs(cx[i]);
    for (size_t i = 2; i + 2 < mag.size(); ++i) {
      if (mag[i] <= mag[i - 1] || mag[i] < mag[i + 1]) continue;
      const double freq_res = static_cast<double>(track.sample_rate) / win;
      // parabolic interpolation around the peak
      const double a = mag[i - 1], b = mag[i], c = mag[i + 1];
      const double denom = a - 2 * b + c;
      const double shift = denom == 0.0 ? 0.0 : 0.5 * (a - c) / denom;
      const double f = (static_cast<double>(i) + shift) * freq_res;
      if (f < fmin || f > fmax || b < 1e-6) continue;
      peak_mag_max = std::max(peak_mag_max, b);
      double dev = std::fmod(1200.0 * std::log2(f / kA4), 100.0);
      dev = std::fmod(dev + 150.0, 100.0) - 50.0;  // -> [-50, 50)
      const int idx = std::min(99, std::max(0, static_cast<int>(std::floor(dev + 50.0))));
      hist[static_cast<size_t>(idx)] += b;
      hist_dev[static_cast<size_t>(idx)] += b * dev;
    }
  }
  fftwf_destroy_plan(plan);

  double total = 0;
  for (double v : hist) total += v;
  if (total <= 0.0 || peak_mag_max < 1e-4) {
    if (silent_warning) *silent_warning = true;
    return 0.0;
  }
  // pick the densest +-2 cent neighbourhood (circular), then refine with the
  // magnitude-weighted mean deviation inside it
  int best = 0;
  double best_v = -1;
  for (int i = 0; i < 100; ++i) {
    double s = 0;
    for (int k = -2; k <= 2; ++k) s += hist[static_cast<size_t>((i + k + 100) % 100)];
    if (s > best_v) {
      best_v = s;
      best = i;
    }
  }
  double wsum = 0, dsum = 0;
  for (int k = -2; k <= 2; ++k) {
    const int i = (best + k + 100) % 100;
    const double offset = static_cast<double>(best + k - i);  // +-100 across the wrap
    wsum += hist[static_cast<size_t>(i)];
    dsum += hist_dev[static_cast<size_t>(i)] + hist[static_cast<size_t>(i)] * offset;
  }
  double cents = wsum > 0 ? dsum / wsum : 0.0;
  if (cents >= 50.0) cents -= 100.0;
  if (cents < -50.0) cents += 100.0;
  return cents;
}

Hcqt compute_hcqt(const AudioTrack& track, double tuning_cents, const HcqtConfig& cfg) {
  MPE_CHECK(track.sample_rate == kSampleRate, "track must be resampled to 22050 Hz");
  const int64_t n = static_cast<int64_t>(track.samples.size());
  const double lowest = bin_frequency(0, Hcqt::harmonic_factors[0], tuning_cents);
  const int64_t longest_window = static_cast<int64_t>(std::ceil(kQ * kSampleRate / lowest));
  MPE_CHECK(n >= longest_window, "track too short: " << n << " samples, need >= " << longest_window);

  const int64_t frames = frame_count(n);
  Hcqt out;
  out.values = Tensor<float>({static_cast<int64_t>(Hcqt::harmonic_factors.size()), frames, kBins});
  out.tuning_cents = tuning_cents;

  // Octave-layered analysis: each bin runs on the deepest decimated copy that
  // keeps it safely below the band edge, so window lengths stay bounded.
  const int max_layer = 9;  // hop stays integral (512 / 2^9 = 1)
  std::vector<std::vector<float>> layers;
  layers.push_back(track.samples);
  const auto hb = halfband_filter();
  for (int j = 1; j <= max_layer; ++j) layers.push_back(decimate2(layers.back(), hb));

  struct BinPlan {
    int harmonic;
    int bin;
    int layer;
    int64_t win;
    double omega;  // radians per sample at the layer rate
  };
  std::vector<BinPlan> plans;
  for (size_t h = 0; h < Hcqt::harmonic_factors.size(); ++h)
    for (int k = 0; k < kBins; ++k) {
      const double f = bin_frequency(k, Hcqt::harmonic_factors[h], tuning_cents);
      MPE_CHECK(f < 0.5 * kSampleRate, "bin frequency above Nyquist");
      int layer = 0;
      while (layer < max_layer &&
             f <= 0.2375 * (static_cast<double>(kSampleRate) / (1 << (layer + 1))))
        ++layer;
      const double sr_layer = static_cast<double>(kSampleRate) / (1 << layer);
      BinPlan p;
      p.harmonic = static_cast<int>(h);
      p.bin = k;
      p.layer = layer;
      p.win = std::max<int64_t>(4, static_cast<int64_t>(std::round(kQ * sr_layer / f)));
      p.omega = 2.0 * std::numbers::pi * f / sr_layer;
      plans.push_back(p);
    }

#pragma omp parallel for schedule(dynamic, 8) num_threads(mpe::num_threads())
  for (size_t pi = 0; pi < plans.size(); ++pi) {
    const BinPlan& p = plans[pi];
    const std::vector<float>& sig = layers[static_cast<size_t>(p.layer)];
    const int64_t len = static_cast<int64_t>(sig.size());
    const int64_t hop = kHopLength >> p.layer;
    const int64_t w = p.win;
    std::vector<double> wre(static_cast<size_t>(w)), wim(static_cast<size_t>(w));
    double wsum = 0;
    for (int64_t i = 0; i < w; ++i) {
      const double hann = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * i / (w - 1));
      const double ph = p.omega * static_cast<double>(i - w / 2);
      wre[static_cast<size_t>(i)] = hann * std::cos(ph);
      wim[static_cast<size_t>(i)] = -hann * std::sin(ph);
      wsum += hann;
    }
    const double scale = 2.0 / wsum;
    for (int64_t t = 0; t < frames; ++t) {
      const int64_t center = t * hop;
      double re = 0, im = 0;
      const int64_t lo = std::max<int64_t>(0, center - w / 2);
      const int64_t hi = std::min<int64_t>(len, center - w / 2 + w);
      for (int64_t i = lo; i < hi; ++i) {
        const int64_t wi = i - (center - w / 2);
        re += sig[static_cast<size_t>(i)] * wre[static_cast<size_t>(wi)];
        im += sig[static_cast<size_t>(i)] * wim[static_cast<size_t>(wi)];
      }
      const double mag = std::sqrt(re * re + im * im) * scale;
      out.values.at(p.harmonic, t, p.bin) =
          static_cast<float>(std::log1p(cfg.compression * mag));
    }
  }
  return out;
}

// Container layout: magic, u32 harmonics/frames/bins, f64 frame_rate, f64
// tuning_cents, f32 harmonic factors, then f32 values in [harmonic, frame,
// bin] order, all little-endian.
void write_hcqt(const std::string& path, const Hcqt& h) {
  std::ofstream f(path, std::ios::binary);
  MPE_CHECK(f.good(), "cannot write " << path);
  f.write("MPEHCQT1", 8);
  const uint32_t dims[3] = {static_cast<uint32_t>(h.values.dim(0)),
                            static_cast<uint32_t>(h.values.dim(1)),
                            static_cast<uint32_t>(h.values.dim(2))};
  f.write(reinterpret_cast<const char*>(dims), sizeof(dims));
  f.write(reinterpret_cast<const char*>(&h.frame_rate), 8);
  f.write(reinterpret_cast<const char*>(&h.tuning_cents), 8);
  for (double v : Hcqt::harmonic_factors) {
    const float fv = static_cast<float>(v);
    f.write(reinterpret_cast<const char*>(&fv), 4);
  }
  f.write(reinterpret_cast<const char*>(h.values.data()),
          static_cast<std::streamsize>(h.values.numel() * 4));
  MPE_CHECK(f.good(), "write failed: " << path);
}

Hcqt read_hcqt(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  MPE_CHECK(f.good(), "cannot open " << path);
  char magic[8];
  f.read(magic, 8);
  MPE_CHECK(f.good() && std::memcmp(magic, "MPEHCQT1", 8) == 0, "bad hcqt container: " << path);
  uint32_t dims[3];
  f.read(reinterpret_cast<char*>(dims), sizeof(dims));
  Hcqt h;
  f.read(reinterpret_cast<char*>(&h.frame_rate), 8);
  f.read(reinterpret_cast<char*>(&h.tuning_cents), 8);
  float factors[6];
  f.read(reinterpret_cast<char*>(factors), sizeof(factors));
  h.values = Tensor<float>({dims[0], dims[1], dims[2]});
  f.read(reinterpret_cast<char*>(h.values.data()), static_cast<std::streamsize>(h.values.numel() * 4));
  MPE_CHECK(f.good(), "truncated hcqt container: " << path);
  return h;
}

}  // namespace mpe
