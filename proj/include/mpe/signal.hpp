#pragma once

#include <array>
#include <string>

#include "mpe/audio.hpp"
#include "mpe/tensor.hpp"

namespace mpe {

constexpr int kSampleRate = 22050;
constexpr int kHopLength = 512;
constexpr int kBinsPerOctave = 36;
constexpr int kBinsPerSemitone = 3;
constexpr double kFrameRate = static_cast<double>(kSampleRate) / kHopLength;

// Harmonic stack of constant-Q magnitudes, log-compressed.
struct Hcqt {
  Tensor<float> values;  // [6, frames, 216]
  double frame_rate = kFrameRate;
  double tuning_cents = 0.0;
  static constexpr std::array<double, 6> harmonic_factors = {0.5, 1, 2, 3, 4, 5};

  int64_t frames() const { return values.dim(1); }
};

struct HcqtConfig {
  double compression = 1.0;  // c in log(1 + c*x)
};

// Time of frame k (start-of-frame convention, hop 512 at 22050 Hz).
double frame_time(int64_t frame_index);

// Smallest number of frames covering the given sample count.
int64_t frame_count(int64_t n_samples);

// Center frequency of semitone-grid bin k (0-based, bin 1 = C1) at harmonic
// factor h, shifted by the global tuning offset in cents.
double bin_frequency(int bin, double harmonic_factor, double tuning_cents);

// Global tuning deviation from the A440 semitone grid, in cents in [-50, 50).
// Empty or silent input yields 0 with *silent_warning set.
double estimate_tuning(const AudioTrack& track, bool* silent_warning = nullptr);

Hcqt compute_hcqt(const AudioTrack& track, double tuning_cents, const HcqtConfig& cfg = {});

void write_hcqt(const std::string& path, const Hcqt& h);
Hcqt read_hcqt(const std::string& path);

}  // namespace mpe
