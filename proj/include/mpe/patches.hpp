#pragma once

#include <array>
#include <vector>

#include "mpe/annotations.hpp"
#include "mpe/rng.hpp"
#include "mpe/signal.hpp"
#include "mpe/tensor.hpp"

namespace mpe {

// Training example: a 75-frame HCQT excerpt plus the center frame's targets.
struct Patch {
  Tensor<float> input;             // [6, 75, 216]
  std::array<uint8_t, 72> pitch{}; // center-frame activity
  int polyphony = 0;               // min(active pitches, 23)

  int recount_polyphony() {
    int n = 0;
    for (uint8_t v : pitch) n += v;
    polyphony = std::min(n, 23);
    return polyphony;
  }
};

// Valid patch centers: 37, 37+stride, ... up to frames-38 (no padding).
std::vector<int64_t> patch_centers(int64_t n_frames, int64_t stride);

Patch extract_patch(const Hcqt& hcqt, const PianoRoll& roll, int64_t center);

// Stride whose corpus-wide patch count is nearest the target.
int64_t choose_stride(const std::vector<int64_t>& track_frames, int64_t target_examples);

// Augmentations. All are deterministic; the rng-taking ones derive everything
// from the explicit seed.
Patch augment_transpose(const Patch& p, int semitones);
Patch augment_tune(const Patch& p, double subshift);  // one of {-1, -0.5, +0.5, +1}
Patch augment_noise(const Patch& p, uint64_t seed, double sigma = 1e-4);
Patch augment_random_eq(const Patch& p, int alpha, int beta);

struct AugmentationPolicy {
  bool enabled = true;
  double p_transpose = 0.5;
  double p_tune = 0.5;
  double p_eq = 0.5;
  double noise_sigma = 1e-4;  // applied to every example
};

// Applies the sampling policy: transposition, tuning, and EQ each drawn with
// their probabilities, Gaussian noise always.
Patch apply_augmentations(const Patch& p, const AugmentationPolicy& policy, Rng rng);

}  // namespace mpe
