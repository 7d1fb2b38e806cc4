#include "mpe/patches.hpp"

#include <cmath>
#include <cstring>

#include "mpe/common.hpp"
#include "mpe/models.hpp"

namespace mpe {

std::vector<int64_t> patch_centers(int64_t n_frames, int64_t stride) {
  MPE_CHECK(stride >= 1, "stride must be >= 1");
  std::vector<int64_t> centers;
  for (int64_t c = kPatchContext; c + kPatchContext < n_frames; c += stride) centers.push_back(c);
  return centers;
}

Patch extract_patch(const Hcqt& hcqt, const PianoRoll& roll, int64_t center) {
  MPE_CHECK(hcqt.frames() == roll.frames,
            "hcqt frames (" << hcqt.frames() << ") != roll frames (" << roll.frames << ")");
  MPE_CHECK(center >= kPatchContext && center + kPatchContext < hcqt.frames(),
            "patch center " << center << " out of range");
  Patch p;
  p.input = Tensor<float>({kHarmonics, kPatchFrames, kBins});
  const int64_t t0 = center - kPatchContext;
  for (int64_t h = 0; h < kHarmonics; ++h)
    std::memcpy(p.input.data() + h * kPatchFrames * kBins,
                hcqt.values.data() + (h * hcqt.frames() + t0) * kBins,
                sizeof(float) * static_cast<size_t>(kPatchFrames) * kBins);
  for (int i = 0; i < kPitches; ++i) p.pitch[static_cast<size_t>(i)] = roll.at(center, i);
  p.recount_polyphony();
  return p;
}

int64_t choose_stride(const std::vector<int64_t>& track_frames, int64_t target_examples) {
  MPE_CHECK(target_examples > 0, "target must be positive");
  int64_t best_stride = 1;
  int64_t best_err = -1;
  for (int64_t stride = 1; stride <= 4096; ++stride) {
    int64_t total = 0;
    for (int64_t frames : track_frames) {
      const int64_t usable = frames - 2 * kPatchContext;
      if (usable > 0) total += (usable + stride - 1) / stride;
    }
    const int64_t err = std::llabs(total - target_examples);
    if (best_err < 0 || err < best_err) {
      best_err = err;
      best_stride = stride;
    }
    if (total <= target_examples && err >= best_err && best_err >= 0 && total < target_examples)
      break;  // counts only shrink from here
  }
  return best_stride;
}

Patch augment_transpose(const Patch& p, int semitones) {
  MPE_CHECK(semitones >= -5 && semitones <= 5, "transposition must be within +-5 semitones");
  Patch out;
  out.input = Tensor<float>({kHarmonics, kPatchFrames, kBins});
  const int shift = kBinsPerSemitone * semitones;
  for (int64_t h = 0; h < kHarmonics; ++h)
    for (int64_t t = 0; t < kPatchFrames; ++t)
      for (int64_t b = 0; b < kBins; ++b) {
        const int64_t src = b - shift;
        out.input.at(h, t, b) =
            (src >= 0 && src < kBins) ? p.input.at(h, t, src) : 0.0f;
      }
  for (int i = 0; i < kPitches; ++i) {
    const int src = i - semitones;
    out.pitch[static_cast<size_t>(i)] =
        (src >= 0 && src < kPitches) ? p.pitch[static_cast<size_t>(src)] : 0;
  }
  out.recount_polyphony();
  return out;
}

Patch augment_tune(const Patch& p, double subshift) {
  const bool whole = subshift == 1.0 || subshift == -1.0;
  const bool half = subshift == 0.5 || subshift == -0.5;
  MPE_CHECK(whole || half, "tuning subshift must be one of -1, -0.5, +0.5, +1");
  Patch out = p;  // labels preserved
  for (int64_t h = 0; h < kHarmonics; ++h)
    for (int64_t t = 0; t < kPatchFrames; ++t) {
      const float* src = p.input.data() + (h * kPatchFrames + t) * kBins;
      float* dst = out.input.data() + (h * kPatchFrames + t) * kBins;
      if (whole) {
        const int s = subshift > 0 ? 1 : -1;
        for (int64_t b = 0; b < kBins; ++b) {
          const int64_t j = b - s;
          dst[b] = (j >= 0 && j < kBins) ? src[j] : 0.0f;
        }
      } else {
        // half-bin shift: each output bin averages the two bins it straddles
        for (int64_t b = 0; b < kBins; ++b) {
          const int64_t j = subshift > 0 ? b - 1 : b + 1;
          const float other = (j >= 0 && j < kBins) ? src[j] : 0.0f;
          dst[b] = 0.5f * (src[b] + other);
        }
      }
    }
  return out;
}

Patch augment_noise(const Patch& p, uint64_t seed, double sigma) {
  Patch out = p;
  Rng rng(seed);
  for (auto& v : out.input.v) v += static_cast<float>(sigma * rng.normal());
  return out;
}

Patch augment_random_eq(const Patch& p, int alpha, int beta) {
  MPE_CHECK(alpha >= 1 && alpha <= 21, "alpha must be in 1..21");
  MPE_CHECK(beta >= 1 && beta <= 216, "beta must be in 1..216");
  Patch out = p;
  // Smooth attenuation away from the anchor bin beta: w(beta) = 1, depth
  // alpha/22 (kept strictly below 1 so weights stay positive), width one
  // octave.
  const double depth = static_cast<double>(alpha) / 22.0;
  const double sigma_eq = 36.0;
  std::array<float, kBins> w;
  for (int b = 0; b < kBins; ++b) {
    const double d = static_cast<double>(b + 1 - beta);
    w[static_cast<size_t>(b)] =
        static_cast<float>(1.0 - depth * (1.0 - std::exp(-d * d / (2.0 * sigma_eq * sigma_eq))));
  }
  for (int64_t h = 0; h < kHarmonics; ++h)
    for (int64_t t = 0; t < kPatchFrames; ++t) {
      float* dst = out.input.data() + (h * kPatchFrames + t) * kBins;
      for (int64_t b = 0; b < kBins; ++b) dst[b] *= w[static_cast<size_t>(b)];
    }
  return out;
}

Patch apply_augmentations(const Patch& p, const AugmentationPolicy& policy, Rng rng) {
  if (!policy.enabled) return p;
  Patch out = p;
  if (rng.uniform() < policy.p_transpose) {
    const int shift = static_cast<int>(rng.randint(-5, 5));
    out = augment_transpose(out, shift);
  }
  if (rng.uniform() < policy.p_tune) {
    static constexpr double kSubshifts[4] = {-1.0, -0.5, 0.5, 1.0};
    out = augment_tune(out, kSubshifts[rng.randint(0, 3)]);
  }
  if (rng.uniform() < policy.p_eq) {
    const int alpha = static_cast<int>(rng.randint(1, 21));
    const int beta = static_cast<int>(rng.randint(1, 216));
    out = augment_random_eq(out, alpha, beta);
  }
  out = augment_noise(out, rng.next_u64(), policy.noise_sigma);
  return out;
}

}  // namespace mpe
