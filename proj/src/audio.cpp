#include "mpe/audio.hpp"

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <numbers>
#include <numeric>

#include "mpe/common.hpp"

namespace mpe {

namespace {

uint32_t rd_u32(const uint8_t* p) {
  return static_cast<uint32_t>(p[0]) | static_cast<uint32_t>(p[1]) << 8 |
         static_cast<uint32_t>(p[2]) << 16 | static_cast<uint32_t>(p[3]) << 24;
}
uint16_t rd_u16(const uint8_t* p) {
  return static_cast<uint16_t>(p[0] | p[1] << 8);
}

double kaiser_i0(double x) {
  double sum = 1.0, term = 1.0;
  for (int k = 1; k < 32; ++k) {
    term *= (x / (2.0 * k)) * (x / (2.0 * k));
    sum += term;
    if (term < 1e-14 * sum) break;
  }
  return sum;
}

}  // namespace

std::vector<float> resample(const std::vector<float>& x, int sr_in, int sr_out) {
  if (sr_in == sr_out) return x;
  MPE_CHECK(sr_in > 0 && sr_out > 0, "bad sample rates");
  const int g = std::gcd(sr_in, sr_out);
  const int up = sr_out / g;
  const int down = sr_in / g;
  const int rmax = std::max(up, down);

  // Prototype lowpass at the up-sampled rate, cutoff pi / max(up, down).
  const int zero_crossings = 16;
  const int half = zero_crossings * rmax;
  const int taps = 2 * half + 1;
  const double beta = 8.6;
  const double i0b = kaiser_i0(beta);
  std::vector<double> h(static_cast<size_t>(taps));
  for (int n = 0; n < taps; ++n) {
    const double t = static_cast<double>(n - half) / rmax;
    const double sinc = t == 0.0 ? 1.0 : std::sin(std::numbers::pi * t) / (std::numbers::pi * t);
    const double r = static_cast<double>(n - half) / half;
    const double win = kaiser_i0(beta * std::sqrt(std::max(0.0, 1.0 - r * r))) / i0b;
    h[static_cast<size_t>(n)] = sinc * win / rmax;
  }

  const int64_t n_in = static_cast<int64_t>(x.size());
  const int64_t n_out = (n_in * up) / down;
  std::vector<float> y(static_cast<size_t>(n_out));
  for (int64_t m = 0; m < n_out; ++m) {
    // output sample m sits at up-rate index m*down; input k contributes when
    // |pos - k*up| <= half
    const int64_t pos = m * down;
    double acc = 0;
    int64_t k0 = (pos - half) / up - 2;
    while (k0 * up < pos - half) ++k0;
    for (int64_t k = k0; k * up <= pos + half; ++k) {
      if (k < 0 || k >= n_in) continue;
      acc += h[static_cast<size_t>(pos - k * up + half)] * x[static_cast<size_t>(k)];
    }
    y[static_cast<size_t>(m)] = static_cast<float>(acc * up);
  }
  return y;
}

AudioTrack load_audio(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  MPE_CHECK(f.good(), "cannot open audio file " << path);
  std::vector<uint8_t> buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  MPE_CHECK(buf.size() >= 12, "audio file too small: " << path);
  if (std::memcmp(buf.data(), "fLaC", 4) == 0)
    throw Error("FLAC input is not supported (" + path + "); convert to WAV first");
  MPE_CHECK(std::memcmp(buf.data(), "RIFF", 4) == 0 && std::memcmp(buf.data() + 8, "WAVE", 4) == 0,
            "not a WAV file: " << path);

  int channels = 0, bits = 0, rate = 0, format = 0;
  std::vector<float> mono;
  size_t off = 12;
  bool got_data = false;
  while (off + 8 <= buf.size()) {
    const uint32_t chunk_len = rd_u32(buf.data() + off + 4);
    const uint8_t* body = buf.data() + off + 8;
    const size_t body_len = std::min<size_t>(chunk_len, buf.size() - off - 8);
    if (std::memcmp(buf.data() + off, "fmt ", 4) == 0) {
      MPE_CHECK(body_len >= 16, "truncated fmt chunk");
      format = rd_u16(body);
      channels = rd_u16(body + 2);
      rate = static_cast<int>(rd_u32(body + 4));
      bits = rd_u16(body + 14);
    } else if (std::memcmp(buf.data() + off, "data", 4) == 0) {
      MPE_CHECK(channels > 0 && rate > 0, "data chunk before fmt chunk");
      const int bytes = bits / 8;
      const size_t frames = body_len / (static_cast<size_t>(bytes) * channels);
      mono.resize(frames);
      for (size_t i = 0; i < frames; ++i) {
        double acc = 0;
        for (int c = 0; c < channels; ++c) {
          const uint8_t* s = body + (i * channels + c) * bytes;
          double v = 0;
          if (format == 3 && bits == 32) {
            float fv;
            std::memcpy(&fv, s, 4);
            v = fv;
          } else if (format == 1 && bits == 16) {
            v = static_cast<int16_t>(rd_u16(s)) / 32768.0;
          } else if (format == 1 && bits == 24) {
            int32_t iv = s[0] | s[1] << 8 | s[2] << 16;
            if (iv & 0x800000) iv |= ~0xffffff;
            v = iv / 8388608.0;
          } else if (format == 1 && bits == 32) {
            v = static_cast<int32_t>(rd_u32(s)) / 2147483648.0;
          } else {
            throw Error("unsupported WAV encoding (format=" + std::to_string(format) +
                        ", bits=" + std::to_string(bits) + ") in " + path);
          }
          acc += v;
        }
        mono[i] = static_cast<float>(acc / channels);
      }
      got_data = true;
    }
    off += 8 + chunk_len + (chunk_len & 1);
  }
  MPE_CHECK(got_data, "no data chunk in " << path);
  for (float v : mono) MPE_CHECK(std::isfinite(v), "non-finite sample in " << path);

  AudioTrack track;
  track.sample_rate = 22050;
  track.samples = rate == 22050 ? std::move(mono) : resample(mono, rate, 22050);
  return track;
}

void write_wav(const std::string& path, const std::vector<float>& samples, int sample_rate) {
  std::ofstream f(path, std::ios::binary);
  MPE_CHECK(f.good(), "cannot write " << path);
  const uint32_t data_len = static_cast<uint32_t>(samples.size() * 2);
  auto w32 = [&](uint32_t v) { f.write(reinterpret_cast<const char*>(&v), 4); };
  auto w16 = [&](uint16_t v) { f.write(reinterpret_cast<const char*>(&v), 2); };
  f.write("RIFF", 4);
  w32(36 + data_len);
  f.write("WAVE", 4);
  f.write("fmt ", 4);
  w32(16);
  w16(1);
  w16(1);
  w32(static_cast<uint32_t>(sample_rate));
  w32(static_cast<uint32_t>(sample_rate) * 2);
  w16(2);
  w16(16);
  f.write("data", 4);
  w32(data_len);
  for (float v : samples) {
    const double c = std::max(-1.0, std::min(1.0, static_cast<double>(v)));
    w16(static_cast<uint16_t>(static_cast<int16_t>(std::lround(c * 32767.0))));
  }
}

}  // namespace mpe
