#pragma once

#include <string>
#include <vector>

namespace mpe {

struct AudioTrack {
  std::vector<float> samples;  // mono, nominal range [-1, 1]
  int sample_rate = 22050;
};

// Reads a RIFF/WAV file (PCM 16/24/32 or float32), downmixes to mono, and
// resamples to 22050 Hz. FLAC input is detected and rejected with a clear
// error; decode support would need an external codec library.
AudioTrack load_audio(const std::string& path);

void write_wav(const std::string& path, const std::vector<float>& samples, int sample_rate);

// Polyphase windowed-sinc resampler (rational ratio).
std::vector<float> resample(const std::vector<float>& x, int sr_in, int sr_out);

}  // namespace mpe
