#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mpe/tensor.hpp"

namespace mpe {

struct NoteEvent {
  double onset = 0;   // seconds
  double offset = 0;  // seconds
  int pitch = 0;      // MIDI

  bool valid() const { return offset > onset && pitch >= 0 && pitch <= 127; }
};

// Binary pitch-activity matrix at the analysis frame rate, MIDI 24..95.
struct PianoRoll {
  int64_t frames = 0;
  std::vector<uint8_t> activity;  // [frames x 72]
  int64_t dropped_notes = 0;      // outside MIDI 24..95

  uint8_t at(int64_t frame, int pitch_index) const {
    return activity[static_cast<size_t>(frame * 72 + pitch_index)];
  }
  int polyphony(int64_t frame) const {
    int n = 0;
    for (int p = 0; p < 72; ++p) n += at(frame, p);
    return n;
  }
};

// Note boundaries are rounded to the nearest frame; a note [t0, t1) covers
// frames round(t0 * fps) .. round(t1 * fps) - 1.
PianoRoll rasterize(const std::vector<NoteEvent>& notes, int64_t n_frames);

// Dataset-specific annotation readers, all normalized to NoteEvent seconds.
//   MuN: CSV with start_time/end_time in samples at 44100 Hz and a "note" column
//   SWD: CSV (comma or semicolon) with start/end seconds and "pitch"
//   Tri/B10/PhA/CSD: per-stem three-column files merged by union
//   Syn and cached tables: onset_sec<TAB>offset_sec<TAB>midi_pitch
std::vector<NoteEvent> load_notes(const std::string& path, const std::string& dataset_id);

std::vector<NoteEvent> parse_note_table(const std::string& text, const std::string& dataset_id,
                                        const std::string& origin);

void write_note_table(const std::string& path, const std::vector<NoteEvent>& notes);

}  // namespace mpe
