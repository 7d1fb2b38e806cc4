#include "mpe/annotations.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "mpe/common.hpp"
#include "mpe/signal.hpp"

namespace mpe {

PianoRoll rasterize(const std::vector<NoteEvent>& notes, int64_t n_frames) {
  MPE_CHECK(n_frames >= 1, "n_frames must be >= 1");
  PianoRoll roll;
  roll.frames = n_frames;
  roll.activity.assign(static_cast<size_t>(n_frames) * 72, 0);
  for (const auto& note : notes) {
    MPE_CHECK(note.valid(), "invalid note event (onset " << note.onset << ", offset "
                                                          << note.offset << ", pitch " << note.pitch << ")");
    if (note.pitch < 24 || note.pitch > 95) {
      ++roll.dropped_notes;
      continue;
    }
    const int p = note.pitch - 24;
    const int64_t first = static_cast<int64_t>(std::floor(note.onset * kFrameRate + 0.5));
    const int64_t last = static_cast<int64_t>(std::floor(note.offset * kFrameRate + 0.5));
    for (int64_t k = std::max<int64_t>(0, first); k < std::min(n_frames, last); ++k)
      roll.activity[static_cast<size_t>(k * 72 + p)] = 1;
  }
  return roll;
}

namespace {

std::vector<std::string> split_fields(const std::string& line, char sep) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : line) {
    if (ch == sep) {
      out.push_back(cur);
      cur.clear();
    } else if (ch != '\r') {
      cur += ch;
    }
  }
  out.push_back(cur);
  return out;
}

std::string lower(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return std::tolower(c); });
  return s;
}

bool looks_numeric(const std::string& s) {
  if (s.empty()) return false;
  char* end = nullptr;
  std::strtod(s.c_str(), &end);
  return end != s.c_str() && *end == '\0';
}

}  // namespace

std::vector<NoteEvent> parse_note_table(const std::string& text, const std::string& dataset_id,
                                        const std::string& origin) {
  std::istringstream in(text);
  std::string line;
  std::vector<std::string> lines;
  while (std::getline(in, line)) {
    if (!line.empty() && line[0] != '#') lines.push_back(line);
  }
  MPE_CHECK(!lines.empty(), "empty annotation table " << origin);

  char sep = '\t';
  if (lines[0].find(';') != std::string::npos) sep = ';';
  else if (lines[0].find(',') != std::string::npos) sep = ',';

  // column resolution: header names when present, else positional
  int col_on = 0, col_off = 1, col_pitch = 2;
  size_t first_row = 0;
  {
    auto head = split_fields(lines[0], sep);
    bool has_header = false;
    for (size_t i = 0; i < head.size(); ++i) {
      const std::string h = lower(head[i]);
      if (h == "start_time" || h == "start" || h == "onset" || h == "onset_sec") {
        col_on = static_cast<int>(i);
        has_header = true;
      } else if (h == "end_time" || h == "end" || h == "offset" || h == "offset_sec") {
        col_off = static_cast<int>(i);
        has_header = true;
      } else if (h == "note" || h == "pitch" || h == "midi_pitch") {
        col_pitch = static_cast<int>(i);
        has_header = true;
      }
    }
    if (has_header) first_row = 1;
    else MPE_CHECK(looks_numeric(head[0]), "cannot parse annotation header of " << origin);
  }

  // MuN stores times as sample indices at the source rate
  const double time_scale = dataset_id == "MuN" ? 1.0 / 44100.0 : 1.0;

  std::vector<NoteEvent> notes;
  for (size_t r = first_row; r < lines.size(); ++r) {
    auto fields = split_fields(lines[r], sep);
    const int needed = std::max({col_on, col_off, col_pitch});
    MPE_CHECK(static_cast<int>(fields.size()) > needed,
              origin << ": row " << r << " has " << fields.size() << " fields");
    NoteEvent e;
    e.onset = std::stod(fields[static_cast<size_t>(col_on)]) * time_scale;
    e.offset = std::stod(fields[static_cast<size_t>(col_off)]) * time_scale;
    e.pitch = static_cast<int>(std::lround(std::stod(fields[static_cast<size_t>(col_pitch)])));
    MPE_CHECK(e.valid(), origin << ": row " << r << " invalid note");
    notes.push_back(e);
  }
  return notes;
}

std::vector<NoteEvent> load_notes(const std::string& path, const std::string& dataset_id) {
  namespace fs = std::filesystem;
  std::vector<std::string> files;
  if (fs::is_directory(path)) {
    // multi-track datasets: per-stem note lists merged by union
    for (const auto& entry : fs::directory_iterator(path))
      if (entry.is_regular_file()) files.push_back(entry.path().string());
    std::sort(files.begin(), files.end());
    MPE_CHECK(!files.empty(), "no annotation files in " << path);
  } else {
    files.push_back(path);
  }
  std::vector<NoteEvent> all;
  for (const auto& file : files) {
    std::ifstream f(file);
    MPE_CHECK(f.good(), "cannot open annotation " << file);
    std::stringstream ss;
    ss << f.rdbuf();
    auto notes = parse_note_table(ss.str(), dataset_id, file);
    all.insert(all.end(), notes.begin(), notes.end());
  }
  std::sort(all.begin(), all.end(), [](const NoteEvent& a, const NoteEvent& b) {
    return a.onset < b.onset || (a.onset == b.onset && a.pitch < b.pitch);
  });
  return all;
}

void write_note_table(const std::string& path, const std::vector<NoteEvent>& notes) {
  std::ofstream f(path);
  MPE_CHECK(f.good(), "cannot write " << path);
  f << "onset_sec\toffset_sec\tmidi_pitch\n";
  for (const auto& n : notes) f << n.onset << "\t" << n.offset << "\t" << n.pitch << "\n";
}

}  // namespace mpe
