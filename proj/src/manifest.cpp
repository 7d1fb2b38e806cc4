#include "mpe/manifest.hpp"

#include <fstream>
#include <sstream>

#include "mpe/common.hpp"

namespace mpe {

void Manifest::add(TrackRecord rec) {
  MPE_CHECK(!rec.track_id.empty(), "track record without track_id");
  MPE_CHECK(index_.find(rec.track_id) == index_.end(), "duplicate track_id " << rec.track_id);
  index_[rec.track_id] = tracks_.size();
  tracks_.push_back(std::move(rec));
}

const TrackRecord& Manifest::get(const std::string& track_id) const {
  auto it = index_.find(track_id);
  MPE_CHECK(it != index_.end(), "track " << track_id << " not in manifest");
  return tracks_[it->second];
}

bool Manifest::has(const std::string& track_id) const { return index_.count(track_id) > 0; }

std::vector<std::string> Manifest::ids_for_dataset(const std::string& dataset_id) const {
  std::vector<std::string> out;
  for (const auto& t : tracks_)
    if (t.dataset_id == dataset_id) out.push_back(t.track_id);
  return out;
}

// One record per line, whitespace-separated key=value pairs. Values with
// spaces are not supported; paths should avoid them.
Manifest Manifest::load(const std::string& path) {
  std::ifstream f(path);
  MPE_CHECK(f.good(), "cannot open manifest " << path);
  Manifest m;
  std::string line;
  int lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    std::istringstream iss(line);
    std::string kv;
    TrackRecord rec;
    while (iss >> kv) {
      const auto eq = kv.find('=');
      MPE_CHECK(eq != std::string::npos, "manifest " << path << ":" << lineno << ": expected key=value, got '" << kv << "'");
      const std::string key = kv.substr(0, eq);
      const std::string val = kv.substr(eq + 1);
      if (key == "track_id") rec.track_id = val;
      else if (key == "dataset_id") rec.dataset_id = val;
      else if (key == "audio") rec.audio_path = val;
      else if (key == "annotation") rec.annotation_path = val;
      else if (key == "cycle") rec.cycle_id = val;
      else if (key == "version") rec.version_id = val;
      else if (key == "movement") rec.movement_label = val;
      else if (key == "tags") {
        std::istringstream ts(val);
        std::string tag;
        while (std::getline(ts, tag, ',')) rec.split_tags.insert(tag);
      } else {
        throw Error("manifest " + path + ":" + std::to_string(lineno) + ": unknown key '" + key + "'");
      }
    }
    m.add(std::move(rec));
  }
  return m;
}

void Manifest::save(const std::string& path) const {
  std::ofstream f(path);
  MPE_CHECK(f.good(), "cannot write manifest " << path);
  for (const auto& t : tracks_) {
    f << "track_id=" << t.track_id << " dataset_id=" << t.dataset_id;
    if (!t.audio_path.empty()) f << " audio=" << t.audio_path;
    if (!t.annotation_path.empty()) f << " annotation=" << t.annotation_path;
    if (!t.cycle_id.empty()) f << " cycle=" << t.cycle_id;
    if (!t.version_id.empty()) f << " version=" << t.version_id;
    if (!t.movement_label.empty()) f << " movement=" << t.movement_label;
    if (!t.split_tags.empty()) {
      f << " tags=";
      bool first = true;
      for (const auto& tag : t.split_tags) {
        if (!first) f << ",";
        f << tag;
        first = false;
      }
    }
    f << "\n";
  }
}

}  // namespace mpe
