#pragma once

#include <map>
#include <set>
#include <string>
#include <vector>

namespace mpe {

struct TrackRecord {
  std::string track_id;
  std::string dataset_id;  // MuN, SWD, Tri, B10, PhA, CSD, or Syn for generated corpora
  std::string audio_path;
  std::string annotation_path;
  std::string cycle_id;
  std::string version_id;
  std::string movement_label;
  std::set<std::string> split_tags;
};

class Manifest {
 public:
  void add(TrackRecord rec);
  const TrackRecord& get(const std::string& track_id) const;
  bool has(const std::string& track_id) const;
  const std::vector<TrackRecord>& tracks() const { return tracks_; }
  std::vector<std::string> ids_for_dataset(const std::string& dataset_id) const;

  static Manifest load(const std::string& path);
  void save(const std::string& path) const;

 private:
  std::vector<TrackRecord> tracks_;
  std::map<std::string, size_t> index_;
};

}  // namespace mpe
