// Dataset manifests, deterministic 8:1:1 splitting, and the native on-disk
// volume format (raw little-endian channel files plus a JSON sidecar).
#pragma once

#include <string>
#include <vector>

#include "mtseg/volume.hpp"

namespace mtseg {

enum class Split { Train, Val, Test };

inline const char* split_name(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Val: return "val";
    case Split::Test: return "test";
  }
  return "?";
}

Split split_from_name(const std::string& name);

struct ManifestEntry {
  std::string id;
  std::string path;  // subject directory, relative to the manifest file
  Split split = Split::Train;
};

struct DatasetManifest {
  std::uint64_t split_seed = 0;
  std::vector<ManifestEntry> entries;

  std::vector<ManifestEntry> of_split(Split s) const;
};

// Seeded shuffle, then floor(0.8 n) train, floor(0.1 n) val, remainder test.
// Fewer than 10 subjects degenerates with a warning pushed to `warnings`.
DatasetManifest split_dataset(const std::vector<std::string>& subject_ids,
                              const std::vector<std::string>& paths, std::uint64_t seed,
                              std::vector<std::string>* warnings = nullptr);

void save_manifest(const DatasetManifest& m, const std::string& path);
DatasetManifest load_manifest(const std::string& path);

// Native storage: <dir>/{t1,t1gd,t2,flair}.raw (float32 LE), <dir>/label.raw
// (uint8), <dir>/meta.json. Round-trips are bit-exact.
void write_volume(const Volume& vol, const std::string& dir);
Volume read_volume(const std::string& dir, const std::string& id);

}  // namespace mtseg
