#include "mtseg/dataset.hpp"

#include <filesystem>
#include <fstream>

#include <json.hpp>

namespace mtseg {

namespace fs = std::filesystem;
using nlohmann::json;

Split split_from_name(const std::string& name) {
  if (name == "train") return Split::Train;
  if (name == "val") return Split::Val;
  if (name == "test") return Split::Test;
  throw InputError(str_cat("unknown split name: ", name));
}

std::vector<ManifestEntry> DatasetManifest::of_split(Split s) const {
  std::vector<ManifestEntry> out;
  for (const auto& e : entries)
    if (e.split == s) out.push_back(e);
  return out;
}

DatasetManifest split_dataset(const std::vector<std::string>& subject_ids,
                              const std::vector<std::string>& paths, std::uint64_t seed,
                              std::vector<std::string>* warnings) {
  if (subject_ids.size() != paths.size())
    throw InputError("split_dataset: ids and paths differ in length");
  const Index n = static_cast<Index>(subject_ids.size());
  if (n < 10 && warnings)
    warnings->push_back(str_cat("only ", n, " subjects; 8:1:1 split degenerates"));

  std::vector<Index> order(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
  Rng rng(seed);
  rng.shuffle(order);

  const Index n_train = n * 8 / 10;
  const Index n_val = n / 10;

  DatasetManifest m;
  m.split_seed = seed;
  for (Index i = 0; i < n; ++i) {
    const Index s = order[static_cast<std::size_t>(i)];
    ManifestEntry e;
    e.id = subject_ids[static_cast<std::size_t>(s)];
    e.path = paths[static_cast<std::size_t>(s)];
    e.split = i < n_train ? Split::Train : (i < n_train + n_val ? Split::Val : Split::Test);
    m.entries.push_back(std::move(e));
  }
  return m;
}

void save_manifest(const DatasetManifest& m, const std::string& path) {
  json j;
  j["split_seed"] = m.split_seed;
  j["subjects"] = json::array();
  for (const auto& e : m.entries)
    j["subjects"].push_back({{"id", e.id}, {"path", e.path}, {"split", split_name(e.split)}});
  std::ofstream out(path);
  if (!out) throw InputError(str_cat("cannot write manifest: ", path));
  out << j.dump(2) << "\n";
}

DatasetManifest load_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InputError(str_cat("cannot open manifest: ", path));
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ParseError(str_cat("manifest ", path, ": ", e.what()));
  }
  DatasetManifest m;
  m.split_seed = j.value("split_seed", std::uint64_t(0));
  for (const auto& s : j.at("subjects")) {
    ManifestEntry e;
    e.id = s.at("id").get<std::string>();
    e.path = s.at("path").get<std::string>();
    e.split = split_from_name(s.at("split").get<std::string>());
    m.entries.push_back(std::move(e));
  }
  return m;
}

namespace {

constexpr std::array<const char*, 4> kChannelFiles = {"t1.raw", "t1gd.raw", "t2.raw",
                                                      "flair.raw"};

void write_bytes(const fs::path& p, const void* data, std::size_t bytes) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw InputError(str_cat("cannot write ", p.string()));
  out.write(static_cast<const char*>(data), static_cast<std::streamsize>(bytes));
}

std::vector<char> read_bytes(const fs::path& p, std::size_t expected) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw InputError(str_cat("cannot open ", p.string()));
  std::vector<char> buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (buf.size() != expected)
    throw ParseError(str_cat(p.string(), ": expected ", expected, " bytes, found ", buf.size()));
  return buf;
}

}  // namespace

void write_volume(const Volume& vol, const std::string& dir) {
  vol.validate();
  fs::create_directories(dir);
  const fs::path base(dir);
  for (int m = 0; m < 4; ++m)
    write_bytes(base / kChannelFiles[m], vol.channels[m].data(),
                vol.channels[m].size() * sizeof(float));
  write_bytes(base / "label.raw", vol.labels.data(), vol.labels.size());

  json meta;
  meta["subject"] = vol.id;
  meta["shape_dhw"] = {vol.d, vol.h, vol.w};
  meta["endianness"] = "little";
  meta["channels"] = {{"t1", "f32"}, {"t1gd", "f32"}, {"t2", "f32"}, {"flair", "f32"},
                      {"label", "u8"}};
  meta["labels"] = {{"0", "background"}, {"1", "NCR/NET"}, {"2", "ED"}, {"4", "ET"}};
  std::ofstream out(base / "meta.json");
  if (!out) throw InputError(str_cat("cannot write ", (base / "meta.json").string()));
  out << meta.dump(2) << "\n";
}

Volume read_volume(const std::string& dir, const std::string& id) {
  const fs::path base(dir);
  std::ifstream in(base / "meta.json");
  if (!in) throw InputError(str_cat("cannot open ", (base / "meta.json").string()));
  json meta;
  try {
    in >> meta;
  } catch (const json::exception& e) {
    throw ParseError(str_cat((base / "meta.json").string(), ": ", e.what()));
  }

  Volume vol;
  vol.id = id.empty() ? meta.value("subject", std::string("?")) : id;
  const auto shape = meta.at("shape_dhw");
  vol.d = shape.at(0).get<Index>();
  vol.h = shape.at(1).get<Index>();
  vol.w = shape.at(2).get<Index>();
  const std::size_t n = static_cast<std::size_t>(vol.voxels());

  for (int m = 0; m < 4; ++m) {
    auto buf = read_bytes(base / kChannelFiles[m], n * sizeof(float));
    vol.channels[m].resize(n);
    std::memcpy(vol.channels[m].data(), buf.data(), buf.size());
  }
  auto lab = read_bytes(base / "label.raw", n);
  vol.labels.assign(lab.begin(), lab.end());
  vol.validate();
  return vol;
}

}  // namespace mtseg
