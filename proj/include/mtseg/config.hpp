// Run configuration: model, optimizer, data, ablation switches. JSON in,
// canonical fingerprint out.
#pragma once

#include <cstdint>
#include <string>

#include "mtseg/model.hpp"
#include "mtseg/phantom.hpp"
#include "mtseg/volume.hpp"

namespace mtseg {

enum class Ablation { None, MtAff, MtTsfi, MtFe };
enum class Precision { F32, F64 };

const char* ablation_name(Ablation a);
Ablation ablation_from_name(const std::string& name);
const char* precision_name(Precision p);
Precision precision_from_name(const std::string& name);

struct OptimConfig {
  double lr = 0.01;
  int epochs = 100;
  int batch_size = 12;
  int max_steps = 0;  // 0 = unlimited; caps total optimizer steps when set
};

struct DataConfig {
  std::string manifest;
  SlicePolicy train_slices = SlicePolicy::TumorOnly;
  SlicePolicy eval_slices = SlicePolicy::TumorOnly;
  bool volume_metrics = false;
};

struct RunConfig {
  ModelConfig model;
  OptimConfig optim;
  DataConfig data;
  std::uint64_t seed = 42;
  std::string out_dir = "out";
  Precision precision = Precision::F32;
  Ablation ablation = Ablation::None;
  bool hd95_pooled = false;
  bool hierarchy_postprocess = false;  // optional ET<=TC<=WT intersection at inference

  // Ablation flags map one-to-one onto the derived model variants.
  void apply_ablation() {
    model.aff_enabled = ablation != Ablation::MtAff;
    model.tsfi_enabled = ablation != Ablation::MtTsfi;
    model.fe_enabled = ablation != Ablation::MtFe;
  }

  std::string fingerprint() const;
};

RunConfig run_config_from_json_text(const std::string& text);
RunConfig load_run_config(const std::string& path);
std::string run_config_to_json_text(const RunConfig& rc);

PhantomSpec phantom_spec_from_json_text(const std::string& text);
PhantomSpec load_phantom_spec(const std::string& path);

std::uint64_t fnv1a64(const std::string& s);

}  // namespace mtseg
