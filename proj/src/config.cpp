#include "mtseg/config.hpp"

#include <fstream>
#include <iomanip>
#include <sstream>

#include <json.hpp>

namespace mtseg {

using nlohmann::json;

const char* ablation_name(Ablation a) {
  switch (a) {
    case Ablation::None: return "none";
    case Ablation::MtAff: return "mt-aff";
    case Ablation::MtTsfi: return "mt-tsfi";
    case Ablation::MtFe: return "mt-fe";
  }
  return "?";
}

Ablation ablation_from_name(const std::string& name) {
  if (name == "none" || name.empty()) return Ablation::None;
  if (name == "mt-aff") return Ablation::MtAff;
  if (name == "mt-tsfi") return Ablation::MtTsfi;
  if (name == "mt-fe") return Ablation::MtFe;
  throw ConfigError(str_cat("unknown ablation: ", name, " (expected mt-aff|mt-tsfi|mt-fe)"));
}

const char* precision_name(Precision p) { return p == Precision::F32 ? "f32" : "f64"; }

Precision precision_from_name(const std::string& name) {
  if (name == "f32") return Precision::F32;
  if (name == "f64") return Precision::F64;
  throw ConfigError(str_cat("unknown precision: ", name, " (expected f32|f64)"));
}

namespace {

SlicePolicy slice_policy_from_name(const std::string& name) {
  if (name == "all") return SlicePolicy::All;
  if (name == "tumor_only") return SlicePolicy::TumorOnly;
  throw ConfigError(str_cat("unknown slice policy: ", name, " (expected all|tumor_only)"));
}

const char* slice_policy_name(SlicePolicy p) {
  return p == SlicePolicy::All ? "all" : "tumor_only";
}

template <typename T, std::size_t N>
void read_array(const json& j, const char* key, std::array<T, N>& out) {
  if (!j.contains(key)) return;
  const auto& a = j.at(key);
  if (!a.is_array() || a.size() != N)
    throw ConfigError(str_cat("config: ", key, " must be an array of ", N, " values"));
  for (std::size_t i = 0; i < N; ++i) out[i] = a.at(i).get<T>();
}

ModelConfig model_from_json(const json& j) {
  ModelConfig m;
  m.input_extent = j.value("input_extent", m.input_extent);
  m.stem_channels = j.value("stem_channels", m.stem_channels);
  m.stem_stride = j.value("stem_stride", m.stem_stride);
  read_array(j, "stage_dims", m.stage_dims);
  read_array(j, "stage_heads", m.stage_heads);
  read_array(j, "sr_ratios", m.sr_ratios);
  read_array(j, "stage_depths", m.stage_depths);
  read_array(j, "patch_sizes", m.patch_sizes);
  m.ffn_ratio = j.value("ffn_ratio", m.ffn_ratio);
  m.se_reduction = j.value("se_reduction", m.se_reduction);
  m.fe_fraction = j.value("fe_fraction", m.fe_fraction);
  m.leaky_slope = j.value("leaky_slope", m.leaky_slope);
  m.aff_enabled = j.value("aff_enabled", m.aff_enabled);
  m.tsfi_enabled = j.value("tsfi_enabled", m.tsfi_enabled);
  m.fe_enabled = j.value("fe_enabled", m.fe_enabled);
  return m;
}

json model_to_json(const ModelConfig& m) {
  json j;
  j["input_extent"] = m.input_extent;
  j["stem_channels"] = m.stem_channels;
  j["stem_stride"] = m.stem_stride;
  j["stage_dims"] = m.stage_dims;
  j["stage_heads"] = m.stage_heads;
  j["sr_ratios"] = m.sr_ratios;
  j["stage_depths"] = m.stage_depths;
  j["patch_sizes"] = m.patch_sizes;
  j["ffn_ratio"] = m.ffn_ratio;
  j["se_reduction"] = m.se_reduction;
  j["fe_fraction"] = m.fe_fraction;
  j["leaky_slope"] = m.leaky_slope;
  j["aff_enabled"] = m.aff_enabled;
  j["tsfi_enabled"] = m.tsfi_enabled;
  j["fe_enabled"] = m.fe_enabled;
  return j;
}

RunConfig from_json(const json& j) {
  RunConfig rc;
  if (j.contains("model")) rc.model = model_from_json(j.at("model"));
  if (j.contains("optim")) {
    const auto& o = j.at("optim");
    rc.optim.lr = o.value("lr", rc.optim.lr);
    rc.optim.epochs = o.value("epochs", rc.optim.epochs);
    rc.optim.batch_size = o.value("batch_size", rc.optim.batch_size);
    rc.optim.max_steps = o.value("max_steps", rc.optim.max_steps);
  }
  if (j.contains("data")) {
    const auto& d = j.at("data");
    rc.data.manifest = d.value("manifest", rc.data.manifest);
    if (d.contains("train_slices"))
      rc.data.train_slices = slice_policy_from_name(d.at("train_slices").get<std::string>());
    if (d.contains("eval_slices"))
      rc.data.eval_slices = slice_policy_from_name(d.at("eval_slices").get<std::string>());
    rc.data.volume_metrics = d.value("volume_metrics", rc.data.volume_metrics);
  }
  rc.seed = j.value("seed", rc.seed);
  rc.out_dir = j.value("out_dir", rc.out_dir);
  if (j.contains("precision")) rc.precision = precision_from_name(j.at("precision"));
  if (j.contains("ablation")) rc.ablation = ablation_from_name(j.at("ablation"));
  rc.hd95_pooled = j.value("hd95_pooled", rc.hd95_pooled);
  rc.hierarchy_postprocess = j.value("hierarchy_postprocess", rc.hierarchy_postprocess);
  return rc;
}

json to_json(const RunConfig& rc) {
  json j;
  j["model"] = model_to_json(rc.model);
  j["optim"] = {{"lr", rc.optim.lr},
                {"epochs", rc.optim.epochs},
                {"batch_size", rc.optim.batch_size},
                {"max_steps", rc.optim.max_steps}};
  j["data"] = {{"manifest", rc.data.manifest},
               {"train_slices", slice_policy_name(rc.data.train_slices)},
               {"eval_slices", slice_policy_name(rc.data.eval_slices)},
               {"volume_metrics", rc.data.volume_metrics}};
  j["seed"] = rc.seed;
  j["out_dir"] = rc.out_dir;
  j["precision"] = precision_name(rc.precision);
  j["ablation"] = ablation_name(rc.ablation);
  j["hd95_pooled"] = rc.hd95_pooled;
  j["hierarchy_postprocess"] = rc.hierarchy_postprocess;
  return j;
}

}  // namespace

std::uint64_t fnv1a64(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string RunConfig::fingerprint() const {
  // out_dir is a run artifact, not an experiment identity
  json j = to_json(*this);
  j.erase("out_dir");
  const std::uint64_t h = fnv1a64(j.dump());
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

RunConfig run_config_from_json_text(const std::string& text) {
  try {
    return from_json(json::parse(text));
  } catch (const json::exception& e) {
    throw ParseError(str_cat("run config: ", e.what()));
  }
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InputError(str_cat("cannot open config: ", path));
  std::stringstream ss;
  ss << in.rdbuf();
  return run_config_from_json_text(ss.str());
}

std::string run_config_to_json_text(const RunConfig& rc) { return to_json(rc).dump(2); }

PhantomSpec phantom_spec_from_json_text(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ParseError(str_cat("phantom spec: ", e.what()));
  }
  PhantomSpec s;
  s.d = j.value("depth", s.d);
  s.h = j.value("height", s.h);
  s.w = j.value("width", s.w);
  s.tumor_count_min = j.value("tumor_count_min", s.tumor_count_min);
  s.tumor_count_max = j.value("tumor_count_max", s.tumor_count_max);
  s.ed_radius_min = j.value("ed_radius_min", s.ed_radius_min);
  s.ed_radius_max = j.value("ed_radius_max", s.ed_radius_max);
  s.tc_frac_min = j.value("tc_frac_min", s.tc_frac_min);
  s.tc_frac_max = j.value("tc_frac_max", s.tc_frac_max);
  s.et_frac_min = j.value("et_frac_min", s.et_frac_min);
  s.et_frac_max = j.value("et_frac_max", s.et_frac_max);
  s.noise_amplitude = j.value("noise_amplitude", s.noise_amplitude);
  s.seed = j.value("seed", s.seed);
  if (j.contains("profile")) {
    const auto& p = j.at("profile");
    static const std::array<const char*, 4> rows = {"t1", "t1gd", "t2", "flair"};
    for (std::size_t m = 0; m < 4; ++m) {
      if (!p.contains(rows[m])) continue;
      const auto& r = p.at(rows[m]);
      if (!r.is_array() || r.size() != 4)
        throw ConfigError("phantom profile rows must be [background, ed, ncr, et]");
      for (std::size_t c = 0; c < 4; ++c) s.profile[m][c] = r.at(c).get<double>();
    }
  }
  s.validate();
  return s;
}

PhantomSpec load_phantom_spec(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InputError(str_cat("cannot open phantom spec: ", path));
  std::stringstream ss;
  ss << in.rdbuf();
  return phantom_spec_from_json_text(ss.str());
}

}  // namespace mtseg
