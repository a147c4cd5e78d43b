#include "mtseg/phantom.hpp"

#include <algorithm>
#include <cmath>

namespace mtseg {

void Volume::validate() const {
  const auto n = static_cast<std::size_t>(voxels());
  for (const auto& c : channels)
    if (c.size() != n)
      throw DimensionError(str_cat("volume ", id, ": channel size ", c.size(),
                                   " != ", n, " voxels"));
  if (labels.size() != n)
    throw DimensionError(str_cat("volume ", id, ": labelmap size ", labels.size(), " != ", n));
  for (auto l : labels)
    if (l != 0 && l != 1 && l != 2 && l != 4)
      throw InputError(str_cat("volume ", id, ": illegal label ", int(l)));
}

std::vector<SliceSample> extract_slices(const Volume& vol, SlicePolicy policy) {
  std::vector<SliceSample> out;
  const Index plane = vol.h * vol.w;
  for (Index z = 0; z < vol.d; ++z) {
    const std::size_t off = static_cast<std::size_t>(z * plane);
    if (policy == SlicePolicy::TumorOnly) {
      bool tumor = false;
      for (Index i = 0; i < plane && !tumor; ++i) tumor = vol.labels[off + i] != 0;
      if (!tumor) continue;
    }
    SliceSample s;
    s.subject = vol.id;
    s.index = z;
    s.h = vol.h;
    s.w = vol.w;
    for (int m = 0; m < 4; ++m)
      s.channels[m].assign(vol.channels[m].begin() + static_cast<std::ptrdiff_t>(off),
                           vol.channels[m].begin() + static_cast<std::ptrdiff_t>(off + plane));
    std::vector<std::uint8_t> lab(vol.labels.begin() + static_cast<std::ptrdiff_t>(off),
                                  vol.labels.begin() + static_cast<std::ptrdiff_t>(off + plane));
    s.masks = labels_to_regions({vol.h, vol.w}, lab);
    out.push_back(std::move(s));
  }
  return out;
}

ContrastProfile default_contrast_profile() {
  // rows: T1, T1Gd, T2, FLAIR; cols: background, ED, NCR/NET, ET.
  // Only T1Gd tells label 4 apart from label 1.
  return {{{0.50, 0.35, 0.30, 0.30},
           {0.15, 0.40, 0.30, 0.95},
           {0.10, 0.80, 0.60, 0.60},
           {0.10, 0.90, 0.85, 0.85}}};
}

void PhantomSpec::validate() const {
  if (d < 1 || h < 8 || w < 8) throw ConfigError("phantom grid too small");
  if (tumor_count_min < 0 || tumor_count_max < tumor_count_min)
    throw ConfigError("phantom tumor count range invalid");
  if (ed_radius_min <= 0 || ed_radius_max < ed_radius_min)
    throw ConfigError("phantom: edema radius range invalid");
  const double limit = 0.5 * static_cast<double>(std::min(h, w));
  if (ed_radius_max > limit)
    throw ConfigError(str_cat("phantom: edema radius ", ed_radius_max,
                              " exceeds half the grid extent ", limit));
  auto frac_ok = [](double lo, double hi) { return lo > 0 && hi >= lo && hi < 1.0; };
  if (!frac_ok(tc_frac_min, tc_frac_max) || !frac_ok(et_frac_min, et_frac_max))
    throw ConfigError("phantom: nested radius fractions must lie in (0,1)");
  for (const auto& row : profile)
    for (double v : row)
      if (v < 0.0 || v > 1.0)
        throw ConfigError("phantom: contrast profile intensities must lie in [0,1]");
  if (noise_amplitude < 0) throw ConfigError("phantom: noise amplitude must be >= 0");
}

namespace {

struct Ellipsoid {
  double cz, cy, cx;
  double rz, ry, rx;

  bool contains(Index z, Index y, Index x, double scale) const {
    const double dz = (static_cast<double>(z) - cz) / (rz * scale);
    const double dy = (static_cast<double>(y) - cy) / (ry * scale);
    const double dx = (static_cast<double>(x) - cx) / (rx * scale);
    return dz * dz + dy * dy + dx * dx <= 1.0;
  }
};

int profile_column(std::uint8_t label) {
  switch (label) {
    case 2: return 1;
    case 1: return 2;
    case 4: return 3;
    default: return 0;
  }
}

}  // namespace

Volume generate_phantom(const PhantomSpec& spec, const std::string& subject_id) {
  spec.validate();
  Rng rng(spec.seed);

  Volume vol;
  vol.id = subject_id;
  vol.d = spec.d;
  vol.h = spec.h;
  vol.w = spec.w;
  const std::size_t n = static_cast<std::size_t>(vol.voxels());
  vol.labels.assign(n, 0);
  for (auto& c : vol.channels) c.assign(n, 0.0f);

  const int count =
      spec.tumor_count_min +
      static_cast<int>(rng.below(static_cast<Index>(spec.tumor_count_max - spec.tumor_count_min) +
                                 1));
  for (int t = 0; t < count; ++t) {
    Ellipsoid e;
    e.rz = rng.uniform(spec.ed_radius_min, spec.ed_radius_max);
    e.ry = rng.uniform(spec.ed_radius_min, spec.ed_radius_max);
    e.rx = rng.uniform(spec.ed_radius_min, spec.ed_radius_max);
    // depth radius capped so small stacks still contain full tumors
    e.rz = std::min(e.rz, 0.45 * static_cast<double>(spec.d));
    e.cz = rng.uniform(e.rz, static_cast<double>(spec.d) - e.rz);
    e.cy = rng.uniform(e.ry, static_cast<double>(spec.h) - e.ry);
    e.cx = rng.uniform(e.rx, static_cast<double>(spec.w) - e.rx);
    const double tc_scale = rng.uniform(spec.tc_frac_min, spec.tc_frac_max);
    const double et_scale = tc_scale * rng.uniform(spec.et_frac_min, spec.et_frac_max);

    for (Index z = 0; z < spec.d; ++z)
      for (Index y = 0; y < spec.h; ++y)
        for (Index x = 0; x < spec.w; ++x) {
          if (!e.contains(z, y, x, 1.0)) continue;
          const std::size_t idx =
              static_cast<std::size_t>((z * spec.h + y) * spec.w + x);
          if (e.contains(z, y, x, et_scale))
            vol.labels[idx] = 4;
          else if (e.contains(z, y, x, tc_scale))
            vol.labels[idx] = 1;
          else
            vol.labels[idx] = 2;
        }
  }

  // intensities: profile value plus clamped noise, per modality then voxel
  for (int m = 0; m < 4; ++m) {
    auto& chan = vol.channels[m];
    for (std::size_t i = 0; i < n; ++i) {
      double v = spec.profile[m][profile_column(vol.labels[i])];
      if (spec.noise_amplitude > 0) v += spec.noise_amplitude * (2.0 * rng.uniform() - 1.0);
      chan[i] = static_cast<float>(std::clamp(v, 0.0, 1.0));
    }
  }
  vol.validate();
  return vol;
}

}  // namespace mtseg
