// Synthetic multi-modal phantoms: nested ellipsoidal tumor regions with a
// per-modality contrast profile and planted modality-specific signal. The ET
// core is separable from the rest of the tumor core only in the T1Gd channel,
// which is what makes routing ablations measurable.
#pragma once

#include <array>
#include <cstdint>

#include "mtseg/volume.hpp"

namespace mtseg {

// Intensity per tissue class, one row per modality in canonical order.
// Columns: background, edema (label 2), necrotic core (label 1), enhancing
// core (label 4). All values must lie in [0,1].
using ContrastProfile = std::array<std::array<double, 4>, 4>;

ContrastProfile default_contrast_profile();

struct PhantomSpec {
  Index d = 16, h = 64, w = 64;
  int tumor_count_min = 1;
  int tumor_count_max = 2;
  double ed_radius_min = 8.0;   // outer (edema) ellipsoid semi-axes, voxels
  double ed_radius_max = 14.0;
  double tc_frac_min = 0.55;    // tumor-core radius as a fraction of edema
  double tc_frac_max = 0.75;
  double et_frac_min = 0.45;    // enhancing-core radius as a fraction of core
  double et_frac_max = 0.65;
  ContrastProfile profile = default_contrast_profile();
  double noise_amplitude = 0.02;
  std::uint64_t seed = 0;

  void validate() const;
};

// Deterministic for a given spec (including seed).
Volume generate_phantom(const PhantomSpec& spec, const std::string& subject_id);

}  // namespace mtseg
