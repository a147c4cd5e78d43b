// Multi-modal volumes and their 2-D training slices.
#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "mtseg/metrics.hpp"
#include "mtseg/modality.hpp"

namespace mtseg {

// Four modality arrays plus a labelmap, all D x H x W. Modality intensities
// live in [0,1]; labels are restricted to {0,1,2,4}.
struct Volume {
  std::string id;
  Index d = 0, h = 0, w = 0;
  std::array<std::vector<float>, 4> channels;  // indexed by Modality order
  std::vector<std::uint8_t> labels;

  Index voxels() const { return d * h * w; }
  Shape dhw() const { return {d, h, w}; }

  void validate() const;
};

// One 2-D training unit: four modality channels plus the three region masks.
struct SliceSample {
  std::string subject;
  Index index = 0;  // axial position within the volume
  Index h = 0, w = 0;
  std::array<std::vector<float>, 4> channels;
  std::array<BinaryMask, 3> masks;  // WT, TC, ET
};

enum class SlicePolicy { All, TumorOnly };

std::vector<SliceSample> extract_slices(const Volume& vol, SlicePolicy policy);

}  // namespace mtseg
