// Minimal NIfTI-1 reader: uncompressed .nii, single-file ("n+1") form,
// int16 or float32 data, endianness inferred from the header. Orientation
// fields (qform/sform) are ignored with a warning.
#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "mtseg/common.hpp"

namespace mtseg {

struct NiftiHeaderSummary {
  bool big_endian = false;
  std::array<std::int16_t, 8> dim{};
  std::int16_t datatype = 0;  // 4 = int16, 16 = float32
  std::int16_t bitpix = 0;
  double vox_offset = 0.0;
  double scl_slope = 0.0;
  double scl_inter = 0.0;
  std::string magic;
  std::vector<std::string> warnings;
};

struct NiftiVolume {
  Index d = 0, h = 0, w = 0;  // canonical order: D = dim[3], H = dim[2], W = dim[1]
  std::vector<float> data;    // row-major [D][H][W], scaling applied
  NiftiHeaderSummary header;
};

NiftiVolume parse_nifti1(const std::vector<std::uint8_t>& bytes);
NiftiVolume read_nifti1(const std::string& path);

}  // namespace mtseg
