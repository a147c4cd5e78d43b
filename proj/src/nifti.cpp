#include "mtseg/nifti.hpp"

#include <cstring>
#include <fstream>

namespace mtseg {

namespace {

// Header field offsets (NIfTI-1, 348-byte header).
constexpr std::size_t kOffSizeofHdr = 0;
constexpr std::size_t kOffDim = 40;
constexpr std::size_t kOffDatatype = 70;
constexpr std::size_t kOffBitpix = 72;
constexpr std::size_t kOffVoxOffset = 108;
constexpr std::size_t kOffSclSlope = 112;
constexpr std::size_t kOffSclInter = 116;
constexpr std::size_t kOffQformCode = 252;
constexpr std::size_t kOffSformCode = 254;
constexpr std::size_t kOffMagic = 344;
constexpr std::size_t kHeaderSize = 348;

std::uint16_t load_u16(const std::uint8_t* p, bool swap) {
  std::uint16_t v;
  std::memcpy(&v, p, 2);
  if (swap) v = static_cast<std::uint16_t>((v >> 8) | (v << 8));
  return v;
}

std::int16_t load_i16(const std::uint8_t* p, bool swap) {
  return static_cast<std::int16_t>(load_u16(p, swap));
}

std::uint32_t load_u32(const std::uint8_t* p, bool swap) {
  std::uint32_t v;
  std::memcpy(&v, p, 4);
  if (swap)
    v = ((v >> 24) & 0xff) | ((v >> 8) & 0xff00) | ((v << 8) & 0xff0000u) | (v << 24);
  return v;
}

std::int32_t load_i32(const std::uint8_t* p, bool swap) {
  return static_cast<std::int32_t>(load_u32(p, swap));
}

float load_f32(const std::uint8_t* p, bool swap) {
  const std::uint32_t bits = load_u32(p, swap);
  float f;
  std::memcpy(&f, &bits, 4);
  return f;
}

bool host_is_little_endian() {
  const std::uint16_t probe = 1;
  std::uint8_t first;
  std::memcpy(&first, &probe, 1);
  return first == 1;
}

}  // namespace

NiftiVolume parse_nifti1(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < kHeaderSize)
    throw ParseError(str_cat("nifti: file is ", bytes.size(),
                             " bytes, need a 348-byte header"));
  const std::uint8_t* p = bytes.data();

  // endianness from the byte order of sizeof_hdr
  bool swap = false;
  std::int32_t sizeof_hdr = load_i32(p + kOffSizeofHdr, false);
  if (sizeof_hdr != 348) {
    sizeof_hdr = load_i32(p + kOffSizeofHdr, true);
    if (sizeof_hdr != 348)
      throw ParseError("nifti: sizeof_hdr at offset 0 is not 348 in either byte order");
    swap = true;
  }

  NiftiHeaderSummary hdr;
  hdr.big_endian = host_is_little_endian() ? swap : !swap;

  hdr.magic.assign(reinterpret_cast<const char*>(p + kOffMagic), 4);
  if (hdr.magic == std::string("ni1\0", 4))
    throw ParseError("nifti: paired (.hdr/.img) form 'ni1' at offset 344 is not supported");
  if (hdr.magic != std::string("n+1\0", 4))
    throw ParseError(str_cat("nifti: bad magic at offset 344, expected \"n+1\", got \"",
                             hdr.magic.substr(0, 3), "\""));

  for (int i = 0; i < 8; ++i) hdr.dim[i] = load_i16(p + kOffDim + 2 * i, swap);
  hdr.datatype = load_i16(p + kOffDatatype, swap);
  hdr.bitpix = load_i16(p + kOffBitpix, swap);
  hdr.vox_offset = static_cast<double>(load_f32(p + kOffVoxOffset, swap));
  hdr.scl_slope = static_cast<double>(load_f32(p + kOffSclSlope, swap));
  hdr.scl_inter = static_cast<double>(load_f32(p + kOffSclInter, swap));

  if (hdr.dim[0] < 3)
    throw ParseError(str_cat("nifti: dim[0] = ", hdr.dim[0], ", expected a 3-D volume"));
  for (int i = 4; i <= hdr.dim[0] && i < 8; ++i)
    if (hdr.dim[i] > 1)
      throw ParseError(str_cat("nifti: dim[", i, "] = ", hdr.dim[i],
                               ", only single-frame 3-D volumes are supported"));
  const Index nx = hdr.dim[1], ny = hdr.dim[2], nz = hdr.dim[3];
  if (nx < 1 || ny < 1 || nz < 1)
    throw ParseError("nifti: non-positive spatial dimensions at offset 40");

  std::size_t elem_size = 0;
  if (hdr.datatype == 4) {
    elem_size = 2;
  } else if (hdr.datatype == 16) {
    elem_size = 4;
  } else {
    throw ParseError(str_cat("nifti: unsupported datatype ", hdr.datatype,
                             " at offset 70 (supported: 4 = int16, 16 = float32)"));
  }
  if (hdr.bitpix != static_cast<std::int16_t>(elem_size * 8))
    hdr.warnings.push_back(str_cat("bitpix ", hdr.bitpix, " disagrees with datatype ",
                                   hdr.datatype));

  if (load_i16(p + kOffQformCode, swap) != 0 || load_i16(p + kOffSformCode, swap) != 0)
    hdr.warnings.push_back("orientation (qform/sform) present but ignored");

  const std::size_t offset = static_cast<std::size_t>(hdr.vox_offset);
  const std::size_t count = static_cast<std::size_t>(nx * ny * nz);
  if (offset < kHeaderSize)
    throw ParseError(str_cat("nifti: vox_offset ", offset, " points inside the header"));
  if (bytes.size() < offset + count * elem_size)
    throw ParseError(str_cat("nifti: data section truncated at offset ", bytes.size(),
                             ", expected ", offset + count * elem_size, " bytes (",
                             count, " voxels of ", elem_size, " bytes at offset ", offset, ")"));

  NiftiVolume vol;
  vol.d = nz;
  vol.h = ny;
  vol.w = nx;
  vol.header = hdr;
  vol.data.resize(count);

  const bool scale = hdr.scl_slope != 0.0;
  const std::uint8_t* src = p + offset;
  // file order is x fastest, z slowest, matching row-major [D][H][W]
  for (std::size_t i = 0; i < count; ++i) {
    double v;
    if (hdr.datatype == 4)
      v = static_cast<double>(load_i16(src + i * 2, swap));
    else
      v = static_cast<double>(load_f32(src + i * 4, swap));
    if (scale) v = v * hdr.scl_slope + hdr.scl_inter;
    vol.data[i] = static_cast<float>(v);
  }
  return vol;
}

NiftiVolume read_nifti1(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError(str_cat("nifti: cannot open ", path));
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  return parse_nifti1(bytes);
}

}  // namespace mtseg
