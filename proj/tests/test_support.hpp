// Shared fixtures for unit and acceptance tests.
#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

namespace testsupport {

// Byte-level NIfTI-1 writer, independent of the parser: fields are placed at
// the documented offsets by hand.
struct NiftiFixture {
  std::vector<std::uint8_t> bytes;

  NiftiFixture(std::int16_t nx, std::int16_t ny, std::int16_t nz, std::int16_t datatype,
               float scl_slope, float scl_inter, bool big_endian) {
    bytes.assign(352, 0);
    put_i32(0, 348, big_endian);
    put_i16(40, 3, big_endian);  // dim[0]
    put_i16(42, nx, big_endian);
    put_i16(44, ny, big_endian);
    put_i16(46, nz, big_endian);
    for (int i = 4; i < 8; ++i) put_i16(40 + 2 * static_cast<std::size_t>(i), 1, big_endian);
    put_i16(70, datatype, big_endian);
    put_i16(72, datatype == 4 ? 16 : 32, big_endian);
    put_f32(108, 352.0f, big_endian);
    put_f32(112, scl_slope, big_endian);
    put_f32(116, scl_inter, big_endian);
    bytes[344] = 'n';
    bytes[345] = '+';
    bytes[346] = '1';
    bytes[347] = 0;
  }

  void put_i16(std::size_t off, std::int16_t v, bool be) {
    std::uint16_t u = static_cast<std::uint16_t>(v);
    if (be) u = static_cast<std::uint16_t>((u >> 8) | (u << 8));
    std::memcpy(bytes.data() + off, &u, 2);
  }
  void put_i32(std::size_t off, std::int32_t v, bool be) {
    std::uint32_t u = static_cast<std::uint32_t>(v);
    if (be) u = ((u >> 24) & 0xff) | ((u >> 8) & 0xff00) | ((u << 8) & 0xff0000u) | (u << 24);
    std::memcpy(bytes.data() + off, &u, 4);
  }
  void put_f32(std::size_t off, float v, bool be) {
    std::uint32_t u;
    std::memcpy(&u, &v, 4);
    if (be) u = ((u >> 24) & 0xff) | ((u >> 8) & 0xff00) | ((u << 8) & 0xff0000u) | (u << 24);
    std::memcpy(bytes.data() + off, &u, 4);
  }
  void append_f32(float v, bool be) {
    const std::size_t off = bytes.size();
    bytes.resize(off + 4);
    put_f32(off, v, be);
  }
  void append_i16(std::int16_t v, bool be) {
    const std::size_t off = bytes.size();
    bytes.resize(off + 2);
    put_i16(off, v, be);
  }
};

inline std::filesystem::path fresh_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / name;
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

inline std::string file_bytes(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::string s((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return s;
}

}  // namespace testsupport
