// Binary checkpoints: every parameter value bit-exact, keyed by id, plus the
// run fingerprint that produced them.
#pragma once

#include <cstring>
#include <fstream>
#include <string>

#include "mtseg/tensor.hpp"

namespace mtseg {

namespace detail {
inline constexpr char kCkptMagic[8] = {'M', 'T', 'S', 'E', 'G', 'C', 'K', '1'};

inline void put_u32(std::ostream& out, std::uint32_t v) {
  out.write(reinterpret_cast<const char*>(&v), 4);
}
inline void put_u64(std::ostream& out, std::uint64_t v) {
  out.write(reinterpret_cast<const char*>(&v), 8);
}
inline std::uint32_t get_u32(std::istream& in) {
  std::uint32_t v = 0;
  in.read(reinterpret_cast<char*>(&v), 4);
  return v;
}
inline std::uint64_t get_u64(std::istream& in) {
  std::uint64_t v = 0;
  in.read(reinterpret_cast<char*>(&v), 8);
  return v;
}
}  // namespace detail

template <typename T>
void save_checkpoint(const std::string& path, const ParamStore<T>& params,
                     const std::string& fingerprint) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError(str_cat("cannot write checkpoint: ", path));
  out.write(detail::kCkptMagic, 8);
  const std::uint8_t prec = sizeof(T);
  out.write(reinterpret_cast<const char*>(&prec), 1);
  detail::put_u32(out, static_cast<std::uint32_t>(fingerprint.size()));
  out.write(fingerprint.data(), static_cast<std::streamsize>(fingerprint.size()));
  detail::put_u64(out, params.all().size());
  for (const auto& p : params.all()) {
    detail::put_u32(out, static_cast<std::uint32_t>(p.id().size()));
    out.write(p.id().data(), static_cast<std::streamsize>(p.id().size()));
    detail::put_u32(out, static_cast<std::uint32_t>(p.shape().size()));
    for (Index d : p.shape()) detail::put_u64(out, static_cast<std::uint64_t>(d));
    out.write(reinterpret_cast<const char*>(p.values().data()),
              static_cast<std::streamsize>(p.values().size() * sizeof(T)));
  }
  if (!out) throw InputError(str_cat("short write to checkpoint: ", path));
}

// Loads values into an already-built store; returns the stored fingerprint.
template <typename T>
std::string load_checkpoint(const std::string& path, ParamStore<T>& params) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LoadError(str_cat("cannot open checkpoint: ", path));
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, detail::kCkptMagic, 8) != 0)
    throw LoadError(str_cat("not a checkpoint file: ", path));
  std::uint8_t prec = 0;
  in.read(reinterpret_cast<char*>(&prec), 1);
  if (prec != sizeof(T))
    throw LoadError(str_cat("checkpoint precision is ", int(prec) * 8, "-bit, model is ",
                            sizeof(T) * 8, "-bit"));
  const auto fp_len = detail::get_u32(in);
  std::string fingerprint(fp_len, '\0');
  in.read(fingerprint.data(), fp_len);
  const auto count = detail::get_u64(in);
  if (count != params.all().size())
    throw LoadError(str_cat("checkpoint holds ", count, " parameters, model has ",
                            params.all().size()));
  for (std::uint64_t i = 0; i < count; ++i) {
    const auto id_len = detail::get_u32(in);
    std::string id(id_len, '\0');
    in.read(id.data(), id_len);
    const auto rank = detail::get_u32(in);
    Shape shape(rank);
    for (auto& d : shape) d = static_cast<Index>(detail::get_u64(in));
    auto* p = params.find(id);
    if (!p) throw LoadError(str_cat("checkpoint parameter not in model: ", id));
    if (p->shape() != shape)
      throw LoadError(str_cat("shape mismatch for parameter ", id, ": checkpoint ",
                              shape_str(shape), ", model ", shape_str(p->shape())));
    in.read(reinterpret_cast<char*>(p->values().data()),
            static_cast<std::streamsize>(p->values().size() * sizeof(T)));
    if (!in) throw LoadError(str_cat("checkpoint truncated while reading ", id));
  }
  return fingerprint;
}

}  // namespace mtseg
