#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "flowcast/errors.hpp"
#include "flowcast/tensor.hpp"

#include <json.hpp>

namespace flowcast {

/// Versioned binary container: magic, version, kind, a JSON structure
/// header, then raw little-endian float64 parameter blocks in declaration
/// order. Round-trips bitwise.
namespace checkpoint {

inline constexpr char kMagic[4] = {'F', 'L', 'W', 'C'};
inline constexpr std::uint32_t kVersion = 1;

enum class Kind : std::uint32_t { kFlowModel = 0, kGaussianBaseline = 1 };

namespace detail {

inline void put_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 4);
}

inline void put_u64(std::ostream& os, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 8);
}

inline std::uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
  return v;
}

inline std::uint64_t get_u64(std::istream& is) {
  unsigned char b[8];
  is.read(reinterpret_cast<char*>(b), 8);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

inline void put_f64(std::ostream& os, double d) {
  std::uint64_t v = std::bit_cast<std::uint64_t>(d);
  put_u64(os, v);
}

inline double get_f64(std::istream& is) { return std::bit_cast<double>(get_u64(is)); }

}  // namespace detail

struct Contents {
  Kind kind = Kind::kFlowModel;
  nlohmann::json header;
  std::vector<Tensor> blocks;
};

inline void save(const std::string& path, Kind kind, const nlohmann::json& header,
                 const std::vector<const Tensor*>& blocks) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw UsageError("cannot open checkpoint file for writing: " + path);
  os.write(kMagic, 4);
  detail::put_u32(os, kVersion);
  detail::put_u32(os, static_cast<std::uint32_t>(kind));
  const std::string js = header.dump();
  detail::put_u64(os, js.size());
  os.write(js.data(), static_cast<std::streamsize>(js.size()));
  detail::put_u64(os, blocks.size());
  for (const Tensor* t : blocks) {
    detail::put_u64(os, t->ndim());
    for (std::size_t d : t->shape()) detail::put_u64(os, d);
    for (double v : t->raw()) detail::put_f64(os, v);
  }
  if (!os) throw UsageError("failed writing checkpoint: " + path);
}

inline Contents load(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw UsageError("cannot open checkpoint file: " + path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kMagic, 4) != 0)
    throw UsageError("not a checkpoint file (bad magic): " + path);
  const std::uint32_t version = detail::get_u32(is);
  if (version != kVersion)
    throw UsageError("unsupported checkpoint version " + std::to_string(version));
  Contents c;
  c.kind = static_cast<Kind>(detail::get_u32(is));
  const std::uint64_t js_len = detail::get_u64(is);
  std::string js(js_len, '\0');
  is.read(js.data(), static_cast<std::streamsize>(js_len));
  c.header = nlohmann::json::parse(js);
  const std::uint64_t n_blocks = detail::get_u64(is);
  c.blocks.reserve(n_blocks);
  for (std::uint64_t b = 0; b < n_blocks; ++b) {
    const std::uint64_t nd = detail::get_u64(is);
    std::vector<std::size_t> shape(nd);
    for (auto& d : shape) d = static_cast<std::size_t>(detail::get_u64(is));
    Tensor t(shape);
    for (double& v : t.raw()) v = detail::get_f64(is);
    c.blocks.push_back(std::move(t));
  }
  if (!is) throw UsageError("truncated checkpoint: " + path);
  return c;
}

}  // namespace checkpoint
}  // namespace flowcast
