#pragma once

/**
 * Weight file ("AGDW") reader and writer.
 *
 * Layout:
 *   "AGDW" | u32 LE version | u64 LE header length | UTF-8 JSON header | payload
 *
 * The header is {"config": {...}, "tensors": [{"name", "shape", "offset"}]}.
 * The payload holds every tensor as little-endian float32, row-major, tightly
 * packed in header order; offsets are bytes from the start of the payload.
 */

#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "json.hpp"

#include "agd/config.hpp"
#include "agd/error.hpp"
#include "agd/model.hpp"

namespace agd {

inline constexpr std::array<char, 4> kWeightMagic{'A', 'G', 'D', 'W'};
inline constexpr std::uint32_t kWeightVersion = 1;

namespace detail {

inline void put_le32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}
inline void put_le64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}
inline std::uint64_t get_le(const unsigned char* p, int n) {
  std::uint64_t v = 0;
  for (int i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return v;
}

}  // namespace detail

/// Serialises to the in-memory file image. Values are rounded to float32.
template <typename T>
std::string encode_model(const Model<T>& model) {
  nlohmann::ordered_json header;
  header["config"] = model.config;
  header["tensors"] = nlohmann::ordered_json::array();
  std::uint64_t offset = 0;
  model.for_each_tensor([&](const std::string& name, const Tensor<T>& t) {
    header["tensors"].push_back({{"name", name}, {"shape", t.shape}, {"offset", offset}});
    offset += t.size() * sizeof(float);
  });
  const std::string hdr = header.dump();

  std::string out(kWeightMagic.begin(), kWeightMagic.end());
  detail::put_le32(out, kWeightVersion);
  detail::put_le64(out, hdr.size());
  out += hdr;
  out.reserve(out.size() + offset);
  model.for_each_tensor([&](const std::string&, const Tensor<T>& t) {
    for (T v : t.data) detail::put_le32(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
  });
  return out;
}

template <typename T>
void save_model(const Model<T>& model, const std::filesystem::path& path) {
  const std::string bytes = encode_model(model);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open '" + path.string() + "' for writing");
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  f.flush();
  if (!f) throw IoError("write failed for '" + path.string() + "'");
}

template <typename T>
Model<T> decode_model(const std::string& bytes) {
  using C = FormatError::Code;
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  if (bytes.size() < 4 || std::memcmp(p, kWeightMagic.data(), 4) != 0)
    throw FormatError(C::bad_magic, "weight file: bad magic (expected \"AGDW\")");
  if (bytes.size() < 16) throw FormatError(C::truncated, "weight file: truncated preamble");
  const auto version = static_cast<std::uint32_t>(detail::get_le(p + 4, 4));
  if (version != kWeightVersion)
    throw FormatError(C::version_mismatch, "weight file: unsupported version " + std::to_string(version));
  const std::uint64_t hlen = detail::get_le(p + 8, 8);
  if (hlen > bytes.size() - 16) throw FormatError(C::truncated, "weight file: truncated header");

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.begin() + 16, bytes.begin() + 16 + static_cast<std::ptrdiff_t>(hlen));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(C::bad_header, std::string("weight file: header is not JSON: ") + e.what());
  }
  if (!header.is_object() || !header.contains("config") || !header.contains("tensors") ||
      !header["tensors"].is_array())
    throw FormatError(C::bad_header, "weight file: header needs 'config' and 'tensors'");

  const ModelConfig cfg = config_from_json(header["config"]);  // ConfigError on invariant violations
  Model<T> model = Model<T>::zeros(cfg);

  const auto& entries = header["tensors"];
  const std::size_t payload_start = 16 + hlen;
  const std::size_t payload_size = bytes.size() - payload_start;
  std::size_t idx = 0;
  std::uint64_t expected_offset = 0;
  model.for_each_tensor([&](const std::string& name, Tensor<T>& t) {
    if (idx >= entries.size())
      throw FormatError(C::shape_mismatch, "weight file: missing tensor '" + name + "'");
    const auto& e = entries[idx++];
    std::vector<std::size_t> shape;
    std::uint64_t offset = 0;
    try {
      if (e.at("name").get<std::string>() != name)
        throw FormatError(C::shape_mismatch, "weight file: expected tensor '" + name + "', found '" +
                                                 e.at("name").get<std::string>() + "'");
      shape = e.at("shape").get<std::vector<std::size_t>>();
      offset = e.at("offset").get<std::uint64_t>();
    } catch (const nlohmann::json::exception& ex) {
      throw FormatError(C::bad_header, std::string("weight file: bad tensor entry: ") + ex.what());
    }
    if (shape != t.shape)
      throw FormatError(C::shape_mismatch, "weight file: tensor '" + name + "' has the wrong shape");
    if (offset != expected_offset)
      throw FormatError(C::bad_header, "weight file: tensor '" + name + "' is not tightly packed");
    const std::uint64_t nbytes = t.size() * sizeof(float);
    if (offset + nbytes > payload_size)
      throw FormatError(C::truncated, "weight file: payload truncated in tensor '" + name + "'");
    const unsigned char* src = p + payload_start + offset;
    for (std::size_t i = 0; i < t.size(); ++i) {
      const float v = std::bit_cast<float>(static_cast<std::uint32_t>(detail::get_le(src + 4 * i, 4)));
      if (!std::isfinite(v))
        throw FormatError(C::non_finite, "weight file: non-finite value in tensor '" + name + "'");
      t.data[i] = static_cast<T>(v);
    }
    expected_offset += nbytes;
  });
  if (idx != entries.size()) throw FormatError(C::shape_mismatch, "weight file: unexpected extra tensors");
  return model;
}

template <typename T>
Model<T> load_model(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open weight file '" + path.string() + "'");
  const std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return decode_model<T>(bytes);
}

}  // namespace agd
