#pragma once

// Checkpoint layout:
//   8 bytes   magic "MRCKPT\0\1"
//   4 bytes   header length L (little-endian uint32)
//   L bytes   JSON header {format_version, config, tensors:[{name,count}], metadata}
//   ...       every tensor in declared order as little-endian IEEE-754 binary32

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "matchrec/error.hpp"
#include "matchrec/model.hpp"
#include "matchrec/util.hpp"

namespace matchrec {

inline constexpr int kCheckpointFormatVersion = 1;
inline constexpr std::array<char, 8> kCheckpointMagic{'M', 'R', 'C', 'K', 'P', 'T', '\0', '\1'};

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

inline std::uint32_t get_u32(const std::string& in, std::size_t pos) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i)
    v |= static_cast<std::uint32_t>(static_cast<unsigned char>(in[pos + i])) << (8 * i);
  return v;
}

}  // namespace detail

struct Checkpoint {
  CnnRegressor<double> model;  // f32-exact values
  nlohmann::ordered_json metadata = nlohmann::ordered_json::object();
};

template <typename T>
std::string serialize_checkpoint(const CnnRegressor<T>& model,
                                 const nlohmann::ordered_json& metadata = nlohmann::ordered_json::object()) {
  nlohmann::ordered_json header;
  header["format_version"] = kCheckpointFormatVersion;
  header["config"] = model.config.to_json();
  auto tensors = nlohmann::ordered_json::array();
  for_each_tensor(
      model,
      [&](const std::string& name, auto span) {
        tensors.push_back({{"name", name}, {"count", span.size()}});
      },
      true);
  header["tensors"] = tensors;
  header["metadata"] = metadata;
  const std::string h = header.dump();

  std::string out(kCheckpointMagic.begin(), kCheckpointMagic.end());
  detail::put_u32(out, static_cast<std::uint32_t>(h.size()));
  out += h;
  for_each_tensor(
      model,
      [&](const std::string& name, auto span) {
        for (auto v : span) {
          const float f = static_cast<float>(v);
          if (!std::isfinite(f)) throw ModelError("non-finite value in tensor " + name);
          detail::put_u32(out, std::bit_cast<std::uint32_t>(f));
        }
      },
      true);
  return out;
}

inline Checkpoint parse_checkpoint(const std::string& bytes) {
  if (bytes.size() < 12 || !std::equal(kCheckpointMagic.begin(), kCheckpointMagic.end(), bytes.begin()))
    throw ModelError("not a matchrec checkpoint (bad magic)");
  const std::uint32_t hlen = detail::get_u32(bytes, 8);
  if (bytes.size() < 12 + static_cast<std::size_t>(hlen)) throw ModelError("truncated checkpoint header");
  auto header = nlohmann::ordered_json::parse(bytes.substr(12, hlen), nullptr, false);
  if (header.is_discarded() || !header.is_object()) throw ModelError("corrupt checkpoint header");
  if (header.value("format_version", -1) != kCheckpointFormatVersion)
    throw ModelError("unsupported checkpoint format_version");

  Checkpoint ck;
  ModelConfig cfg;
  try {
    cfg = ModelConfig::from_json(header.at("config"));
  } catch (const std::exception& e) {
    throw ModelError(std::string("checkpoint config: ") + e.what());
  }
  ck.model = zero_model<double>(cfg);
  if (header.contains("metadata")) ck.metadata = header["metadata"];

  const auto& listed = header.at("tensors");
  std::size_t pos = 12 + hlen, k = 0;
  for_each_tensor(
      ck.model,
      [&](const std::string& name, std::span<double> span) {
        if (k >= listed.size() || listed[k].at("name") != name ||
            listed[k].at("count").get<std::size_t>() != span.size())
          throw ModelError("checkpoint tensor list does not match config at " + name);
        ++k;
        if (bytes.size() < pos + 4 * span.size()) throw ModelError("truncated tensor " + name);
        for (auto& v : span) {
          v = std::bit_cast<float>(detail::get_u32(bytes, pos));
          pos += 4;
        }
      },
      true);
  if (k != listed.size() || pos != bytes.size()) throw ModelError("trailing data in checkpoint");
  return ck;
}

template <typename T>
void save_checkpoint(const std::filesystem::path& path, const CnnRegressor<T>& model,
                     const nlohmann::ordered_json& metadata = nlohmann::ordered_json::object()) {
  write_file_atomic(path, serialize_checkpoint(model, metadata));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  return parse_checkpoint(read_file(path));
}

}  // namespace matchrec
