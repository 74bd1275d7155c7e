// Copyright (c) 2026 The t3d Authors
// SPDX-License-Identifier: Apache-2.0
//
// Single-file checkpoint container. See docs/checkpoint-format.md for the layout.

#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "t3d/error.hpp"
#include "t3d/tensor.hpp"
#include "t3d/volume.hpp"

namespace t3d {

static_assert(std::endian::native == std::endian::little, "checkpoint payloads are written in host order");

inline constexpr char kCheckpointMagic[4] = {'T', '3', 'D', 'C'};
inline constexpr std::uint16_t kCheckpointVersion = 1;

struct CheckpointData {
  nlohmann::json meta = nlohmann::json::object();  // config, fingerprint, counters, generator state
  std::vector<std::pair<std::string, Tensor<float>>> tensors;

  const Tensor<float>& tensor(const std::string& name) const {
    for (const auto& [n, t] : tensors)
      if (n == name) return t;
    fail(Errc::format, "checkpoint has no tensor '" + name + "'");
  }
};

namespace detail {

template <class U>
void put_le(std::string& out, U v) {
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

template <class U>
U get_le(const std::string& in, std::size_t pos) {
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i)
    v |= static_cast<U>(static_cast<unsigned char>(in[pos + i])) << (8 * i);
  return v;
}

}  // namespace detail

inline std::string serialize_checkpoint(const CheckpointData& ck) {
  nlohmann::json header = ck.meta;
  nlohmann::json list = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& [name, t] : ck.tensors) {
    const std::uint64_t nbytes = t.numel() * sizeof(float);
    list.push_back({{"name", name}, {"dtype", "f32"}, {"shape", t.shape}, {"offset", offset}, {"nbytes", nbytes}});
    offset += nbytes;
  }
  header["tensors"] = list;
  const std::string text = header.dump();

  std::string out(kCheckpointMagic, 4);
  detail::put_le<std::uint16_t>(out, kCheckpointVersion);
  detail::put_le<std::uint16_t>(out, 0);
  detail::put_le<std::uint64_t>(out, text.size());
  out += text;
  const std::size_t base = out.size();
  out.resize(base + offset);
  std::size_t pos = base;
  for (const auto& [name, t] : ck.tensors) {
    std::memcpy(out.data() + pos, t.data.data(), t.numel() * sizeof(float));
    pos += t.numel() * sizeof(float);
  }
  return out;
}

inline CheckpointData deserialize_checkpoint(const std::string& bytes) {
  require(bytes.size() >= 16, Errc::format, "checkpoint header: file too short");
  require(std::memcmp(bytes.data(), kCheckpointMagic, 4) == 0, Errc::format, "checkpoint magic: not a checkpoint");
  const auto version = detail::get_le<std::uint16_t>(bytes, 4);
  require(version == kCheckpointVersion, Errc::format, "checkpoint version: unsupported " + std::to_string(version));
  const auto header_len = detail::get_le<std::uint64_t>(bytes, 8);
  require(header_len <= bytes.size() - 16, Errc::format, "checkpoint header: truncated");
  CheckpointData ck;
  try {
    ck.meta = nlohmann::json::parse(bytes.substr(16, header_len));
  } catch (const nlohmann::json::exception& e) {
    fail(Errc::format, std::string("checkpoint header: ") + e.what());
  }
  const std::size_t base = 16 + header_len;
  require(ck.meta.contains("tensors") && ck.meta["tensors"].is_array(), Errc::format, "checkpoint tensors: missing");
  try {
    for (const auto& e : ck.meta["tensors"]) {
      require(e.at("dtype").get<std::string>() == "f32", Errc::format, "checkpoint dtype: only f32 is supported");
      const auto name = e.at("name").get<std::string>();
      Shape shape = e.at("shape").get<Shape>();
      const auto off = e.at("offset").get<std::uint64_t>();
      const auto nbytes = e.at("nbytes").get<std::uint64_t>();
      require(nbytes == numel_of(shape) * sizeof(float), Errc::format, "checkpoint tensor '" + name + "': size mismatch");
      require(base + off + nbytes <= bytes.size(), Errc::format, "checkpoint tensor '" + name + "': truncated payload");
      Tensor<float> t(shape);
      std::memcpy(t.data.data(), bytes.data() + base + off, nbytes);
      ck.tensors.emplace_back(name, std::move(t));
    }
  } catch (const nlohmann::json::exception& e) {
    fail(Errc::format, std::string("checkpoint tensors: ") + e.what());
  }
  ck.meta.erase("tensors");
  return ck;
}

inline void write_checkpoint(const CheckpointData& ck, const std::filesystem::path& path) {
  detail::write_file_atomic(path, serialize_checkpoint(ck));
}

inline CheckpointData read_checkpoint(const std::filesystem::path& path) {
  return deserialize_checkpoint(detail::read_file(path));
}

}  // namespace t3d
