#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include "json.hpp"

#include "corrosion/error.hpp"
#include "corrosion/image_io.hpp"
#include "corrosion/model.hpp"

namespace corrosion::model {

// Layout: 8-byte magic, u32 version, u64 header length, JSON header, then
// every tensor's values back to back in header order (little-endian IEEE).
inline constexpr char kCheckpointMagic[8] = {'C', 'R', 'S', 'N', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

inline nlohmann::json arch_to_json(const ArchConfig& a) {
  return {{"input_channels", a.input_channels}, {"stem_channels", a.stem_channels},
          {"stage_channels", a.stage_channels}, {"blocks_per_stage", a.blocks_per_stage},
          {"num_classes", a.num_classes},       {"input_size", a.input_size},
          {"norm", "batch_norm"}};
}

inline ArchConfig arch_from_json(const nlohmann::json& j) {
  ArchConfig a;
  a.input_channels = j.at("input_channels").get<int>();
  a.stem_channels = j.at("stem_channels").get<int>();
  a.stage_channels = j.at("stage_channels").get<std::vector<int>>();
  a.blocks_per_stage = j.at("blocks_per_stage").get<int>();
  a.num_classes = j.at("num_classes").get<int>();
  a.input_size = j.at("input_size").get<int>();
  return a;
}

namespace detail {

template <typename U>
void append_raw(std::vector<std::uint8_t>& out, const U& v) {
  const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
  out.insert(out.end(), p, p + sizeof(U));
}

template <typename U>
U read_raw(std::span<const std::uint8_t> in, std::size_t& pos) {
  if (pos + sizeof(U) > in.size()) fail(ErrorCode::BadCheckpoint, "checkpoint truncated");
  U v;
  std::memcpy(&v, in.data() + pos, sizeof(U));
  pos += sizeof(U);
  return v;
}

}  // namespace detail

template <typename T>
std::vector<std::uint8_t> serialize_checkpoint(const ModelParams<T>& p) {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
  nlohmann::json header;
  header["format"] = "corrosion-resnet-checkpoint";
  header["version"] = kCheckpointVersion;
  header["dtype"] = std::is_same_v<T, float> ? "float32" : "float64";
  header["arch"] = arch_to_json(p.arch);
  header["input_stats"] = {{"mean", p.input_stats.mean}, {"std", p.input_stats.stddev}};
  header["groups"] = p.group_names;
  auto& tensors = header["tensors"] = nlohmann::json::array();
  for (const auto& t : p.tensors)
    tensors.push_back({{"name", t.name}, {"shape", t.shape}, {"group", t.group}, {"trainable", t.trainable}});
  const std::string text = header.dump();

  std::vector<std::uint8_t> out(kCheckpointMagic, kCheckpointMagic + 8);
  detail::append_raw(out, kCheckpointVersion);
  detail::append_raw(out, static_cast<std::uint64_t>(text.size()));
  out.insert(out.end(), text.begin(), text.end());
  for (const auto& t : p.tensors) {
    const auto* bytes = reinterpret_cast<const std::uint8_t*>(t.values.data());
    out.insert(out.end(), bytes, bytes + t.values.size() * sizeof(T));
  }
  return out;
}

template <typename T>
ModelParams<T> deserialize_checkpoint(std::span<const std::uint8_t> in) {
  if (in.size() < 20 || std::memcmp(in.data(), kCheckpointMagic, 8) != 0)
    fail(ErrorCode::BadCheckpoint, "not a model checkpoint");
  std::size_t pos = 8;
  const auto version = detail::read_raw<std::uint32_t>(in, pos);
  if (version != kCheckpointVersion) fail(ErrorCode::BadCheckpoint, "unsupported checkpoint version");
  const auto len = detail::read_raw<std::uint64_t>(in, pos);
  if (pos + len > in.size()) fail(ErrorCode::BadCheckpoint, "checkpoint truncated");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(in.begin() + static_cast<std::ptrdiff_t>(pos),
                                   in.begin() + static_cast<std::ptrdiff_t>(pos + len));
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::BadCheckpoint, e.what());
  }
  pos += len;

  ModelParams<T> p;
  try {
    const bool f32 = header.at("dtype").get<std::string>() == "float32";
    p.arch = arch_from_json(header.at("arch"));
    p.input_stats.mean = header.at("input_stats").at("mean").get<std::array<double, 3>>();
    p.input_stats.stddev = header.at("input_stats").at("std").get<std::array<double, 3>>();
    p.group_names = header.at("groups").get<std::vector<std::string>>();
    for (const auto& jt : header.at("tensors")) {
      ParamTensor<T> t;
      t.name = jt.at("name").get<std::string>();
      t.shape = jt.at("shape").get<std::vector<int>>();
      t.group = jt.at("group").get<int>();
      t.trainable = jt.at("trainable").get<bool>();
      std::size_t n = 1;
      for (int d : t.shape) n *= static_cast<std::size_t>(d);
      t.values.resize(n);
      for (std::size_t k = 0; k < n; ++k)
        t.values[k] = f32 ? static_cast<T>(detail::read_raw<float>(in, pos)) : static_cast<T>(detail::read_raw<double>(in, pos));
      p.tensors.push_back(std::move(t));
    }
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::BadCheckpoint, e.what());
  }
  if (pos != in.size()) fail(ErrorCode::BadCheckpoint, "trailing bytes in checkpoint");

  // tensors must match the layout the architecture implies
  const ModelParams<T> fresh = init_model<T>(p.arch, 0);
  if (fresh.tensors.size() != p.tensors.size()) fail(ErrorCode::BadCheckpoint, "tensor count mismatch");
  for (std::size_t i = 0; i < p.tensors.size(); ++i) {
    if (fresh.tensors[i].name != p.tensors[i].name || fresh.tensors[i].shape != p.tensors[i].shape)
      fail(ErrorCode::BadCheckpoint, "tensor " + p.tensors[i].name + " does not match the architecture");
  }
  return p;
}

template <typename T>
void save_checkpoint(const ModelParams<T>& p, const std::filesystem::path& path) {
  write_file_bytes(path, serialize_checkpoint(p));
}

template <typename T = float>
ModelParams<T> load_checkpoint(const std::filesystem::path& path) {
  std::vector<std::uint8_t> bytes;
  try {
    bytes = read_file_bytes(path);
  } catch (const Error&) {
    fail(ErrorCode::BadCheckpoint, "cannot read checkpoint " + path.string());
  }
  return deserialize_checkpoint<T>(bytes);
}

}  // namespace corrosion::model
