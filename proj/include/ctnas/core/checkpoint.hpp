#pragma once

// Weight checkpoint container.
//
// Byte layout (all integers little-endian):
//
//   offset 0   8 bytes   magic "CTNASCK1"
//   offset 8   u64       header length H in bytes
//   offset 16  H bytes   UTF-8 JSON header
//   offset 16+H          data region
//
// The header is
//   {"format": "ctnas-checkpoint", "version": 1,
//    "tensors": {"<name>": {"shape": [..], "dtype": "f32",
//                           "offset": <byte offset into data region>,
//                           "length": <byte count>}}}
// Each tensor is stored row-major as consecutive little-endian IEEE-754
// binary32 values. Tensors are laid out in the order they were written, with
// no padding between them.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <nlohmann/json.hpp>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "ctnas/core/tensor.hpp"

namespace ctnas {

template <typename T>
using NamedTensors = std::vector<std::pair<std::string, Tensor<T>>>;

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct CheckpointEntry {
  Shape shape;
  std::vector<float> values;
};

namespace detail {

inline constexpr char kCheckpointMagic[8] = {'C', 'T', 'N', 'A', 'S', 'C', 'K', '1'};

inline void put_u64_le(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

inline std::uint64_t get_u64_le(const unsigned char* p) {
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | p[i];
  return v;
}

inline void put_f32_le(std::string& out, float f) {
  const auto bits = std::bit_cast<std::uint32_t>(f);
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xFF));
}

inline float get_f32_le(const unsigned char* p) {
  std::uint32_t bits = 0;
  for (int i = 3; i >= 0; --i) bits = (bits << 8) | p[i];
  return std::bit_cast<float>(bits);
}

}  // namespace detail

template <typename T>
std::string encode_checkpoint(const NamedTensors<T>& tensors) {
  nlohmann::ordered_json entries = nlohmann::ordered_json::object();
  std::string blob;
  for (const auto& [name, t] : tensors) {
    if (entries.contains(name)) throw CheckpointError("duplicate tensor name '" + name + "'");
    const std::size_t offset = blob.size();
    for (T v : t.values()) detail::put_f32_le(blob, static_cast<float>(v));
    entries[name] = {{"shape", t.shape()},
                     {"dtype", "f32"},
                     {"offset", offset},
                     {"length", blob.size() - offset}};
  }
  nlohmann::ordered_json header = {{"format", "ctnas-checkpoint"}, {"version", 1}, {"tensors", entries}};
  const std::string hs = header.dump();
  std::string out(detail::kCheckpointMagic, 8);
  detail::put_u64_le(out, hs.size());
  out += hs;
  out += blob;
  return out;
}

inline std::map<std::string, CheckpointEntry> decode_checkpoint(const std::string& bytes) {
  if (bytes.size() < 16 || std::memcmp(bytes.data(), detail::kCheckpointMagic, 8) != 0) {
    throw CheckpointError("not a ctnas checkpoint (bad magic)");
  }
  const auto* raw = reinterpret_cast<const unsigned char*>(bytes.data());
  const std::uint64_t hlen = detail::get_u64_le(raw + 8);
  if (hlen > bytes.size() - 16) throw CheckpointError("header length exceeds file size");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.substr(16, hlen));
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("malformed checkpoint header: ") + e.what());
  }
  if (header.value("format", "") != "ctnas-checkpoint") throw CheckpointError("unexpected format tag");
  const std::size_t data_start = 16 + hlen;
  const std::size_t data_len = bytes.size() - data_start;
  std::map<std::string, CheckpointEntry> out;
  for (const auto& [name, e] : header.at("tensors").items()) {
    if (e.value("dtype", "") != "f32") throw CheckpointError("tensor '" + name + "': unsupported dtype");
    CheckpointEntry entry;
    entry.shape = e.at("shape").get<Shape>();
    const auto offset = e.at("offset").get<std::size_t>();
    const auto length = e.at("length").get<std::size_t>();
    const auto n = static_cast<std::size_t>(numel_of(entry.shape));
    if (length != 4 * n || offset > data_len || length > data_len - offset) {
      throw CheckpointError("tensor '" + name + "': byte range inconsistent with shape");
    }
    entry.values.resize(n);
    for (std::size_t i = 0; i < n; ++i) entry.values[i] = detail::get_f32_le(raw + data_start + offset + 4 * i);
    out.emplace(name, std::move(entry));
  }
  return out;
}

template <typename T>
void save_checkpoint(const std::string& path, const NamedTensors<T>& tensors) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw CheckpointError("cannot open '" + path + "' for writing");
  const std::string bytes = encode_checkpoint(tensors);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

inline std::map<std::string, CheckpointEntry> load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw CheckpointError("cannot open '" + path + "'");
  std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

// Copies stored values into existing tensors by name. Every target must be
// present with a matching shape.
template <typename T>
void restore(const std::map<std::string, CheckpointEntry>& stored, NamedTensors<T>& targets) {
  for (auto& [name, t] : targets) {
    auto it = stored.find(name);
    if (it == stored.end()) throw CheckpointError("checkpoint is missing tensor '" + name + "'");
    if (it->second.shape != t.shape()) {
      throw CheckpointError("tensor '" + name + "': stored shape " + shape_str(it->second.shape) +
                            " vs expected " + shape_str(t.shape()));
    }
    auto dst = t.data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<T>(it->second.values[i]);
  }
}

}  // namespace ctnas
