// Copyright 2026 the ftvp authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "ftvp/tensor.hpp"

namespace ftvp {

// Flat little-endian tensor record: magic "TNSR", u32 rank, u32 dims, f32
// payload. Checkpoint: magic "FTVPCKPT", u32 version, u64 config digest,
// u32 record count, then (u32 name length, name bytes, TNSR record) each.

struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

namespace detail {

inline void write_u32(std::ostream& os, uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

inline void write_u64(std::ostream& os, uint64_t v) {
  write_u32(os, static_cast<uint32_t>(v));
  write_u32(os, static_cast<uint32_t>(v >> 32));
}

inline uint32_t read_u32(std::istream& is) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) throw IoError("truncated stream");
  return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
         (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
}

inline uint64_t read_u64(std::istream& is) {
  const uint64_t lo = read_u32(is);
  const uint64_t hi = read_u32(is);
  return lo | (hi << 32);
}

inline void write_f32(std::ostream& os, float v) {
  uint32_t u;
  std::memcpy(&u, &v, 4);
  write_u32(os, u);
}

inline float read_f32(std::istream& is) {
  const uint32_t u = read_u32(is);
  float v;
  std::memcpy(&v, &u, 4);
  return v;
}

}  // namespace detail

template <class T>
void write_tensor(std::ostream& os, const TensorData<T>& t) {
  os.write("TNSR", 4);
  detail::write_u32(os, static_cast<uint32_t>(t.shape.size()));
  for (int d : t.shape) detail::write_u32(os, static_cast<uint32_t>(d));
  for (T v : t.values) detail::write_f32(os, static_cast<float>(v));
}

template <class T>
TensorPtr<T> read_tensor(std::istream& is) {
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, "TNSR", 4) != 0)
    throw IoError("bad tensor magic");
  const uint32_t rank = detail::read_u32(is);
  if (rank > 8) throw IoError("implausible tensor rank");
  std::vector<int> shape(rank);
  for (auto& d : shape) d = static_cast<int>(detail::read_u32(is));
  auto t = make_tensor<T>(shape);
  for (auto& v : t->values) v = static_cast<T>(detail::read_f32(is));
  return t;
}

/// Uniquely named learnable tensors; std::map keeps iteration deterministic.
template <class T>
using ParamStore = std::map<std::string, TensorPtr<T>>;

inline uint64_t fnv1a(const std::string& s) {
  uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

constexpr uint32_t kCheckpointVersion = 1;

template <class T>
void save_checkpoint(const std::string& path, const ParamStore<T>& params,
                     uint64_t config_digest) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open for writing: " + path);
  os.write("FTVPCKPT", 8);
  detail::write_u32(os, kCheckpointVersion);
  detail::write_u64(os, config_digest);
  detail::write_u32(os, static_cast<uint32_t>(params.size()));
  for (const auto& [name, tensor] : params) {
    detail::write_u32(os, static_cast<uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_tensor(os, *tensor);
  }
  if (!os) throw IoError("write failure: " + path);
}

template <class T>
ParamStore<T> load_checkpoint(const std::string& path, uint64_t* config_digest = nullptr) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open: " + path);
  char magic[8];
  if (!is.read(magic, 8) || std::memcmp(magic, "FTVPCKPT", 8) != 0)
    throw IoError("bad checkpoint magic in " + path);
  const uint32_t version = detail::read_u32(is);
  if (version != kCheckpointVersion)
    throw IoError("unsupported checkpoint version " + std::to_string(version));
  const uint64_t digest = detail::read_u64(is);
  if (config_digest) *config_digest = digest;
  const uint32_t count = detail::read_u32(is);
  ParamStore<T> params;
  for (uint32_t i = 0; i < count; ++i) {
    const uint32_t len = detail::read_u32(is);
    std::string name(len, '\0');
    if (!is.read(name.data(), len)) throw IoError("truncated checkpoint " + path);
    params[name] = read_tensor<T>(is);
  }
  return params;
}

}  // namespace ftvp
