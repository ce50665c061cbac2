// Copyright Contributors to the nfsim Project
// SPDX-License-Identifier: Apache-2.0
//
// Little-endian binary tensor container: 4-byte magic, version, then a
// named-tensor directory (name, dtype, shape, byte offset, checksum) and a
// payload blob. Backs both model checkpoints and optimizer state.
#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "nfsim/core.hpp"
#include "nfsim/optim.hpp"
#include "nfsim/tensor.hpp"

namespace nfsim {

enum class TensorDType : uint8_t { kF64 = 0, kU64 = 1, kU8 = 2 };

struct NamedTensor {
  std::string name;
  TensorDType dtype = TensorDType::kF64;
  std::vector<uint64_t> dims;
  std::vector<uint8_t> bytes;

  uint64_t numel() const {
    uint64_t n = 1;
    for (auto d : dims) n *= d;
    return n;
  }

  static NamedTensor from_f64(const std::string& name, const std::vector<double>& v,
                              std::vector<uint64_t> dims) {
    NamedTensor t;
    t.name = name;
    t.dtype = TensorDType::kF64;
    t.dims = std::move(dims);
    t.bytes.resize(v.size() * 8);
    std::memcpy(t.bytes.data(), v.data(), t.bytes.size());
    return t;
  }

  static NamedTensor from_u64(const std::string& name, const std::vector<uint64_t>& v) {
    NamedTensor t;
    t.name = name;
    t.dtype = TensorDType::kU64;
    t.dims = {v.size()};
    t.bytes.resize(v.size() * 8);
    std::memcpy(t.bytes.data(), v.data(), t.bytes.size());
    return t;
  }

  static NamedTensor from_string(const std::string& name, const std::string& s) {
    NamedTensor t;
    t.name = name;
    t.dtype = TensorDType::kU8;
    t.dims = {s.size()};
    t.bytes.assign(s.begin(), s.end());
    return t;
  }

  std::vector<double> as_f64() const {
    ensure(dtype == TensorDType::kF64, "tensor '" + name + "': not f64");
    std::vector<double> v(bytes.size() / 8);
    std::memcpy(v.data(), bytes.data(), bytes.size());
    return v;
  }

  std::vector<uint64_t> as_u64() const {
    ensure(dtype == TensorDType::kU64, "tensor '" + name + "': not u64");
    std::vector<uint64_t> v(bytes.size() / 8);
    std::memcpy(v.data(), bytes.data(), bytes.size());
    return v;
  }

  std::string as_string() const {
    ensure(dtype == TensorDType::kU8, "tensor '" + name + "': not u8");
    return std::string(bytes.begin(), bytes.end());
  }
};

namespace detail {

constexpr char kMagic[4] = {'N', 'F', 'C', 'P'};
constexpr uint32_t kVersion = 1;

inline uint64_t fnv1a(const uint8_t* data, size_t n) {
  uint64_t h = 1469598103934665603ull;
  for (size_t i = 0; i < n; i++) {
    h ^= data[i];
    h *= 1099511628211ull;
  }
  return h;
}

template <typename T>
void put(std::string& out, T v) {
  char b[sizeof(T)];
  std::memcpy(b, &v, sizeof(T));
  out.append(b, sizeof(T));
}

template <typename T>
T take(const std::vector<uint8_t>& in, size_t& off) {
  ensure(off + sizeof(T) <= in.size(), "checkpoint: truncated header");
  T v;
  std::memcpy(&v, in.data() + off, sizeof(T));
  off += sizeof(T);
  return v;
}

}  // namespace detail

inline void write_tensor_file(const std::string& path, const std::vector<NamedTensor>& tensors) {
  std::string dir;
  dir.append(detail::kMagic, 4);
  detail::put<uint32_t>(dir, detail::kVersion);
  detail::put<uint64_t>(dir, tensors.size());
  uint64_t offset = 0;
  for (const auto& t : tensors) {
    detail::put<uint16_t>(dir, uint16_t(t.name.size()));
    dir.append(t.name);
    detail::put<uint8_t>(dir, uint8_t(t.dtype));
    detail::put<uint8_t>(dir, uint8_t(t.dims.size()));
    for (auto d : t.dims) detail::put<uint64_t>(dir, d);
    detail::put<uint64_t>(dir, offset);
    detail::put<uint64_t>(dir, t.bytes.size());
    detail::put<uint64_t>(dir, detail::fnv1a(t.bytes.data(), t.bytes.size()));
    offset += t.bytes.size();
  }
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  ensure(f.good(), "checkpoint: cannot open '" + path + "' for writing");
  f.write(dir.data(), std::streamsize(dir.size()));
  for (const auto& t : tensors)
    f.write(reinterpret_cast<const char*>(t.bytes.data()), std::streamsize(t.bytes.size()));
  ensure(f.good(), "checkpoint: write failed for '" + path + "'");
}

inline std::map<std::string, NamedTensor> read_tensor_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  ensure(f.good(), "checkpoint: cannot open '" + path + "'");
  std::vector<uint8_t> raw((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());

  size_t off = 0;
  ensure(raw.size() >= 16, "checkpoint: file too small");
  ensure(std::memcmp(raw.data(), detail::kMagic, 4) == 0, "checkpoint: bad magic");
  off = 4;
  uint32_t version = detail::take<uint32_t>(raw, off);
  ensure(version == detail::kVersion,
         "checkpoint: version mismatch (file " + std::to_string(version) + ", expected " +
             std::to_string(detail::kVersion) + ")");
  uint64_t count = detail::take<uint64_t>(raw, off);

  struct Entry {
    NamedTensor t;
    uint64_t offset;
    uint64_t nbytes;
    uint64_t checksum;
  };
  std::vector<Entry> entries;
  for (uint64_t i = 0; i < count; i++) {
    Entry e;
    uint16_t nl = detail::take<uint16_t>(raw, off);
    ensure(off + nl <= raw.size(), "checkpoint: truncated name");
    e.t.name.assign(raw.begin() + off, raw.begin() + off + nl);
    off += nl;
    e.t.dtype = TensorDType(detail::take<uint8_t>(raw, off));
    uint8_t rank = detail::take<uint8_t>(raw, off);
    for (int r = 0; r < rank; r++) e.t.dims.push_back(detail::take<uint64_t>(raw, off));
    e.offset = detail::take<uint64_t>(raw, off);
    e.nbytes = detail::take<uint64_t>(raw, off);
    e.checksum = detail::take<uint64_t>(raw, off);
    entries.push_back(std::move(e));
  }
  size_t payload_base = off;
  std::map<std::string, NamedTensor> out;
  for (auto& e : entries) {
    ensure(payload_base + e.offset + e.nbytes <= raw.size(),
           "checkpoint: payload truncated for tensor '" + e.t.name + "'");
    e.t.bytes.assign(raw.begin() + payload_base + e.offset,
                     raw.begin() + payload_base + e.offset + e.nbytes);
    ensure(detail::fnv1a(e.t.bytes.data(), e.t.bytes.size()) == e.checksum,
           "checkpoint: checksum mismatch for tensor '" + e.t.name + "'");
    out.emplace(e.t.name, std::move(e.t));
  }
  return out;
}

// ---- parameter-store level helpers -----------------------------------------

inline std::vector<NamedTensor> snapshot_params(const ad::ParamStore& store) {
  std::vector<NamedTensor> out;
  for (const auto& p : store.all())
    out.push_back(
        NamedTensor::from_f64("param/" + p->name, p->value, {uint64_t(p->rows), uint64_t(p->cols)}));
  return out;
}

inline void append_optimizer_state(std::vector<NamedTensor>& out, RAdam& opt) {
  out.push_back(NamedTensor::from_u64("opt/step", {uint64_t(opt.step_count())}));
  for (auto& mom : opt.moments()) {
    out.push_back(NamedTensor::from_f64("opt/m/" + mom.param->name, mom.m,
                                        {uint64_t(mom.param->rows), uint64_t(mom.param->cols)}));
    out.push_back(NamedTensor::from_f64("opt/v/" + mom.param->name, mom.v,
                                        {uint64_t(mom.param->rows), uint64_t(mom.param->cols)}));
  }
}

inline void restore_params(const std::map<std::string, NamedTensor>& tensors,
                           ad::ParamStore& store) {
  for (const auto& p : store.all()) {
    auto it = tensors.find("param/" + p->name);
    ensure(it != tensors.end(), "checkpoint: missing tensor 'param/" + p->name + "'");
    const auto& t = it->second;
    ensure(t.dims.size() == 2 && t.dims[0] == uint64_t(p->rows) && t.dims[1] == uint64_t(p->cols),
           "checkpoint: shape mismatch for '" + p->name + "' (file " +
               std::to_string(t.dims.empty() ? 0 : t.dims[0]) + "x" +
               std::to_string(t.dims.size() < 2 ? 0 : t.dims[1]) + ", graph " +
               std::to_string(p->rows) + "x" + std::to_string(p->cols) + ")");
    p->value = t.as_f64();
  }
}

inline void restore_optimizer_state(const std::map<std::string, NamedTensor>& tensors,
                                    RAdam& opt) {
  auto it = tensors.find("opt/step");
  ensure(it != tensors.end(), "checkpoint: missing tensor 'opt/step'");
  opt.set_step_count(int64_t(it->second.as_u64().at(0)));
  for (auto& mom : opt.moments()) {
    auto mit = tensors.find("opt/m/" + mom.param->name);
    auto vit = tensors.find("opt/v/" + mom.param->name);
    ensure(mit != tensors.end() && vit != tensors.end(),
           "checkpoint: missing optimizer state for '" + mom.param->name + "'");
    mom.m = mit->second.as_f64();
    mom.v = vit->second.as_f64();
    ensure(mom.m.size() == mom.param->value.size() && mom.v.size() == mom.param->value.size(),
           "checkpoint: optimizer state size mismatch for '" + mom.param->name + "'");
  }
}

}  // namespace nfsim
