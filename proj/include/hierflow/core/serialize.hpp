// Copyright (c) 2026 The hierflow Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "hierflow/core/layers.hpp"

namespace hierflow::nn {

// Flat (name, shape, values) container: 4-byte magic, version byte, entry
// count, then length-prefixed entries. All integers and doubles are encoded
// little-endian regardless of host order.

namespace detail {

constexpr char kMagic[4] = {'H', 'F', 'L', 'W'};
constexpr std::uint8_t kVersion = 1;

inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline void put_u16(std::string& out, std::uint16_t v) {
  out.push_back(static_cast<char>(v & 0xff));
  out.push_back(static_cast<char>((v >> 8) & 0xff));
}
inline void put_f64(std::string& out, double d) {
  put_u64(out, std::bit_cast<std::uint64_t>(d));
}

struct Reader {
  const std::string& buf;
  std::size_t pos = 0;

  void need(std::size_t n) const {
    if (pos + n > buf.size())
      throw std::runtime_error("checkpoint: truncated file");
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i)
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf[pos + i])) << (8 * i);
    pos += 8;
    return v;
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i)
      v |= static_cast<std::uint32_t>(static_cast<unsigned char>(buf[pos + i])) << (8 * i);
    pos += 4;
    return v;
  }
  std::uint16_t u16() {
    need(2);
    std::uint16_t v = static_cast<unsigned char>(buf[pos]);
    v = static_cast<std::uint16_t>(v | (static_cast<unsigned char>(buf[pos + 1]) << 8));
    pos += 2;
    return v;
  }
  std::uint8_t u8() {
    need(1);
    return static_cast<unsigned char>(buf[pos++]);
  }
  double f64() { return std::bit_cast<double>(u64()); }
  std::string str(std::size_t n) {
    need(n);
    std::string s = buf.substr(pos, n);
    pos += n;
    return s;
  }
};

}  // namespace detail

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

inline void save_tensors(const std::string& path, const NamedTensors& entries) {
  std::string out;
  out.append(detail::kMagic, 4);
  out.push_back(static_cast<char>(detail::kVersion));
  detail::put_u32(out, static_cast<std::uint32_t>(entries.size()));
  for (const auto& [name, t] : entries) {
    std::string body;
    detail::put_u16(body, static_cast<std::uint16_t>(name.size()));
    body += name;
    body.push_back(static_cast<char>(t.shape().size()));
    for (std::size_t d : t.shape()) detail::put_u64(body, d);
    detail::put_u64(body, t.size());
    for (double v : t.vec()) detail::put_f64(body, v);
    detail::put_u32(out, static_cast<std::uint32_t>(body.size()));
    out += body;
  }
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("checkpoint: cannot open for write: " + path);
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw std::runtime_error("checkpoint: write failed: " + path);
}

inline std::unordered_map<std::string, Tensor> load_tensors(
    const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("checkpoint: cannot open: " + path);
  std::string buf((std::istreambuf_iterator<char>(f)),
                  std::istreambuf_iterator<char>());
  detail::Reader r{buf};
  if (r.str(4) != std::string(detail::kMagic, 4))
    throw std::runtime_error("checkpoint: bad magic in " + path);
  if (r.u8() != detail::kVersion)
    throw std::runtime_error("checkpoint: unsupported version in " + path);
  const std::uint32_t count = r.u32();
  std::unordered_map<std::string, Tensor> out;
  for (std::uint32_t e = 0; e < count; ++e) {
    const std::uint32_t entry_len = r.u32();
    const std::size_t entry_end = r.pos + entry_len;
    const std::uint16_t name_len = r.u16();
    const std::string name = r.str(name_len);
    const std::uint8_t ndim = r.u8();
    std::vector<std::size_t> shape(ndim);
    for (auto& d : shape) d = static_cast<std::size_t>(r.u64());
    const std::uint64_t n = r.u64();
    Tensor t{shape.empty() ? std::vector<std::size_t>{1, 1} : shape};
    if (t.size() != n)
      throw std::runtime_error("checkpoint: element count mismatch for " + name);
    for (std::uint64_t i = 0; i < n; ++i) t[i] = r.f64();
    if (r.pos != entry_end)
      throw std::runtime_error("checkpoint: entry length mismatch for " + name);
    out.emplace(name, std::move(t));
  }
  return out;
}

inline void save_params(const std::string& path, const ParamList& params,
                        const NamedTensors& extra = {}) {
  NamedTensors entries;
  entries.reserve(params.size() + extra.size());
  for (const Parameter* p : params) entries.emplace_back(p->name, p->value);
  for (const auto& e : extra) entries.push_back(e);
  save_tensors(path, entries);
}

inline void load_params(const std::unordered_map<std::string, Tensor>& entries,
                        const ParamList& params) {
  for (Parameter* p : params) {
    auto it = entries.find(p->name);
    if (it == entries.end())
      throw std::runtime_error("checkpoint: missing parameter " + p->name);
    check(it->second.same_shape(p->value),
          "checkpoint: shape mismatch for " + p->name);
    p->value = it->second;
    p->zero_grad();
  }
}

}  // namespace hierflow::nn
