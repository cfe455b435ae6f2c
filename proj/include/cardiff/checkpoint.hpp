#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "cardiff/param_store.hpp"

// Binary container: "CDFK", u32 LE format version, u64 LE header length,
// UTF-8 JSON header, then contiguous f32 LE blobs described by the header.

namespace cardiff::ckpt {

inline constexpr char kMagic[4] = {'C', 'D', 'F', 'K'};
inline constexpr std::uint32_t kFormatVersion = 1;

/// Parameters (with Adam moments and step counts) plus free-form metadata.
struct Checkpoint {
  nlohmann::json meta = nlohmann::json::object();
  ParamStore<float> params;

  /// Throws missing_group unless some parameter starts with prefix.
  void require_group(const std::string& prefix) const {
    for (const auto& [name, _] : params.entries())
      if (name.rfind(prefix, 0) == 0) return;
    throw Error(Errc::missing_group, "checkpoint has no parameter group '" + prefix + "'");
  }
};

namespace detail {

template <class U>
void put_le(std::string& out, U v) {
  unsigned char b[sizeof(U)];
  for (std::size_t i = 0; i < sizeof(U); ++i) b[i] = static_cast<unsigned char>((std::uint64_t(v) >> (8 * i)) & 0xFF);
  out.append(reinterpret_cast<const char*>(b), sizeof(U));
}

template <class U>
U get_le(const std::string& in, std::size_t off) {
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= std::uint64_t(static_cast<unsigned char>(in[off + i])) << (8 * i);
  return static_cast<U>(v);
}

inline void put_floats(std::string& out, const Tensor<float>& t) {
  for (float f : t.values()) put_le(out, std::bit_cast<std::uint32_t>(f));
}

inline Tensor<float> get_floats(const std::string& in, std::size_t off, const Shape& shape) {
  Tensor<float> t(shape);
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = std::bit_cast<float>(get_le<std::uint32_t>(in, off + 4 * i));
  return t;
}

}  // namespace detail

inline std::string serialize(const Checkpoint& c) {
  nlohmann::json tensors = nlohmann::json::array();
  std::string blobs;
  auto add_blob = [&](const std::string& name, const Tensor<float>& t, std::uint64_t step) {
    nlohmann::json e{{"name", name}, {"shape", t.shape()}, {"dtype", "f32"}, {"offset", blobs.size()},
                     {"nbytes", 4 * t.size()}};
    if (step) e["adam_step"] = step;
    tensors.push_back(std::move(e));
    detail::put_floats(blobs, t);
  };
  for (const auto& [name, e] : c.params.entries()) {
    add_blob(name, e.value, e.step);
    if (e.step) {
      add_blob(name + ".adam_m", e.m, 0);
      add_blob(name + ".adam_v", e.v, 0);
    }
  }
  nlohmann::json header{{"format_version", kFormatVersion}, {"meta", c.meta}, {"tensors", tensors}};
  const std::string h = header.dump();
  std::string out(kMagic, 4);
  detail::put_le<std::uint32_t>(out, kFormatVersion);
  detail::put_le<std::uint64_t>(out, h.size());
  out += h;
  out += blobs;
  return out;
}

inline Checkpoint deserialize(const std::string& bytes, const std::string& what = "checkpoint") {
  require(bytes.size() >= 16 && std::memcmp(bytes.data(), kMagic, 4) == 0, Errc::corruption,
          what + ": missing CDFK magic");
  const auto version = detail::get_le<std::uint32_t>(bytes, 4);
  require(version == kFormatVersion, Errc::version_mismatch,
          what + ": format version " + std::to_string(version) + ", expected " + std::to_string(kFormatVersion));
  const auto hlen = detail::get_le<std::uint64_t>(bytes, 8);
  require(hlen <= bytes.size() - 16, Errc::corruption, what + ": header length exceeds file size");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.substr(16, hlen));
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::corruption, what + ": unreadable header (" + e.what() + ")");
  }
  const std::size_t base = 16 + hlen, avail = bytes.size() - base;
  Checkpoint c;
  try {
    c.meta = header.at("meta");
    struct Pending {
      std::string name;
      Tensor<float> t;
      std::uint64_t step;
    };
    std::vector<Pending> all;
    std::size_t expected_end = 0;
    for (const auto& e : header.at("tensors")) {
      const auto name = e.at("name").get<std::string>();
      const auto shape = e.at("shape").get<Shape>();
      const auto off = e.at("offset").get<std::uint64_t>(), nb = e.at("nbytes").get<std::uint64_t>();
      require(e.at("dtype") == "f32" && nb == 4 * shape_numel(shape), Errc::corruption, what + ": bad entry " + name);
      require(off <= avail && nb <= avail - off, Errc::corruption,
              what + ": blob " + name + " lies outside the file (truncated?)");
      expected_end = std::max<std::size_t>(expected_end, off + nb);
      all.push_back({name, detail::get_floats(bytes, base + off, shape), e.value("adam_step", std::uint64_t(0))});
    }
    require(expected_end == avail, Errc::corruption, what + ": trailing or missing blob bytes");
    auto ends_with = [](const std::string& s, const std::string& suf) {
      return s.size() >= suf.size() && s.compare(s.size() - suf.size(), suf.size(), suf) == 0;
    };
    for (auto& p : all)
      if (!ends_with(p.name, ".adam_m") && !ends_with(p.name, ".adam_v")) c.params.add(p.name, p.t).step = p.step;
    for (auto& p : all) {
      for (const char* suf : {".adam_m", ".adam_v"}) {
        if (!ends_with(p.name, suf)) continue;
        const auto owner = p.name.substr(0, p.name.size() - 7);
        require(c.params.contains(owner), Errc::corruption, what + ": moment without parameter " + owner);
        auto& e = c.params.at(owner);
        require(p.t.shape() == e.value.shape(), Errc::corruption, what + ": moment shape for " + owner);
        (suf[6] == 'm' ? e.m : e.v) = p.t;
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::corruption, what + ": malformed header (" + e.what() + ")");
  }
  return c;
}

inline void save_checkpoint(const Checkpoint& c, const std::string& path) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  require(bool(f), Errc::io, "cannot open " + path + " for writing");
  const auto bytes = serialize(c);
  f.write(bytes.data(), std::streamsize(bytes.size()));
  require(bool(f), Errc::io, "write failed for " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  require(bool(f), Errc::io, "cannot open " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  return deserialize(ss.str(), path);
}

}  // namespace cardiff::ckpt
