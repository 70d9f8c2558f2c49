// Copyright 2026 The tall Authors
// SPDX-License-Identifier: Apache-2.0

// TLCP binary checkpoints. Layout, little-endian, no padding:
//   "TLCP" | u32 version | u32 meta_len | meta (JSON text) | u32 tensor_count
//   then per tensor: u16 name_len | name | u8 dtype (0=f32, 1=f64) | u8 rank
//                    | rank x u32 dims | row-major data
// Frozen flags travel in the metadata under "frozen".

#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "tall/error.hpp"
#include "tall/param_store.hpp"

namespace tall {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

inline constexpr char kCheckpointMagic[4] = {'T', 'L', 'C', 'P'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

enum class DType : std::uint8_t { f32 = 0, f64 = 1 };

struct Checkpoint {
  ParamStore store;
  nlohmann::json meta = nlohmann::json::object();
};

namespace detail {

class ByteWriter {
 public:
  template <class T>
  void put(T v) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
    bytes_.insert(bytes_.end(), p, p + sizeof(T));
  }
  void put_bytes(const void* data, std::size_t n) {
    const auto* p = static_cast<const std::uint8_t*>(data);
    bytes_.insert(bytes_.end(), p, p + n);
  }
  std::vector<std::uint8_t> take() { return std::move(bytes_); }

 private:
  std::vector<std::uint8_t> bytes_;
};

class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  template <class T>
  T get(const char* what) {
    T v;
    get_bytes(&v, sizeof(T), what);
    return v;
  }
  void get_bytes(void* out, std::size_t n, const char* what) {
    if (bytes_.size() - pos_ < n) {
      throw CheckpointError(CheckpointError::Kind::truncated,
                            std::string("checkpoint truncated while reading ") + what + " at byte " +
                                std::to_string(pos_));
    }
    std::memcpy(out, bytes_.data() + pos_, n);
    pos_ += n;
  }
  std::size_t remaining() const noexcept { return bytes_.size() - pos_; }
  std::size_t position() const noexcept { return pos_; }

 private:
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

}  // namespace detail

/// Serializes `store` with `meta`. Values are written as f64 unless `dtype`
/// is f32, which rounds them.
inline std::vector<std::uint8_t> serialize_checkpoint(const ParamStore& store, const nlohmann::json& meta,
                                                      DType dtype = DType::f64) {
  nlohmann::json full = meta;
  nlohmann::json frozen = nlohmann::json::array();
  for (const auto& [name, e] : store) {
    if (e.frozen) frozen.push_back(name);
  }
  full["frozen"] = std::move(frozen);
  const std::string text = full.dump();

  detail::ByteWriter w;
  w.put_bytes(kCheckpointMagic, 4);
  w.put<std::uint32_t>(kCheckpointVersion);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(text.size()));
  w.put_bytes(text.data(), text.size());
  w.put<std::uint32_t>(static_cast<std::uint32_t>(store.size()));
  for (const auto& [name, e] : store) {
    if (name.size() > 0xFFFF) throw ContractError("parameter name too long for checkpoint: " + name);
    w.put<std::uint16_t>(static_cast<std::uint16_t>(name.size()));
    w.put_bytes(name.data(), name.size());
    w.put<std::uint8_t>(static_cast<std::uint8_t>(dtype));
    const Tensor& t = e.tensor;
    w.put<std::uint8_t>(static_cast<std::uint8_t>(t.rank()));
    for (std::size_t d : t.shape()) w.put<std::uint32_t>(static_cast<std::uint32_t>(d));
    if (dtype == DType::f64) {
      w.put_bytes(t.data().data(), t.numel() * sizeof(double));
    } else {
      for (double v : t.data()) w.put<float>(static_cast<float>(v));
    }
  }
  return w.take();
}

/// Parses a checkpoint; nothing is returned unless the whole buffer is valid.
inline Checkpoint deserialize_checkpoint(std::span<const std::uint8_t> bytes) {
  using Kind = CheckpointError::Kind;
  detail::ByteReader r(bytes);
  char magic[4];
  if (bytes.size() < 4) throw CheckpointError(Kind::truncated, "checkpoint truncated before magic");
  r.get_bytes(magic, 4, "magic");
  if (std::memcmp(magic, kCheckpointMagic, 4) != 0) throw CheckpointError(Kind::bad_magic, "bad magic: not a TLCP file");
  const auto version = r.get<std::uint32_t>("version");
  if (version != kCheckpointVersion) {
    throw CheckpointError(Kind::version_mismatch, "checkpoint version " + std::to_string(version) +
                                                      ", this build reads version " +
                                                      std::to_string(kCheckpointVersion));
  }
  const auto meta_len = r.get<std::uint32_t>("metadata length");
  std::string text(meta_len, '\0');
  r.get_bytes(text.data(), meta_len, "metadata");

  Checkpoint ck;
  try {
    ck.meta = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(Kind::malformed, std::string("checkpoint metadata is not valid JSON: ") + e.what());
  }
  if (!ck.meta.is_object()) throw CheckpointError(Kind::malformed, "checkpoint metadata must be a JSON object");

  const auto count = r.get<std::uint32_t>("tensor count");
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto name_len = r.get<std::uint16_t>("tensor name length");
    std::string name(name_len, '\0');
    r.get_bytes(name.data(), name_len, "tensor name");
    const auto dtype = r.get<std::uint8_t>("dtype");
    if (dtype > 1) throw CheckpointError(Kind::malformed, "tensor '" + name + "' has unknown dtype " + std::to_string(dtype));
    const auto rank = r.get<std::uint8_t>("rank");
    if (rank == 0) throw CheckpointError(Kind::malformed, "tensor '" + name + "' has rank 0");
    Shape shape(rank);
    std::size_t numel = 1;
    for (auto& d : shape) {
      d = r.get<std::uint32_t>("dims");
      if (d == 0) throw CheckpointError(Kind::malformed, "tensor '" + name + "' has a zero dimension");
      numel *= d;
    }
    const std::size_t width = dtype == 1 ? sizeof(double) : sizeof(float);
    if (numel > r.remaining() / width) {
      throw CheckpointError(Kind::truncated, "checkpoint truncated inside tensor '" + name + "'");
    }
    std::vector<double> values(numel);
    if (dtype == 1) {
      r.get_bytes(values.data(), numel * sizeof(double), "tensor data");
    } else {
      for (auto& v : values) v = r.get<float>("tensor data");
    }
    if (ck.store.contains(name)) throw CheckpointError(Kind::malformed, "duplicate tensor name '" + name + "'");
    ck.store.add(name, Tensor(std::move(shape), std::move(values)));
  }
  if (r.remaining() != 0) {
    throw CheckpointError(Kind::malformed, std::to_string(r.remaining()) + " trailing bytes after tensor table");
  }

  if (ck.meta.contains("frozen")) {
    const auto& frozen = ck.meta["frozen"];
    if (!frozen.is_array()) throw CheckpointError(Kind::malformed, "metadata 'frozen' must be an array");
    for (const auto& n : frozen) {
      if (!n.is_string() || !ck.store.contains(n.get<std::string>())) {
        throw CheckpointError(Kind::malformed, "metadata 'frozen' names an unknown tensor");
      }
      ck.store.freeze_entry(n.get<std::string>());
    }
    ck.meta.erase("frozen");
  }
  return ck;
}

/// Writes through a temporary file and renames it into place.
inline void save_checkpoint(const ParamStore& store, const nlohmann::json& meta, const std::filesystem::path& path,
                            DType dtype = DType::f64) {
  const auto bytes = serialize_checkpoint(store, meta, dtype);
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError(CheckpointError::Kind::io, "cannot open '" + tmp.string() + "' for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw CheckpointError(CheckpointError::Kind::io, "write failed for '" + tmp.string() + "'");
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw CheckpointError(CheckpointError::Kind::io, "cannot move checkpoint to '" + path.string() + "': " + ec.message());
}

inline std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError(CheckpointError::Kind::io, "cannot open checkpoint '" + path.string() + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  try {
    return deserialize_checkpoint(bytes);
  } catch (const CheckpointError& e) {
    throw CheckpointError(e.kind(), path.string() + ": " + e.what());
  }
}

/// Fails with a config_mismatch error unless meta[key] equals `expected`.
inline void require_meta(const nlohmann::json& meta, const std::string& key, const nlohmann::json& expected) {
  if (!meta.contains(key)) {
    throw CheckpointError(CheckpointError::Kind::config_mismatch, "checkpoint metadata lacks '" + key + "'");
  }
  if (meta.at(key) != expected) {
    throw CheckpointError(CheckpointError::Kind::config_mismatch, "checkpoint '" + key + "' is " + meta.at(key).dump() +
                                                                      ", expected " + expected.dump());
  }
}

}  // namespace tall
