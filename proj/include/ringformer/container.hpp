#pragma once

// Binary tensor container shared by checkpoints and image datasets:
//
//   8 bytes   magic "RFTENSOR"
//   8 bytes   manifest length L, unsigned little-endian
//   L bytes   UTF-8 JSON manifest; "tensors" lists {name, shape, dtype, offset, nbytes}
//   payload   raw little-endian tensor data; offsets are relative to the payload start

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "ringformer/errors.hpp"
#include "ringformer/tensor.hpp"

namespace ringformer {

inline constexpr char kContainerMagic[8] = {'R', 'F', 'T', 'E', 'N', 'S', 'O', 'R'};
inline constexpr int kContainerSchemaVersion = 1;

namespace detail {

template <typename U>
void append_le(std::string& out, U value) {
  static_assert(std::is_trivially_copyable_v<U>);
  unsigned char bytes[sizeof(U)];
  std::memcpy(bytes, &value, sizeof(U));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(U));
  out.append(reinterpret_cast<const char*>(bytes), sizeof(U));
}

template <typename U>
U read_le(const char* p) {
  unsigned char bytes[sizeof(U)];
  std::memcpy(bytes, p, sizeof(U));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(U));
  U value;
  std::memcpy(&value, bytes, sizeof(U));
  return value;
}

inline std::string read_file_bytes(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open '" + path + "' for reading");
  std::ostringstream ss;
  ss << f.rdbuf();
  if (f.bad()) throw IoError("failed reading '" + path + "'");
  return ss.str();
}

inline void write_file_bytes(const std::string& path, const std::string& bytes) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open '" + path + "' for writing");
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  f.flush();
  if (!f) throw IoError("failed writing '" + path + "'");
}

}  // namespace detail

/// Builds a container in memory. Tensors are laid out in insertion order.
class ContainerWriter {
 public:
  explicit ContainerWriter(std::string kind) {
    manifest_["schema_version"] = kContainerSchemaVersion;
    manifest_["kind"] = std::move(kind);
  }

  nlohmann::ordered_json& meta() { return meta_; }

  template <typename T>
  void add(const std::string& name, const Tensor<T>& t) {
    if (!names_.insert(name).second) throw CheckpointNameError("duplicate tensor name '" + name + "'");
    const std::size_t offset = payload_.size();
    for (T v : t.values()) detail::append_le(payload_, v);
    tensors_.push_back({{"name", name},
                        {"shape", t.shape()},
                        {"dtype", std::string(dtype_name<T>())},
                        {"offset", offset},
                        {"nbytes", payload_.size() - offset}});
  }

  std::string bytes() const {
    nlohmann::ordered_json m = manifest_;
    m["meta"] = meta_;
    m["tensors"] = tensors_;
    const std::string header = m.dump();
    std::string out(kContainerMagic, sizeof kContainerMagic);
    detail::append_le<std::uint64_t>(out, header.size());
    out += header;
    out += payload_;
    return out;
  }

  void save(const std::string& path) const { detail::write_file_bytes(path, bytes()); }

 private:
  nlohmann::ordered_json manifest_;
  nlohmann::ordered_json meta_ = nlohmann::ordered_json::object();
  nlohmann::ordered_json tensors_ = nlohmann::ordered_json::array();
  std::string payload_;
  std::set<std::string> names_;
};

/// Parsed container. Validates framing, version and entry bounds on construction.
class ContainerReader {
 public:
  ContainerReader(std::string bytes, std::string origin, std::string_view expected_kind)
      : bytes_(std::move(bytes)), origin_(std::move(origin)) {
    if (bytes_.size() < 16 || std::memcmp(bytes_.data(), kContainerMagic, 8) != 0) {
      if (bytes_.size() < 16 && bytes_.size() >= 8 && std::memcmp(bytes_.data(), kContainerMagic, 8) == 0) {
        throw CheckpointTruncatedError(origin_ + ": file ends inside the header");
      }
      throw CheckpointError(origin_ + ": not a tensor container (bad magic)");
    }
    const auto header_len = detail::read_le<std::uint64_t>(bytes_.data() + 8);
    if (header_len > bytes_.size() - 16) {
      throw CheckpointTruncatedError(origin_ + ": manifest declares " + std::to_string(header_len) + " bytes, only " +
                                     std::to_string(bytes_.size() - 16) + " present");
    }
    try {
      manifest_ = nlohmann::json::parse(bytes_.begin() + 16, bytes_.begin() + 16 + static_cast<std::ptrdiff_t>(header_len));
    } catch (const nlohmann::json::exception& e) {
      throw CheckpointError(origin_ + ": unreadable manifest: " + e.what());
    }
    const int version = manifest_.value("schema_version", -1);
    if (version != kContainerSchemaVersion) {
      throw CheckpointVersionError(origin_ + ": schema_version " + std::to_string(version) + ", this build reads " +
                                   std::to_string(kContainerSchemaVersion));
    }
    if (manifest_.value("kind", "") != expected_kind) {
      throw CheckpointError(origin_ + ": container holds '" + manifest_.value("kind", "") + "', expected '" +
                            std::string(expected_kind) + "'");
    }
    payload_start_ = 16 + header_len;
    const std::size_t payload_size = bytes_.size() - payload_start_;
    std::size_t expected_offset = 0;
    for (const auto& e : manifest_.at("tensors")) {
      Entry entry{e.at("name").get<std::string>(), e.at("shape").get<Shape>(), e.at("dtype").get<std::string>(),
                  e.at("offset").get<std::size_t>(), e.at("nbytes").get<std::size_t>()};
      const std::size_t width = entry.dtype == "f64" ? 8 : entry.dtype == "f32" ? 4 : 0;
      if (width == 0) throw CheckpointError(origin_ + ": tensor '" + entry.name + "' has unknown dtype " + entry.dtype);
      if (entry.nbytes != width * shape_numel(entry.shape) || entry.offset != expected_offset) {
        throw CheckpointError(origin_ + ": tensor '" + entry.name + "' has an inconsistent extent");
      }
      expected_offset += entry.nbytes;
      if (!index_.emplace(entry.name, entries_.size()).second) {
        throw CheckpointNameError(origin_ + ": tensor '" + entry.name + "' appears twice");
      }
      entries_.push_back(std::move(entry));
    }
    if (expected_offset > payload_size) {
      throw CheckpointTruncatedError(origin_ + ": payload has " + std::to_string(payload_size) + " bytes, manifest needs " +
                                     std::to_string(expected_offset));
    }
    if (expected_offset < payload_size) {
      throw CheckpointError(origin_ + ": " + std::to_string(payload_size - expected_offset) +
                            " trailing bytes after the last tensor");
    }
  }

  static ContainerReader open(const std::string& path, std::string_view expected_kind) {
    return ContainerReader(detail::read_file_bytes(path), path, expected_kind);
  }

  const nlohmann::json& manifest() const { return manifest_; }
  const nlohmann::json& meta() const { return manifest_.at("meta"); }
  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  std::vector<std::string> names() const {
    std::vector<std::string> out;
    for (const auto& e : entries_) out.push_back(e.name);
    return out;
  }

  /// Tensor by name, converted to T when the stored dtype differs.
  template <typename T>
  Tensor<T> get(const std::string& name) const {
    const auto it = index_.find(name);
    if (it == index_.end()) throw CheckpointNameError(origin_ + ": no tensor named '" + name + "'");
    const Entry& e = entries_[it->second];
    Tensor<T> out(e.shape);
    const char* p = bytes_.data() + payload_start_ + e.offset;
    for (std::size_t i = 0; i < out.size(); ++i) {
      out[i] = e.dtype == "f64" ? static_cast<T>(detail::read_le<double>(p + 8 * i))
                                : static_cast<T>(detail::read_le<float>(p + 4 * i));
    }
    return out;
  }

 private:
  struct Entry {
    std::string name;
    Shape shape;
    std::string dtype;
    std::size_t offset;
    std::size_t nbytes;
  };

  std::string bytes_;
  std::string origin_;
  nlohmann::json manifest_;
  std::size_t payload_start_ = 0;
  std::vector<Entry> entries_;
  std::map<std::string, std::size_t> index_;
};

}  // namespace ringformer
