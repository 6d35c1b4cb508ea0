#pragma once

// Tensor store: a JSON manifest (name, shape, byte offset per tensor plus free
// form metadata) next to a raw blob of little-endian float32, row-major.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <json.hpp>

namespace topoguide {

using json = nlohmann::json;

inline constexpr int kTensorStoreVersion = 1;

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

inline void write_le_floats(std::ostream& os, const float* data, std::size_t n) {
  if constexpr (std::endian::native == std::endian::little) {
    os.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(n * sizeof(float)));
  } else {
    for (std::size_t i = 0; i < n; ++i) {
      auto b = std::bit_cast<std::uint32_t>(data[i]);
      b = (b >> 24) | ((b >> 8) & 0xff00u) | ((b << 8) & 0xff0000u) | (b << 24);
      os.write(reinterpret_cast<const char*>(&b), 4);
    }
  }
}

inline void read_le_floats(const char* src, float* dst, std::size_t n) {
  std::memcpy(dst, src, n * sizeof(float));
  if constexpr (std::endian::native != std::endian::little) {
    for (std::size_t i = 0; i < n; ++i) {
      auto b = std::bit_cast<std::uint32_t>(dst[i]);
      b = (b >> 24) | ((b >> 8) & 0xff00u) | ((b << 8) & 0xff0000u) | (b << 24);
      dst[i] = std::bit_cast<float>(b);
    }
  }
}

}  // namespace detail

struct TensorEntry {
  std::string name;
  std::vector<std::int64_t> shape;  // {rows, cols}
  std::vector<float> data;          // row-major
};

/// Row-major float32 copy of an Eigen matrix or vector.
template <typename Derived>
TensorEntry to_tensor(const std::string& name, const Eigen::MatrixBase<Derived>& m) {
  TensorEntry t;
  t.name = name;
  t.shape = {static_cast<std::int64_t>(m.rows()), static_cast<std::int64_t>(m.cols())};
  t.data.reserve(static_cast<std::size_t>(m.size()));
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) t.data.push_back(static_cast<float>(m(r, c)));
  return t;
}

template <typename Derived>
void from_tensor(const TensorEntry& t, Eigen::MatrixBase<Derived>& m) {
  if (t.shape.size() != 2 || t.shape[0] != m.rows() || t.shape[1] != m.cols())
    throw FormatError("tensor '" + t.name + "' has unexpected shape");
  std::size_t k = 0;
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) m(r, c) = static_cast<typename Derived::Scalar>(t.data[k++]);
}

struct TensorStore {
  json meta = json::object();
  std::vector<TensorEntry> tensors;

  const TensorEntry& get(const std::string& name) const {
    for (const auto& t : tensors)
      if (t.name == name) return t;
    throw FormatError("tensor '" + name + "' missing from store");
  }
};

/// Writes <stem>.json and <stem>.bin.
inline void save_tensor_store(const std::filesystem::path& stem, const std::string& kind, const TensorStore& store) {
  const auto manifest_path = std::filesystem::path(stem.string() + ".json");
  const auto blob_path = std::filesystem::path(stem.string() + ".bin");
  if (!manifest_path.parent_path().empty()) std::filesystem::create_directories(manifest_path.parent_path());

  json manifest;
  manifest["format"] = "topoguide.tensors";
  manifest["version"] = kTensorStoreVersion;
  manifest["kind"] = kind;
  manifest["blob"] = blob_path.filename().string();
  manifest["meta"] = store.meta;
  manifest["tensors"] = json::array();

  std::ofstream blob(blob_path, std::ios::binary | std::ios::trunc);
  if (!blob) throw std::runtime_error("cannot write " + blob_path.string());
  std::uint64_t offset = 0;
  for (const auto& t : store.tensors) {
    manifest["tensors"].push_back({{"name", t.name}, {"shape", t.shape}, {"offset", offset}});
    detail::write_le_floats(blob, t.data.data(), t.data.size());
    offset += t.data.size() * sizeof(float);
  }
  blob.close();
  if (!blob) throw std::runtime_error("write failed for " + blob_path.string());

  std::ofstream mf(manifest_path, std::ios::trunc);
  if (!mf) throw std::runtime_error("cannot write " + manifest_path.string());
  mf << manifest.dump(2) << '\n';
}

inline TensorStore load_tensor_store(const std::filesystem::path& stem, const std::string& expected_kind) {
  const auto manifest_path = std::filesystem::path(stem.string() + ".json");
  std::ifstream mf(manifest_path);
  if (!mf) throw FormatError("cannot open " + manifest_path.string());
  json manifest;
  try {
    mf >> manifest;
  } catch (const json::exception& e) {
    throw FormatError(manifest_path.string() + ": " + e.what());
  }
  if (manifest.value("format", "") != "topoguide.tensors") throw FormatError(manifest_path.string() + ": not a tensor manifest");
  if (manifest.value("version", 0) != kTensorStoreVersion)
    throw FormatError(manifest_path.string() + ": unsupported version");
  if (manifest.value("kind", "") != expected_kind)
    throw FormatError(manifest_path.string() + ": expected kind '" + expected_kind + "'");

  const auto blob_path = manifest_path.parent_path() / manifest.at("blob").get<std::string>();
  std::ifstream blob(blob_path, std::ios::binary);
  if (!blob) throw FormatError("cannot open " + blob_path.string());
  std::vector<char> bytes((std::istreambuf_iterator<char>(blob)), std::istreambuf_iterator<char>());

  TensorStore store;
  store.meta = manifest.value("meta", json::object());
  for (const auto& e : manifest.at("tensors")) {
    TensorEntry t;
    t.name = e.at("name").get<std::string>();
    t.shape = e.at("shape").get<std::vector<std::int64_t>>();
    const auto offset = e.at("offset").get<std::uint64_t>();
    std::size_t count = 1;
    for (auto d : t.shape) count *= static_cast<std::size_t>(d);
    if (offset + count * sizeof(float) > bytes.size())
      throw FormatError(blob_path.string() + ": truncated payload for tensor '" + t.name + "'");
    t.data.resize(count);
    detail::read_le_floats(bytes.data() + offset, t.data.data(), count);
    store.tensors.push_back(std::move(t));
  }
  return store;
}

}  // namespace topoguide
