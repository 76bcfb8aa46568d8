#pragma once

#include <filesystem>
#include <string>
#include <variant>

#include <json.hpp>

#include "s2corr/tensor.hpp"

namespace s2corr {

// "S2CT v1" tensor file:
//   bytes 0-3  magic 'S' '2' 'C' 'T'
//   byte  4    version (1)
//   byte  5    dtype (1 = f32, 2 = f64)
//   byte  6    ndim (1..4)
//   byte  7    reserved (0)
//   ndim x     little-endian u32 extents
//   then       row-major little-endian scalars
void save_tensor(const std::filesystem::path& path, const Tensor<float>& t);
void save_tensor(const std::filesystem::path& path, const Tensor<double>& t);

using AnyTensor = std::variant<Tensor<float>, Tensor<double>>;

AnyTensor load_tensor_any(const std::filesystem::path& path);

Dtype peek_dtype(const std::filesystem::path& path);

// Loads and requires the file dtype to match T exactly.
template <typename T>
Tensor<T> load_tensor(const std::filesystem::path& path);

// Loads and converts to T if the stored dtype differs.
template <typename T>
Tensor<T> load_tensor_as(const std::filesystem::path& path);

// A bundle is a directory with a manifest.json naming its tensors:
//   { "format": "s2ct-bundle", "version": 1,
//     "tensors": { "<name>": "<file>.s2ct", ... },
//     "meta": { ... } }
// meta carries non-tensor entries such as class_names and grid extents.
class Bundle {
public:
  static Bundle create(const std::filesystem::path& dir);
  static Bundle open(const std::filesystem::path& dir);

  const std::filesystem::path& dir() const { return dir_; }

  bool has(const std::string& name) const;
  std::vector<std::string> tensor_names() const;

  template <typename T>
  void put(const std::string& name, const Tensor<T>& t);

  template <typename T>
  Tensor<T> get(const std::string& name) const;  // exact dtype

  template <typename T>
  Tensor<T> get_as(const std::string& name) const;  // converting

  nlohmann::json& meta() { return manifest_["meta"]; }
  const nlohmann::json& meta() const { return manifest_.at("meta"); }

  void save() const;  // rewrites manifest.json

private:
  Bundle(std::filesystem::path dir, nlohmann::json manifest)
      : dir_(std::move(dir)), manifest_(std::move(manifest)) {}

  std::filesystem::path tensor_path(const std::string& name) const;

  std::filesystem::path dir_;
  nlohmann::json manifest_;
};

}  // namespace s2corr
