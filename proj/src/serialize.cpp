#include "s2corr/serialize.hpp"

#include <bit>
#include <cstring>
#include <fstream>

namespace s2corr {

namespace {

constexpr unsigned char kMagic[4] = {0x53, 0x32, 0x43, 0x54};  // "S2CT"
constexpr unsigned char kVersion = 1;

void put_u32_le(std::string& out, std::uint32_t v) {
  out.push_back(char(v & 0xFF));
  out.push_back(char((v >> 8) & 0xFF));
  out.push_back(char((v >> 16) & 0xFF));
  out.push_back(char((v >> 24) & 0xFF));
}

void put_u64_le(std::string& out, std::uint64_t v) {
  put_u32_le(out, std::uint32_t(v & 0xFFFFFFFFull));
  put_u32_le(out, std::uint32_t(v >> 32));
}

template <typename T>
std::string encode(const Tensor<T>& t) {
  if (t.rank() < 1 || t.rank() > 4)
    throw FormatError("serializable tensors have rank 1..4");
  for (std::size_t d : t.dims())
    if (d == 0) throw FormatError("serializable tensors need all extents >= 1");
  std::string out;
  out.reserve(8 + 4 * t.rank() + sizeof(T) * t.size());
  out.append(reinterpret_cast<const char*>(kMagic), 4);
  out.push_back(char(kVersion));
  out.push_back(char(static_cast<std::uint8_t>(dtype_of<T>())));
  out.push_back(char(t.rank()));
  out.push_back(char(0));
  for (std::size_t d : t.dims()) put_u32_le(out, std::uint32_t(d));
  for (T v : t.data()) {
    if constexpr (sizeof(T) == 4)
      put_u32_le(out, std::bit_cast<std::uint32_t>(v));
    else
      put_u64_le(out, std::bit_cast<std::uint64_t>(v));
  }
  return out;
}

void write_file(const std::filesystem::path& path, const std::string& bytes) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw FormatError("cannot open for writing: " + path.string());
  f.write(bytes.data(), std::streamsize(bytes.size()));
  if (!f) throw FormatError("write failed: " + path.string());
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot open: " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return bytes;
}

std::uint32_t get_u32_le(const std::string& b, std::size_t off) {
  return std::uint32_t(std::uint8_t(b[off])) | (std::uint32_t(std::uint8_t(b[off + 1])) << 8) |
         (std::uint32_t(std::uint8_t(b[off + 2])) << 16) |
         (std::uint32_t(std::uint8_t(b[off + 3])) << 24);
}

struct Header {
  Dtype dtype;
  std::vector<std::size_t> dims;
  std::size_t payload_off;
  std::size_t count;
};

Header parse_header(const std::string& b, const std::filesystem::path& path) {
  if (b.size() < 8) throw FormatError("truncated header: " + path.string());
  if (std::memcmp(b.data(), kMagic, 4) != 0)
    throw FormatError("bad magic (not an S2CT file): " + path.string());
  if (std::uint8_t(b[4]) != kVersion)
    throw FormatError("unsupported version " + std::to_string(int(std::uint8_t(b[4]))) + ": " +
                      path.string());
  const std::uint8_t dt = std::uint8_t(b[5]);
  if (dt != 1 && dt != 2)
    throw FormatError("unsupported dtype code " + std::to_string(int(dt)) + ": " + path.string());
  const std::uint8_t ndim = std::uint8_t(b[6]);
  if (ndim < 1 || ndim > 4)
    throw FormatError("ndim out of range 1..4: " + path.string());
  if (std::uint8_t(b[7]) != 0) throw FormatError("reserved byte nonzero: " + path.string());
  if (b.size() < 8 + 4 * std::size_t(ndim))
    throw FormatError("truncated extents: " + path.string());
  Header h;
  h.dtype = static_cast<Dtype>(dt);
  h.count = 1;
  for (std::uint8_t i = 0; i < ndim; ++i) {
    std::uint32_t d = get_u32_le(b, 8 + 4 * std::size_t(i));
    if (d == 0) throw FormatError("zero extent: " + path.string());
    h.dims.push_back(d);
    h.count *= d;
  }
  h.payload_off = 8 + 4 * std::size_t(ndim);
  const std::size_t scalar = (h.dtype == Dtype::f32) ? 4 : 8;
  if (b.size() != h.payload_off + scalar * h.count)
    throw FormatError("payload size mismatch (truncated or trailing bytes): " + path.string());
  return h;
}

template <typename T>
Tensor<T> decode_payload(const std::string& b, const Header& h) {
  std::vector<T> data(h.count);
  for (std::size_t i = 0; i < h.count; ++i) {
    if constexpr (sizeof(T) == 4) {
      data[i] = std::bit_cast<float>(get_u32_le(b, h.payload_off + 4 * i));
    } else {
      std::uint64_t lo = get_u32_le(b, h.payload_off + 8 * i);
      std::uint64_t hi = get_u32_le(b, h.payload_off + 8 * i + 4);
      data[i] = std::bit_cast<double>(lo | (hi << 32));
    }
  }
  return Tensor<T>(h.dims, std::move(data));
}

}  // namespace

void save_tensor(const std::filesystem::path& path, const Tensor<float>& t) {
  write_file(path, encode(t));
}

void save_tensor(const std::filesystem::path& path, const Tensor<double>& t) {
  write_file(path, encode(t));
}

Dtype peek_dtype(const std::filesystem::path& path) {
  const std::string b = read_file(path);
  return parse_header(b, path).dtype;
}

AnyTensor load_tensor_any(const std::filesystem::path& path) {
  const std::string b = read_file(path);
  const Header h = parse_header(b, path);
  if (h.dtype == Dtype::f32) return decode_payload<float>(b, h);
  return decode_payload<double>(b, h);
}

template <typename T>
Tensor<T> load_tensor(const std::filesystem::path& path) {
  const std::string b = read_file(path);
  const Header h = parse_header(b, path);
  if (h.dtype != dtype_of<T>())
    throw FormatError(std::string("dtype mismatch: file holds ") + dtype_name(h.dtype) + ": " +
                      path.string());
  return decode_payload<T>(b, h);
}

template <typename T>
Tensor<T> load_tensor_as(const std::filesystem::path& path) {
  AnyTensor any = load_tensor_any(path);
  if (auto* exact = std::get_if<Tensor<T>>(&any)) return std::move(*exact);
  return std::visit(
      [](const auto& src) {
        std::vector<T> data(src.data().begin(), src.data().end());
        return Tensor<T>(src.dims(), std::move(data));
      },
      any);
}

template Tensor<float> load_tensor<float>(const std::filesystem::path&);
template Tensor<double> load_tensor<double>(const std::filesystem::path&);
template Tensor<float> load_tensor_as<float>(const std::filesystem::path&);
template Tensor<double> load_tensor_as<double>(const std::filesystem::path&);

Bundle Bundle::create(const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  nlohmann::json manifest;
  manifest["format"] = "s2ct-bundle";
  manifest["version"] = 1;
  manifest["tensors"] = nlohmann::json::object();
  manifest["meta"] = nlohmann::json::object();
  return Bundle(dir, std::move(manifest));
}

Bundle Bundle::open(const std::filesystem::path& dir) {
  const auto manifest_path = dir / "manifest.json";
  std::ifstream f(manifest_path);
  if (!f) throw FormatError("bundle manifest missing: " + manifest_path.string());
  nlohmann::json manifest;
  try {
    f >> manifest;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("bundle manifest is not valid JSON: " + std::string(e.what()));
  }
  if (!manifest.contains("tensors") || !manifest["tensors"].is_object())
    throw FormatError("bundle manifest lacks a tensors object: " + manifest_path.string());
  if (!manifest.contains("meta")) manifest["meta"] = nlohmann::json::object();
  return Bundle(dir, std::move(manifest));
}

bool Bundle::has(const std::string& name) const {
  return manifest_.at("tensors").contains(name);
}

std::vector<std::string> Bundle::tensor_names() const {
  std::vector<std::string> names;
  for (auto& [k, v] : manifest_.at("tensors").items()) names.push_back(k);
  return names;
}

std::filesystem::path Bundle::tensor_path(const std::string& name) const {
  if (!has(name)) throw FormatError("bundle has no tensor entry \"" + name + "\"");
  return dir_ / manifest_.at("tensors").at(name).get<std::string>();
}

template <typename T>
void Bundle::put(const std::string& name, const Tensor<T>& t) {
  const std::string file = name + ".s2ct";
  save_tensor(dir_ / file, t);
  manifest_["tensors"][name] = file;
}

template <typename T>
Tensor<T> Bundle::get(const std::string& name) const {
  return load_tensor<T>(tensor_path(name));
}

template <typename T>
Tensor<T> Bundle::get_as(const std::string& name) const {
  return load_tensor_as<T>(tensor_path(name));
}

template void Bundle::put(const std::string&, const Tensor<float>&);
template void Bundle::put(const std::string&, const Tensor<double>&);
template Tensor<float> Bundle::get<float>(const std::string&) const;
template Tensor<double> Bundle::get<double>(const std::string&) const;
template Tensor<float> Bundle::get_as<float>(const std::string&) const;
template Tensor<double> Bundle::get_as<double>(const std::string&) const;

void Bundle::save() const {
  std::ofstream f(dir_ / "manifest.json", std::ios::trunc);
  if (!f) throw FormatError("cannot write manifest in " + dir_.string());
  f << manifest_.dump(2) << "\n";
}

}  // namespace s2corr
