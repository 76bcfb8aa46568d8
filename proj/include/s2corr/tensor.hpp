#pragma once

#include <cassert>
#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "s2corr/error.hpp"

namespace s2corr {

enum class Dtype : std::uint8_t { f32 = 1, f64 = 2 };

template <typename T>
constexpr Dtype dtype_of();
template <>
constexpr Dtype dtype_of<float>() { return Dtype::f32; }
template <>
constexpr Dtype dtype_of<double>() { return Dtype::f64; }

inline const char* dtype_name(Dtype d) { return d == Dtype::f32 ? "f32" : "f64"; }

// Dense row-major array, rank 1..4. A default-constructed Tensor is the empty
// state (rank 0, no data); it is what degenerate ops (e.g. a zero-length scan)
// return, and it cannot be serialized. Extent 0 is allowed only on the leading
// dimension, again for degenerate sequences.
template <typename T>
class Tensor {
public:
  Tensor() = default;

  explicit Tensor(std::vector<std::size_t> dims) : dims_(std::move(dims)) {
    validate_dims();
    data_.assign(element_count(), T(0));
  }

  Tensor(std::vector<std::size_t> dims, std::vector<T> data)
      : dims_(std::move(dims)), data_(std::move(data)) {
    validate_dims();
    if (data_.size() != element_count())
      throw DimensionError("tensor data length " + std::to_string(data_.size()) +
                           " does not match shape product " + std::to_string(element_count()));
#ifndef NDEBUG
    check_finite("construction");
#endif
  }

  static Tensor zeros(std::vector<std::size_t> dims) { return Tensor(std::move(dims)); }

  static Tensor full(std::vector<std::size_t> dims, T value) {
    Tensor t(std::move(dims));
    t.fill(value);
    return t;
  }

  static Tensor identity(std::size_t n) {
    Tensor t({n, n});
    for (std::size_t i = 0; i < n; ++i) t(i, i) = T(1);
    return t;
  }

  std::size_t rank() const { return dims_.size(); }
  const std::vector<std::size_t>& dims() const { return dims_; }
  std::size_t dim(std::size_t i) const { return dims_.at(i); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::span<const T> data() const { return data_; }
  std::span<T> data() { return data_; }

  T operator()(std::size_t i) const { return data_[check_index(i)]; }
  T& operator()(std::size_t i) { return data_[check_index(i)]; }
  T operator()(std::size_t i, std::size_t j) const { return data_[offset2(i, j)]; }
  T& operator()(std::size_t i, std::size_t j) { return data_[offset2(i, j)]; }
  T operator()(std::size_t i, std::size_t j, std::size_t k) const { return data_[offset3(i, j, k)]; }
  T& operator()(std::size_t i, std::size_t j, std::size_t k) { return data_[offset3(i, j, k)]; }
  T operator()(std::size_t i, std::size_t j, std::size_t k, std::size_t l) const {
    return data_[offset4(i, j, k, l)];
  }
  T& operator()(std::size_t i, std::size_t j, std::size_t k, std::size_t l) {
    return data_[offset4(i, j, k, l)];
  }

  // Contiguous view of row i of a rank>=2 tensor (all trailing dims flattened).
  std::span<const T> row(std::size_t i) const {
    assert(rank() >= 2 && i < dims_[0]);
    std::size_t stride = size() / dims_[0];
    return std::span<const T>(data_.data() + i * stride, stride);
  }
  std::span<T> row(std::size_t i) {
    assert(rank() >= 2 && i < dims_[0]);
    std::size_t stride = size() / dims_[0];
    return std::span<T>(data_.data() + i * stride, stride);
  }

  void fill(T value) { std::fill(data_.begin(), data_.end(), value); }

  void check_finite(const char* where) const {
    for (const T& v : data_)
      if (!std::isfinite(v))
        throw ArgumentError(std::string("non-finite value after ") + where);
  }

  bool same_shape(const Tensor& other) const { return dims_ == other.dims_; }

private:
  void validate_dims() {
    if (dims_.size() > 4) throw DimensionError("tensor rank > 4");
    for (std::size_t i = 0; i < dims_.size(); ++i)
      if (dims_[i] == 0 && i != 0)
        throw DimensionError("zero extent only allowed on the leading dimension");
  }

  std::size_t element_count() const {
    std::size_t n = 1;
    for (std::size_t d : dims_) n *= d;
    return dims_.empty() ? 0 : n;
  }

  std::size_t check_index(std::size_t i) const {
    assert(rank() == 1 && i < dims_[0]);
    return i;
  }
  std::size_t offset2(std::size_t i, std::size_t j) const {
    assert(rank() == 2 && i < dims_[0] && j < dims_[1]);
    return i * dims_[1] + j;
  }
  std::size_t offset3(std::size_t i, std::size_t j, std::size_t k) const {
    assert(rank() == 3 && i < dims_[0] && j < dims_[1] && k < dims_[2]);
    return (i * dims_[1] + j) * dims_[2] + k;
  }
  std::size_t offset4(std::size_t i, std::size_t j, std::size_t k, std::size_t l) const {
    assert(rank() == 4 && i < dims_[0] && j < dims_[1] && k < dims_[2] && l < dims_[3]);
    return ((i * dims_[1] + j) * dims_[2] + k) * dims_[3] + l;
  }

  std::vector<std::size_t> dims_;
  std::vector<T> data_;
};

// Matrix product with a pinned reduction order: the inner k index always
// ascends, so repeated runs sum in the same order and diff to zero.
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

// Rows scaled to unit L2 norm; rows with norm < eps are divided by eps instead
// (a zero row stays zero).
template <typename T>
Tensor<T> l2_normalize_rows(const Tensor<T>& x, T eps);

template <typename T>
Tensor<T> transpose(const Tensor<T>& a);

// y = W x + b for rank-2 W (m×n), rank-1 x (n). b may be empty.
template <typename T>
void affine_into(const Tensor<T>& w, std::span<const T> x, std::span<const T> b, std::span<T> out);

template <typename T>
T sigmoid(T x) {
  return T(1) / (T(1) + std::exp(-x));
}

template <typename T>
T logit(T p) {
  return std::log(p / (T(1) - p));
}

// Deterministic seeded generator. Engine is std::mt19937_64 (bit-exact across
// platforms per the language standard); the uniform and normal mappings are
// implemented here rather than taken from <random> distributions, whose output
// is implementation-defined. Sub-streams are derived with SplitMix64.
class Rng {
public:
  explicit Rng(std::uint64_t seed) : seed_(seed), engine_(seed) {}

  std::uint64_t seed() const { return seed_; }

  std::uint64_t next_u64() { return engine_(); }

  // 53-bit uniform in [0, 1).
  double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Box-Muller; consumes exactly two uniforms per call.
  double normal() {
    double u1 = 1.0 - uniform();  // (0, 1]
    double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
  }

  // Fixed stream-splitting: child seed = splitmix64(splitmix64(seed) ^ stream).
  Rng split(std::uint64_t stream) const {
    return Rng(splitmix64(splitmix64(seed_) ^ stream));
  }

  template <typename T>
  Tensor<T> uniform_tensor(std::vector<std::size_t> dims, double lo, double hi) {
    Tensor<T> t(std::move(dims));
    for (T& v : t.data()) v = static_cast<T>(uniform(lo, hi));
    return t;
  }

  template <typename T>
  Tensor<T> normal_tensor(std::vector<std::size_t> dims, double sigma = 1.0) {
    Tensor<T> t(std::move(dims));
    for (T& v : t.data()) v = static_cast<T>(sigma * normal());
    return t;
  }

  static std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ull;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
    return x ^ (x >> 31);
  }

private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
};

}  // namespace s2corr
