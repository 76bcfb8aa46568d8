#include "s2corr/tensor.hpp"

#include <algorithm>

namespace s2corr {

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2)
    throw DimensionError("matmul expects rank-2 operands");
  if (a.dim(1) != b.dim(0))
    throw DimensionError("matmul inner extents differ: " + std::to_string(a.dim(1)) + " vs " +
                         std::to_string(b.dim(0)));
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor<T> c({m, n});
  const T* ap = a.data().data();
  const T* bp = b.data().data();
  T* cp = c.data().data();
  // ikj order: cache-friendly and k still ascends for every output entry.
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t kk = 0; kk < k; ++kk) {
      const T aik = ap[i * k + kk];
      const T* brow = bp + kk * n;
      T* crow = cp + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += aik * brow[j];
    }
  }
#ifndef NDEBUG
  c.check_finite("matmul");
#endif
  return c;
}

template <typename T>
Tensor<T> l2_normalize_rows(const Tensor<T>& x, T eps) {
  if (x.rank() != 2) throw DimensionError("l2_normalize_rows expects rank-2 input");
  if (!(eps > T(0))) throw ArgumentError("l2_normalize_rows requires eps > 0");
  Tensor<T> out({x.dim(0), x.dim(1)});
  for (std::size_t i = 0; i < x.dim(0); ++i) {
    auto src = x.row(i);
    auto dst = out.row(i);
    T sq = T(0);
    for (T v : src) sq += v * v;
    T norm = std::sqrt(sq);
    T denom = std::max(norm, eps);
    for (std::size_t j = 0; j < src.size(); ++j) dst[j] = src[j] / denom;
  }
  return out;
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& a) {
  if (a.rank() != 2) throw DimensionError("transpose expects rank-2 input");
  Tensor<T> out({a.dim(1), a.dim(0)});
  for (std::size_t i = 0; i < a.dim(0); ++i)
    for (std::size_t j = 0; j < a.dim(1); ++j) out(j, i) = a(i, j);
  return out;
}

template <typename T>
void affine_into(const Tensor<T>& w, std::span<const T> x, std::span<const T> b,
                 std::span<T> out) {
  if (w.rank() != 2 || w.dim(1) != x.size() || w.dim(0) != out.size())
    throw DimensionError("affine_into shape mismatch");
  if (!b.empty() && b.size() != out.size())
    throw DimensionError("affine_into bias size mismatch");
  const std::size_t m = w.dim(0), n = w.dim(1);
  const T* wp = w.data().data();
  for (std::size_t i = 0; i < m; ++i) {
    T acc = b.empty() ? T(0) : b[i];
    const T* wrow = wp + i * n;
    for (std::size_t j = 0; j < n; ++j) acc += wrow[j] * x[j];
    out[i] = acc;
  }
}

template Tensor<float> matmul(const Tensor<float>&, const Tensor<float>&);
template Tensor<double> matmul(const Tensor<double>&, const Tensor<double>&);
template Tensor<float> l2_normalize_rows(const Tensor<float>&, float);
template Tensor<double> l2_normalize_rows(const Tensor<double>&, double);
template Tensor<float> transpose(const Tensor<float>&);
template Tensor<double> transpose(const Tensor<double>&);
template void affine_into(const Tensor<float>&, std::span<const float>, std::span<const float>,
                          std::span<float>);
template void affine_into(const Tensor<double>&, std::span<const double>, std::span<const double>,
                          std::span<double>);

}  // namespace s2corr
