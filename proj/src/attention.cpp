#include "s2corr/attention.hpp"

#include <algorithm>
#include <cmath>

namespace s2corr {

namespace {

// C[n×m] = A[n×k] · B[k×m], accumulating k in ascending order per entry.
template <typename T>
void ikj_matmul(const T* __restrict a, const T* __restrict b, T* __restrict c, std::size_t n,
                std::size_t k, std::size_t m) {
  std::fill(c, c + n * m, T(0));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t kk = 0; kk < k; ++kk) {
      const T aik = a[i * k + kk];
      const T* __restrict brow = b + kk * m;
      T* __restrict crow = c + i * m;
      for (std::size_t j = 0; j < m; ++j) crow[j] += aik * brow[j];
    }
}

template <typename T>
std::vector<T> transposed(const Tensor<T>& w) {
  const std::size_t d = w.dim(0);
  std::vector<T> out(d * d);
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = 0; j < d; ++j) out[j * d + i] = w(i, j);
  return out;
}

template <typename T>
void softmax_inplace(std::span<T> scores) {
  T m = scores[0];
  for (T v : scores) m = std::max(m, v);
  T sum = T(0);
  for (T& v : scores) {
    v = std::exp(v - m);
    sum += v;
  }
  for (T& v : scores) v /= sum;
}

}  // namespace

template <typename T>
AttnParams<T> AttnParams<T>::init(int d_f, int window, Rng& rng) {
  if (window < 0) throw ArgumentError("window radius must be >= 0");
  const double bound = 1.0 / std::sqrt(double(d_f));
  auto mat = [&] {
    return rng.uniform_tensor<T>({std::size_t(d_f), std::size_t(d_f)}, -bound, bound);
  };
  AttnParams<T> p;
  p.spatial_wq = mat();
  p.spatial_wk = mat();
  p.spatial_wv = mat();
  p.class_wq = mat();
  p.class_wk = mat();
  p.class_wv = mat();
  p.window = window;
  return p;
}

template <typename T>
CorrelationVolume<T> spatial_attention(const CorrelationVolume<T>& e, const AttnParams<T>& p) {
  const int h = e.height, w = e.width, n_c = e.num_classes(), d = e.feat_dim();
  if (p.feat_dim() != d) throw DimensionError("spatial_attention: d_f mismatch");
  const std::size_t dd = std::size_t(d);
  const int r = p.window;
  Tensor<T> out(e.values.dims());

  const std::vector<T> wq_t = transposed(p.spatial_wq);
  const std::vector<T> wk_t = transposed(p.spatial_wk);
  const std::vector<T> wv_t = transposed(p.spatial_wv);

  // Per class: project the whole slice once, then window per query.
  std::vector<T> slice(std::size_t(h) * w * dd);
  std::vector<T> q(slice.size()), k(slice.size()), v(slice.size());
  std::vector<T> scores;
  for (int j = 0; j < n_c; ++j) {
    for (int i = 0; i < h * w; ++i) {
      const T* src = e.values.data().data() + (std::size_t(i) * n_c + j) * dd;
      std::copy(src, src + dd, slice.begin() + std::size_t(i) * dd);
    }
    ikj_matmul(slice.data(), wq_t.data(), q.data(), std::size_t(h) * w, dd, dd);
    ikj_matmul(slice.data(), wk_t.data(), k.data(), std::size_t(h) * w, dd, dd);
    ikj_matmul(slice.data(), wv_t.data(), v.data(), std::size_t(h) * w, dd, dd);
    const T scale = T(1) / std::sqrt(T(d));
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        const int qi = y * w + x;
        const int y0 = std::max(0, y - r), y1 = std::min(h - 1, y + r);
        const int x0 = std::max(0, x - r), x1 = std::min(w - 1, x + r);
        const int count = (y1 - y0 + 1) * (x1 - x0 + 1);
        scores.assign(std::size_t(count), T(0));
        int idx = 0;
        for (int ny = y0; ny <= y1; ++ny)
          for (int nx = x0; nx <= x1; ++nx) {
            const T* kp = k.data() + std::size_t(ny * w + nx) * dd;
            const T* qp = q.data() + std::size_t(qi) * dd;
            T s = T(0);
            for (std::size_t c = 0; c < dd; ++c) s += qp[c] * kp[c];
            scores[idx++] = s * scale;
          }
        softmax_inplace(std::span<T>(scores));
        T* dst = out.data().data() + (std::size_t(qi) * n_c + j) * dd;
        std::fill(dst, dst + dd, T(0));
        idx = 0;
        for (int ny = y0; ny <= y1; ++ny)
          for (int nx = x0; nx <= x1; ++nx) {
            const T wgt = scores[idx++];
            const T* vp = v.data() + std::size_t(ny * w + nx) * dd;
            for (std::size_t c = 0; c < dd; ++c) dst[c] += wgt * vp[c];
          }
      }
  }
  return CorrelationVolume<T>(h, w, std::move(out));
}

template <typename T>
CorrelationVolume<T> class_attention(const CorrelationVolume<T>& e, const AttnParams<T>& p) {
  const int n_pos = e.positions(), n_c = e.num_classes(), d = e.feat_dim();
  if (p.feat_dim() != d) throw DimensionError("class_attention: d_f mismatch");
  const std::size_t dd = std::size_t(d), nn = std::size_t(n_c);
  Tensor<T> out(e.values.dims());

  // Scores reassociate as (Wq x_j).(Wk x_l) = x_j^T (Wq^T Wk) x_l, so one
  // fused pass [Y|V] = X [Wq^T Wk | Wv^T] over the whole (HW*N_C) x d_f token
  // matrix covers the per-token linear work; attention then runs per
  // position. Scratch is thread_local so repeated calls stay on warm pages.
  std::vector<T> fused(dd * 2 * dd);
  for (std::size_t i = 0; i < dd; ++i)
    for (std::size_t j = 0; j < dd; ++j) {
      T m = T(0);
      for (std::size_t c = 0; c < dd; ++c) m += p.class_wq(c, i) * p.class_wk(c, j);
      fused[i * 2 * dd + j] = m;                      // (Wq^T Wk)[i,j]
      fused[i * 2 * dd + dd + j] = p.class_wv(j, i);  // (Wv^T)[i,j]
    }
  const std::size_t total = std::size_t(n_pos) * nn;
  thread_local std::vector<T> yv;
  thread_local std::vector<T> scores;
  yv.resize(total * 2 * dd);
  scores.resize(nn * nn);
  ikj_matmul(e.values.data().data(), fused.data(), yv.data(), total, dd, 2 * dd);
  const T scale = T(1) / std::sqrt(T(d));
  for (int i = 0; i < n_pos; ++i) {
    const T* tokens = e.values.data().data() + std::size_t(i) * nn * dd;
    const T* block = yv.data() + std::size_t(i) * nn * 2 * dd;  // rows [y|v]
    // S[j,l] = y_j . x_l, one dot per token pair
    for (std::size_t j = 0; j < nn; ++j) {
      const T* yrow = block + j * 2 * dd;
      T* srow = scores.data() + j * nn;
      for (std::size_t l = 0; l < nn; ++l) {
        const T* xrow = tokens + l * dd;
        T s = T(0);
        for (std::size_t c = 0; c < dd; ++c) s += yrow[c] * xrow[c];
        srow[l] = s * scale;
      }
      softmax_inplace(std::span<T>(srow, nn));
    }
    // out_j = sum_l S[j,l] v_l
    T* __restrict dst = out.data().data() + std::size_t(i) * nn * dd;
    std::fill(dst, dst + nn * dd, T(0));
    for (std::size_t j = 0; j < nn; ++j) {
      const T* __restrict srow = scores.data() + j * nn;
      T* __restrict orow = dst + j * dd;
      for (std::size_t l = 0; l < nn; ++l) {
        const T wgt = srow[l];
        const T* __restrict vrow = block + l * 2 * dd + dd;
        for (std::size_t c = 0; c < dd; ++c) orow[c] += wgt * vrow[c];
      }
    }
  }
  return CorrelationVolume<T>(e.height, e.width, std::move(out));
}

template struct AttnParams<float>;
template struct AttnParams<double>;
template CorrelationVolume<float> spatial_attention(const CorrelationVolume<float>&,
                                                    const AttnParams<float>&);
template CorrelationVolume<double> spatial_attention(const CorrelationVolume<double>&,
                                                     const AttnParams<double>&);
template CorrelationVolume<float> class_attention(const CorrelationVolume<float>&,
                                                  const AttnParams<float>&);
template CorrelationVolume<double> class_attention(const CorrelationVolume<double>&,
                                                   const AttnParams<double>&);

}  // namespace s2corr
