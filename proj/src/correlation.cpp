#include "s2corr/correlation.hpp"

#include <set>

namespace s2corr {

template <typename T>
FeatureGrid<T>::FeatureGrid(int h, int w, Tensor<T> v) : height(h), width(w), values(std::move(v)) {
  if (height < 1 || width < 1) throw DimensionError("feature grid extents must be >= 1");
  if (values.rank() != 2 || values.dim(0) != std::size_t(height) * std::size_t(width))
    throw DimensionError("feature grid values must be HW x d");
}

template <typename T>
TextEmbeddings<T>::TextEmbeddings(Tensor<T> v, std::vector<std::string> names)
    : values(std::move(v)), class_names(std::move(names)) {
  if (values.rank() != 2) throw DimensionError("text embeddings must be N_C x d");
  if (class_names.size() != values.dim(0))
    throw DimensionError("class_names length must equal N_C");
  std::set<std::string> unique(class_names.begin(), class_names.end());
  if (unique.size() != class_names.size()) throw ArgumentError("class names must be unique");
}

template <typename T>
CorrelationMap<T>::CorrelationMap(int h, int w, Tensor<T> v)
    : height(h), width(w), values(std::move(v)) {
  if (values.rank() != 2 || values.dim(0) != std::size_t(height) * std::size_t(width))
    throw DimensionError("correlation map must be HW x N_C");
}

template <typename T>
CorrelationVolume<T>::CorrelationVolume(int h, int w, Tensor<T> v)
    : height(h), width(w), values(std::move(v)) {
  if (values.rank() != 3 || values.dim(0) != std::size_t(height) * std::size_t(width))
    throw DimensionError("correlation volume must be HW x N_C x d_f");
}

template <typename T>
LiftParams<T> LiftParams<T>::init(int d_f, int n_classes, Rng& rng) {
  const double bound = 1.0 / std::sqrt(double(d_f));
  LiftParams<T> lp;
  lp.p = rng.uniform_tensor<T>({std::size_t(d_f), std::size_t(n_classes)}, -bound, bound);
  return lp;
}

template <typename T>
CorrelationMap<T> initial_correlation(const FeatureGrid<T>& fv, const TextEmbeddings<T>& ft,
                                      T eps) {
  if (fv.dim() != ft.dim())
    throw DimensionError("feature dim mismatch: visual d=" + std::to_string(fv.dim()) +
                         ", text d=" + std::to_string(ft.dim()));
  Tensor<T> vn = l2_normalize_rows(fv.values, eps);
  Tensor<T> tn = l2_normalize_rows(ft.values, eps);
  return CorrelationMap<T>(fv.height, fv.width, matmul(vn, transpose(tn)));
}

template <typename T>
CorrelationVolume<T> lift(const CorrelationMap<T>& c, const LiftParams<T>& params) {
  const int n_c = c.num_classes();
  if (params.num_classes() != n_c)
    throw DimensionError("lift projection has " + std::to_string(params.num_classes()) +
                         " columns, correlation map has " + std::to_string(n_c) + " classes");
  const int d_f = params.feat_dim();
  const std::size_t hw = c.values.dim(0);
  Tensor<T> e({hw, std::size_t(n_c), std::size_t(d_f)});
  for (std::size_t i = 0; i < hw; ++i)
    for (int j = 0; j < n_c; ++j) {
      const T cij = c.values(i, std::size_t(j));
      for (int k = 0; k < d_f; ++k)
        e(i, std::size_t(j), std::size_t(k)) = cij * params.p(std::size_t(k), std::size_t(j));
    }
  return CorrelationVolume<T>(c.height, c.width, std::move(e));
}

template struct FeatureGrid<float>;
template struct FeatureGrid<double>;
template struct TextEmbeddings<float>;
template struct TextEmbeddings<double>;
template struct CorrelationMap<float>;
template struct CorrelationMap<double>;
template struct CorrelationVolume<float>;
template struct CorrelationVolume<double>;
template struct LiftParams<float>;
template struct LiftParams<double>;
template CorrelationMap<float> initial_correlation(const FeatureGrid<float>&,
                                                   const TextEmbeddings<float>&, float);
template CorrelationMap<double> initial_correlation(const FeatureGrid<double>&,
                                                    const TextEmbeddings<double>&, double);
template CorrelationVolume<float> lift(const CorrelationMap<float>&, const LiftParams<float>&);
template CorrelationVolume<double> lift(const CorrelationMap<double>&, const LiftParams<double>&);

}  // namespace s2corr
