#pragma once

#include <string>
#include <vector>

#include "s2corr/tensor.hpp"

namespace s2corr {

// Per-position visual features over an H×W token grid, row-major flattened.
template <typename T>
struct FeatureGrid {
  int height = 0;
  int width = 0;
  Tensor<T> values;  // HW × d

  FeatureGrid() = default;
  FeatureGrid(int h, int w, Tensor<T> v);

  int positions() const { return height * width; }
  int dim() const { return int(values.dim(1)); }
};

// Class text embeddings; class_names order is the canonical class order for
// every downstream class scan.
template <typename T>
struct TextEmbeddings {
  Tensor<T> values;  // N_C × d
  std::vector<std::string> class_names;

  TextEmbeddings() = default;
  TextEmbeddings(Tensor<T> v, std::vector<std::string> names);

  int num_classes() const { return int(values.dim(0)); }
  int dim() const { return int(values.dim(1)); }
};

template <typename T>
struct CorrelationMap {
  int height = 0;
  int width = 0;
  Tensor<T> values;  // HW × N_C

  CorrelationMap() = default;
  CorrelationMap(int h, int w, Tensor<T> v);

  int num_classes() const { return int(values.dim(1)); }
};

// The lifted correlation embeddings; successive refinement stages all live in
// this shape.
template <typename T>
struct CorrelationVolume {
  int height = 0;
  int width = 0;
  Tensor<T> values;  // HW × N_C × d_f

  CorrelationVolume() = default;
  CorrelationVolume(int h, int w, Tensor<T> v);

  int positions() const { return height * width; }
  int num_classes() const { return int(values.dim(1)); }
  int feat_dim() const { return int(values.dim(2)); }
};

template <typename T>
struct LiftParams {
  Tensor<T> p;  // d_f × N_C, column j lifts class j

  int feat_dim() const { return int(p.dim(0)); }
  int num_classes() const { return int(p.dim(1)); }

  // i.i.d. uniform in [-1/sqrt(d_f), +1/sqrt(d_f)].
  static LiftParams init(int d_f, int n_classes, Rng& rng);
};

inline constexpr double kNormEps = 1e-8;

// C = Norm(F_v) · Norm(F_t)^T with cosine normalization of both operands.
template <typename T>
CorrelationMap<T> initial_correlation(const FeatureGrid<T>& fv, const TextEmbeddings<T>& ft,
                                      T eps = T(kNormEps));

// E[i,j,:] = C[i,j] * P[:,j]
template <typename T>
CorrelationVolume<T> lift(const CorrelationMap<T>& c, const LiftParams<T>& params);

}  // namespace s2corr
