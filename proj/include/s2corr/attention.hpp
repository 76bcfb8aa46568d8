#pragma once

#include "s2corr/correlation.hpp"

namespace s2corr {

// Single-head q/k/v attention used as the comparison arm: windowed over space,
// dense over classes. Scores are scaled by 1/sqrt(d_f).
template <typename T>
struct AttnParams {
  Tensor<T> spatial_wq, spatial_wk, spatial_wv;  // d_f × d_f
  Tensor<T> class_wq, class_wk, class_wv;
  int window = 1;  // spatial radius r; the neighborhood is the clipped (2r+1)^2 square

  int feat_dim() const { return int(spatial_wq.dim(0)); }

  static AttnParams init(int d_f, int window, Rng& rng);
};

// Per class, softmax attention of each position over its spatial neighborhood.
template <typename T>
CorrelationVolume<T> spatial_attention(const CorrelationVolume<T>& e, const AttnParams<T>& p);

// Per position, dense softmax attention over all class tokens.
template <typename T>
CorrelationVolume<T> class_attention(const CorrelationVolume<T>& e, const AttnParams<T>& p);

}  // namespace s2corr
