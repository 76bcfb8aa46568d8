#pragma once

#include "s2corr/correlation.hpp"
#include "s2corr/scan.hpp"

namespace s2corr {

inline constexpr int kIgnoreLabel = 255;

// Linear maps producing feature-wise (scale, shift) pairs: the first d_f rows
// of the projection give gamma, the last d_f give beta.
template <typename T>
struct ModulationParams {
  Tensor<T> img_proj;  // 2*d_f × d
  Tensor<T> txt_proj;  // 2*d_f × d

  static ModulationParams zeros(int d_f, int d);  // identity modulation
};

// Precomputed domain-prompt embeddings.
template <typename T>
struct DomainTexts {
  Tensor<T> values;  // D × d

  DomainTexts() = default;
  explicit DomainTexts(Tensor<T> v) : values(std::move(v)) {
    if (values.rank() != 2 || values.dim(0) < 1)
      throw DimensionError("domain texts must be D x d with D >= 1");
  }
  int count() const { return int(values.dim(0)); }
  int dim() const { return int(values.dim(1)); }
};

template <typename T>
struct PipelineParams {
  LiftParams<T> lift;
  ModulationParams<T> mod;
  ScanParams<T> spatial_scan;
  ScanParams<T> class_scan;
  Tensor<T> decoder_w;  // 1 × d_f
  Tensor<T> decoder_b;  // scalar, shape [1]
  int blocks = 2;

  int feat_dim() const { return spatial_scan.feat_dim(); }

  static PipelineParams init(int d, int d_f, int n_classes, int heads, T gamma, int blocks,
                             Rng& rng);
  void validate() const;
};

// E_hat[i,j,:] = E[i,j,:] ⊙ (1 + gamma_i) + beta_i, the (gamma_i, beta_i) pair
// projected from the visual feature at position i; identical across classes.
template <typename T>
CorrelationVolume<T> modulate_image(const CorrelationVolume<T>& e, const FeatureGrid<T>& fv,
                                    const ModulationParams<T>& mp);

// The D domain pairs are averaged into one (gamma, beta) before application.
template <typename T>
CorrelationVolume<T> modulate_text(const CorrelationVolume<T>& ctilde, const DomainTexts<T>& dt,
                                   const ModulationParams<T>& mp);

// Per block: image modulation, then the chunked spatial scan independently for
// every class with class-shared parameters. threads parallelizes over classes;
// results are identical to the single-threaded run.
template <typename T>
CorrelationVolume<T> spatial_aggregate(const CorrelationVolume<T>& e, const FeatureGrid<T>& fv,
                                       const PipelineParams<T>& params, const ChunkPlan& plan,
                                       int threads = 1);

// Text modulation, then the sequential scan over the N_C class tokens at each
// position, in canonical class order.
template <typename T>
CorrelationVolume<T> class_aggregate(const CorrelationVolume<T>& ctilde, const DomainTexts<T>& dt,
                                     const PipelineParams<T>& params);

// logits[i,j] = decoder_w · E[i,j,:] + decoder_b
template <typename T>
Tensor<T> decode(const CorrelationVolume<T>& ecls, const PipelineParams<T>& params);

template <typename T>
struct ForwardTrace {
  CorrelationMap<T> corr;
  CorrelationVolume<T> lifted;
  CorrelationVolume<T> post_spatial;
  CorrelationVolume<T> post_class;
  Tensor<T> logits;  // HW × N_C
};

template <typename T>
ForwardTrace<T> forward_trace(const FeatureGrid<T>& fv, const TextEmbeddings<T>& ft,
                              const DomainTexts<T>& dt, const PipelineParams<T>& params,
                              const ChunkPlan& plan, int threads = 1);

template <typename T>
Tensor<T> forward(const FeatureGrid<T>& fv, const TextEmbeddings<T>& ft, const DomainTexts<T>& dt,
                  const PipelineParams<T>& params, const ChunkPlan& plan, int threads = 1);

template <typename T>
struct PipelineGradients {
  Tensor<T> lift_p;
  Tensor<T> img_proj, txt_proj;
  TapeGradients<T> spatial_scan, class_scan;
  Tensor<T> decoder_w, decoder_b;

  static PipelineGradients zeros_like(const PipelineParams<T>& p);
};

template <typename T>
struct LossAndGrads {
  T loss = T(0);
  PipelineGradients<T> grads;
};

// Mean softmax cross-entropy over pixels whose label != 255, with exact
// reverse-mode gradients for every pipeline parameter.
template <typename T>
LossAndGrads<T> forward_backward(const FeatureGrid<T>& fv, const TextEmbeddings<T>& ft,
                                 const DomainTexts<T>& dt, const std::vector<int>& labels,
                                 const PipelineParams<T>& params, const ChunkPlan& plan,
                                 int threads = 1);

}  // namespace s2corr
