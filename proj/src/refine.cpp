#include "s2corr/refine.hpp"

#include <cmath>

#include "s2corr/threading.hpp"

namespace s2corr {

namespace {

// HW×d_f view of one class slice of an HW×N_C×d_f volume.
template <typename T>
Tensor<T> class_slice(const Tensor<T>& vol, int j) {
  const std::size_t hw = vol.dim(0), n_c = vol.dim(1), d = vol.dim(2);
  Tensor<T> out({hw, d});
  const T* src = vol.data().data();
  T* dst = out.data().data();
  for (std::size_t i = 0; i < hw; ++i)
    std::copy(src + (i * n_c + std::size_t(j)) * d, src + (i * n_c + std::size_t(j) + 1) * d,
              dst + i * d);
  return out;
}

template <typename T>
void set_class_slice(Tensor<T>& vol, int j, const Tensor<T>& slice) {
  const std::size_t hw = vol.dim(0), n_c = vol.dim(1), d = vol.dim(2);
  const T* src = slice.data().data();
  T* dst = vol.data().data();
  for (std::size_t i = 0; i < hw; ++i)
    std::copy(src + i * d, src + (i + 1) * d, dst + (i * n_c + std::size_t(j)) * d);
}

// (gamma, beta) for every position, projected from visual features.
template <typename T>
Tensor<T> image_mod_pairs(const FeatureGrid<T>& fv, const ModulationParams<T>& mp) {
  const std::size_t hw = fv.values.dim(0);
  const std::size_t two_df = mp.img_proj.dim(0);
  if (mp.img_proj.dim(1) != fv.values.dim(1))
    throw DimensionError("image modulation projection expects feature dim " +
                         std::to_string(mp.img_proj.dim(1)));
  Tensor<T> pairs({hw, two_df});
  for (std::size_t i = 0; i < hw; ++i)
    affine_into(mp.img_proj, fv.values.row(i), std::span<const T>{}, pairs.row(i));
  return pairs;
}

// Averaged (gamma, beta) over the domain prompts.
template <typename T>
Tensor<T> text_mod_pair(const DomainTexts<T>& dt, const ModulationParams<T>& mp) {
  const std::size_t two_df = mp.txt_proj.dim(0);
  if (mp.txt_proj.dim(1) != dt.values.dim(1))
    throw DimensionError("text modulation projection expects feature dim " +
                         std::to_string(mp.txt_proj.dim(1)));
  Tensor<T> mean({two_df});
  Tensor<T> one({two_df});
  for (int d = 0; d < dt.count(); ++d) {
    affine_into(mp.txt_proj, dt.values.row(std::size_t(d)), std::span<const T>{}, one.data());
    for (std::size_t c = 0; c < two_df; ++c) mean(c) += one(c);
  }
  for (std::size_t c = 0; c < two_df; ++c) mean(c) /= T(dt.count());
  return mean;
}

}  // namespace

template <typename T>
ModulationParams<T> ModulationParams<T>::zeros(int d_f, int d) {
  ModulationParams<T> mp;
  mp.img_proj = Tensor<T>::zeros({2 * std::size_t(d_f), std::size_t(d)});
  mp.txt_proj = Tensor<T>::zeros({2 * std::size_t(d_f), std::size_t(d)});
  return mp;
}

template <typename T>
PipelineParams<T> PipelineParams<T>::init(int d, int d_f, int n_classes, int heads, T gamma,
                                          int blocks, Rng& rng) {
  if (blocks < 1) throw ArgumentError("blocks must be >= 1");
  PipelineParams<T> p;
  p.lift = LiftParams<T>::init(d_f, n_classes, rng);
  p.mod = ModulationParams<T>::zeros(d_f, d);  // start at identity modulation
  p.spatial_scan = ScanParams<T>::init(d_f, heads, gamma, rng);
  p.class_scan = ScanParams<T>::init(d_f, heads, gamma, rng);
  const double bound = 1.0 / std::sqrt(double(d_f));
  p.decoder_w = rng.uniform_tensor<T>({1, std::size_t(d_f)}, -bound, bound);
  p.decoder_b = Tensor<T>::zeros({1});
  p.blocks = blocks;
  return p;
}

template <typename T>
void PipelineParams<T>::validate() const {
  spatial_scan.validate();
  class_scan.validate();
  const int d_f = spatial_scan.feat_dim();
  if (class_scan.feat_dim() != d_f || lift.feat_dim() != d_f)
    throw DimensionError("pipeline stages disagree on d_f");
  if (mod.img_proj.rank() != 2 || int(mod.img_proj.dim(0)) != 2 * d_f ||
      !mod.txt_proj.same_shape(mod.img_proj))
    throw DimensionError("modulation projections must be 2*d_f x d");
  if (decoder_w.rank() != 2 || decoder_w.dim(0) != 1 || int(decoder_w.dim(1)) != d_f ||
      decoder_b.rank() != 1 || decoder_b.dim(0) != 1)
    throw DimensionError("decoder must be 1 x d_f plus scalar bias");
  if (blocks < 1) throw ArgumentError("blocks must be >= 1");
}

template <typename T>
CorrelationVolume<T> modulate_image(const CorrelationVolume<T>& e, const FeatureGrid<T>& fv,
                                    const ModulationParams<T>& mp) {
  if (e.height != fv.height || e.width != fv.width)
    throw DimensionError("modulate_image: grid shapes disagree");
  const std::size_t hw = e.values.dim(0), n_c = e.values.dim(1), d_f = e.values.dim(2);
  if (mp.img_proj.dim(0) != 2 * d_f)
    throw DimensionError("modulate_image: projection rows must be 2*d_f");
  Tensor<T> pairs = image_mod_pairs(fv, mp);
  Tensor<T> out(e.values.dims());
  const T* src = e.values.data().data();
  T* dst = out.data().data();
  for (std::size_t i = 0; i < hw; ++i) {
    const T* gamma = pairs.row(i).data();
    const T* beta = gamma + d_f;
    for (std::size_t j = 0; j < n_c; ++j) {
      const std::size_t off = (i * n_c + j) * d_f;
      for (std::size_t c = 0; c < d_f; ++c)
        dst[off + c] = src[off + c] * (T(1) + gamma[c]) + beta[c];
    }
  }
  return CorrelationVolume<T>(e.height, e.width, std::move(out));
}

template <typename T>
CorrelationVolume<T> modulate_text(const CorrelationVolume<T>& ctilde, const DomainTexts<T>& dt,
                                   const ModulationParams<T>& mp) {
  const std::size_t d_f = ctilde.values.dim(2);
  if (mp.txt_proj.dim(0) != 2 * d_f)
    throw DimensionError("modulate_text: projection rows must be 2*d_f");
  Tensor<T> pair = text_mod_pair(dt, mp);
  const T* gamma = pair.data().data();
  const T* beta = gamma + d_f;
  Tensor<T> out(ctilde.values.dims());
  const T* src = ctilde.values.data().data();
  T* dst = out.data().data();
  const std::size_t n = ctilde.values.size() / d_f;
  for (std::size_t t = 0; t < n; ++t)
    for (std::size_t c = 0; c < d_f; ++c)
      dst[t * d_f + c] = src[t * d_f + c] * (T(1) + gamma[c]) + beta[c];
  return CorrelationVolume<T>(ctilde.height, ctilde.width, std::move(out));
}

template <typename T>
CorrelationVolume<T> spatial_aggregate(const CorrelationVolume<T>& e, const FeatureGrid<T>& fv,
                                       const PipelineParams<T>& params, const ChunkPlan& plan,
                                       int threads) {
  if (plan.height != e.height || plan.width != e.width)
    throw DimensionError("spatial_aggregate: plan grid mismatch");
  const int n_c = e.num_classes();
  CorrelationVolume<T> cur = e;
  for (int b = 0; b < params.blocks; ++b) {
    CorrelationVolume<T> mod = modulate_image(cur, fv, params.mod);
    Tensor<T> next(mod.values.dims());
    parallel_for(n_c, threads, [&](int j) {
      Tensor<T> slice = class_slice(mod.values, j);
      Tensor<T> refined = scan_chunked(slice, plan, params.spatial_scan);
      set_class_slice(next, j, refined);
    });
    cur = CorrelationVolume<T>(e.height, e.width, std::move(next));
  }
  return cur;
}

template <typename T>
CorrelationVolume<T> class_aggregate(const CorrelationVolume<T>& ctilde, const DomainTexts<T>& dt,
                                     const PipelineParams<T>& params) {
  CorrelationVolume<T> mod = modulate_text(ctilde, dt, params.mod);
  const std::size_t hw = mod.values.dim(0), n_c = mod.values.dim(1), d_f = mod.values.dim(2);
  Tensor<T> out(mod.values.dims());
  Tensor<T> h0 = Tensor<T>::zeros({d_f});
  for (std::size_t i = 0; i < hw; ++i) {
    // Class tokens at one position are a contiguous N_C×d_f row.
    auto tokens = mod.values.row(i);
    Tensor<T> xs({n_c, d_f}, std::vector<T>(tokens.begin(), tokens.end()));
    ScanResult<T> res = scan_sequential(xs, h0, params.class_scan, true);
    std::copy(res.outputs.data().begin(), res.outputs.data().end(), out.row(i).begin());
  }
  return CorrelationVolume<T>(ctilde.height, ctilde.width, std::move(out));
}

template <typename T>
Tensor<T> decode(const CorrelationVolume<T>& ecls, const PipelineParams<T>& params) {
  const std::size_t hw = ecls.values.dim(0), n_c = ecls.values.dim(1), d_f = ecls.values.dim(2);
  if (params.decoder_w.dim(1) != d_f) throw DimensionError("decode: decoder width mismatch");
  Tensor<T> logits({hw, n_c});
  const T* w = params.decoder_w.data().data();
  const T b = params.decoder_b(0);
  const T* src = ecls.values.data().data();
  for (std::size_t i = 0; i < hw; ++i)
    for (std::size_t j = 0; j < n_c; ++j) {
      const T* v = src + (i * n_c + j) * d_f;
      T acc = b;
      for (std::size_t c = 0; c < d_f; ++c) acc += w[c] * v[c];
      logits(i, j) = acc;
    }
  return logits;
}

template <typename T>
ForwardTrace<T> forward_trace(const FeatureGrid<T>& fv, const TextEmbeddings<T>& ft,
                              const DomainTexts<T>& dt, const PipelineParams<T>& params,
                              const ChunkPlan& plan, int threads) {
  params.validate();
  ForwardTrace<T> trace;
  trace.corr = initial_correlation(fv, ft);
  trace.lifted = lift(trace.corr, params.lift);
  trace.post_spatial = spatial_aggregate(trace.lifted, fv, params, plan, threads);
  trace.post_class = class_aggregate(trace.post_spatial, dt, params);
  trace.logits = decode(trace.post_class, params);
#ifndef NDEBUG
  trace.corr.values.check_finite("initial_correlation");
  trace.lifted.values.check_finite("lift");
  trace.post_spatial.values.check_finite("spatial_aggregate");
  trace.post_class.values.check_finite("class_aggregate");
  trace.logits.check_finite("decode");
#endif
  return trace;
}

template <typename T>
Tensor<T> forward(const FeatureGrid<T>& fv, const TextEmbeddings<T>& ft, const DomainTexts<T>& dt,
                  const PipelineParams<T>& params, const ChunkPlan& plan, int threads) {
  return forward_trace(fv, ft, dt, params, plan, threads).logits;
}

template <typename T>
PipelineGradients<T> PipelineGradients<T>::zeros_like(const PipelineParams<T>& p) {
  PipelineGradients<T> g;
  g.lift_p = Tensor<T>::zeros(p.lift.p.dims());
  g.img_proj = Tensor<T>::zeros(p.mod.img_proj.dims());
  g.txt_proj = Tensor<T>::zeros(p.mod.txt_proj.dims());
  g.spatial_scan = TapeGradients<T>::zeros_like(p.spatial_scan, {1, std::size_t(p.feat_dim())});
  g.class_scan = TapeGradients<T>::zeros_like(p.class_scan, {1, std::size_t(p.feat_dim())});
  g.decoder_w = Tensor<T>::zeros(p.decoder_w.dims());
  g.decoder_b = Tensor<T>::zeros(p.decoder_b.dims());
  return g;
}

template <typename T>
LossAndGrads<T> forward_backward(const FeatureGrid<T>& fv, const TextEmbeddings<T>& ft,
                                 const DomainTexts<T>& dt, const std::vector<int>& labels,
                                 const PipelineParams<T>& params, const ChunkPlan& plan,
                                 int threads) {
  params.validate();
  const std::size_t hw = std::size_t(fv.positions());
  const int n_c = ft.num_classes();
  if (labels.size() != hw) throw DimensionError("labels must have one entry per position");
  for (int l : labels)
    if (l != kIgnoreLabel && (l < 0 || l >= n_c))
      throw ArgumentError("label " + std::to_string(l) + " outside [0, N_C) and not ignore");

  // Forward, keeping every stage needed by the reverse pass.
  CorrelationMap<T> corr = initial_correlation(fv, ft);
  CorrelationVolume<T> lifted = lift(corr, params.lift);
  std::vector<CorrelationVolume<T>> block_in;   // input of each spatial block
  std::vector<CorrelationVolume<T>> block_mod;  // after image modulation
  CorrelationVolume<T> cur = lifted;
  for (int b = 0; b < params.blocks; ++b) {
    block_in.push_back(cur);
    CorrelationVolume<T> mod = modulate_image(cur, fv, params.mod);
    Tensor<T> next(mod.values.dims());
    parallel_for(n_c, threads, [&](int j) {
      Tensor<T> slice = class_slice(mod.values, j);
      set_class_slice(next, j, scan_chunked(slice, plan, params.spatial_scan));
    });
    block_mod.push_back(std::move(mod));
    cur = CorrelationVolume<T>(fv.height, fv.width, std::move(next));
  }
  CorrelationVolume<T> post_spatial = cur;
  CorrelationVolume<T> text_mod = modulate_text(post_spatial, dt, params.mod);
  const std::size_t d_f = std::size_t(params.feat_dim());
  Tensor<T> post_class(text_mod.values.dims());
  {
    Tensor<T> h0 = Tensor<T>::zeros({d_f});
    for (std::size_t i = 0; i < hw; ++i) {
      auto tokens = text_mod.values.row(i);
      Tensor<T> xs({std::size_t(n_c), d_f}, std::vector<T>(tokens.begin(), tokens.end()));
      ScanResult<T> res = scan_sequential(xs, h0, params.class_scan, true);
      std::copy(res.outputs.data().begin(), res.outputs.data().end(), post_class.row(i).begin());
    }
  }
  CorrelationVolume<T> ecls(fv.height, fv.width, std::move(post_class));
  Tensor<T> logits = decode(ecls, params);

  // Cross-entropy over non-ignored pixels.
  std::size_t valid = 0;
  for (int l : labels)
    if (l != kIgnoreLabel) ++valid;
  if (valid == 0) throw ArgumentError("all pixels carry the ignore label");

  LossAndGrads<T> out;
  out.grads = PipelineGradients<T>::zeros_like(params);
  Tensor<T> d_logits({hw, std::size_t(n_c)});
  T loss = T(0);
  for (std::size_t i = 0; i < hw; ++i) {
    if (labels[i] == kIgnoreLabel) continue;
    auto row = logits.row(i);
    T m = row[0];
    for (T v : row) m = std::max(m, v);
    T sum = T(0);
    for (T v : row) sum += std::exp(v - m);
    const T log_z = m + std::log(sum);
    loss += log_z - row[std::size_t(labels[i])];
    for (int j = 0; j < n_c; ++j) {
      T p = std::exp(row[std::size_t(j)] - log_z);
      d_logits(i, std::size_t(j)) = (p - (j == labels[i] ? T(1) : T(0))) / T(valid);
    }
  }
  out.loss = loss / T(valid);

  // decode: logits[i,j] = w · E[i,j,:] + b
  Tensor<T> d_ecls(ecls.values.dims());
  {
    const T* w = params.decoder_w.data().data();
    const T* e = ecls.values.data().data();
    T* de = d_ecls.data().data();
    T* dw = out.grads.decoder_w.data().data();
    T db = T(0);
    for (std::size_t i = 0; i < hw; ++i)
      for (int j = 0; j < n_c; ++j) {
        const T g = d_logits(i, std::size_t(j));
        const std::size_t off = (i * std::size_t(n_c) + std::size_t(j)) * d_f;
        db += g;
        for (std::size_t c = 0; c < d_f; ++c) {
          de[off + c] = g * w[c];
          dw[c] += g * e[off + c];
        }
      }
    out.grads.decoder_b(0) = db;
  }

  // Class scan, position by position (fixed order keeps accumulation exact).
  Tensor<T> d_textmod(text_mod.values.dims());
  {
    Tensor<T> h0 = Tensor<T>::zeros({d_f});
    for (std::size_t i = 0; i < hw; ++i) {
      auto tokens = text_mod.values.row(i);
      Tensor<T> xs({std::size_t(n_c), d_f}, std::vector<T>(tokens.begin(), tokens.end()));
      auto dy_row = d_ecls.row(i);
      Tensor<T> d_ys({std::size_t(n_c), d_f}, std::vector<T>(dy_row.begin(), dy_row.end()));
      TapeGradients<T> tape =
          scan_backward(xs, h0, params.class_scan, true, d_ys, Tensor<T>());
      out.grads.class_scan.accumulate(tape);
      std::copy(tape.d_input.data().begin(), tape.d_input.data().end(),
                d_textmod.row(i).begin());
    }
  }

  // Text modulation: pairs averaged over domains == projection of the mean.
  Tensor<T> d_postspatial(post_spatial.values.dims());
  {
    Tensor<T> pair = text_mod_pair(dt, params.mod);
    const T* gamma = pair.data().data();
    Tensor<T> d_pair({2 * d_f});
    const T* src = post_spatial.values.data().data();
    const T* dm = d_textmod.data().data();
    T* dst = d_postspatial.data().data();
    const std::size_t n = post_spatial.values.size() / d_f;
    for (std::size_t t = 0; t < n; ++t)
      for (std::size_t c = 0; c < d_f; ++c) {
        const T g = dm[t * d_f + c];
        dst[t * d_f + c] = g * (T(1) + gamma[c]);
        d_pair(c) += g * src[t * d_f + c];
        d_pair(d_f + c) += g;
      }
    Tensor<T> t_mean({std::size_t(dt.dim())});
    for (int d = 0; d < dt.count(); ++d) {
      auto row = dt.values.row(std::size_t(d));
      for (std::size_t c = 0; c < t_mean.dim(0); ++c) t_mean(c) += row[c] / T(dt.count());
    }
    T* dproj = out.grads.txt_proj.data().data();
    const std::size_t dim = t_mean.dim(0);
    for (std::size_t r = 0; r < 2 * d_f; ++r)
      for (std::size_t c = 0; c < dim; ++c) dproj[r * dim + c] += d_pair(r) * t_mean(c);
  }

  // Spatial blocks in reverse.
  Tensor<T> d_block_out = std::move(d_postspatial);
  for (int b = params.blocks - 1; b >= 0; --b) {
    const CorrelationVolume<T>& v_in = block_in[std::size_t(b)];
    const CorrelationVolume<T>& mod = block_mod[std::size_t(b)];
    Tensor<T> d_mod(mod.values.dims());
    std::vector<TapeGradients<T>> per_class(static_cast<std::size_t>(n_c));
    parallel_for(n_c, threads, [&](int j) {
      Tensor<T> slice = class_slice(mod.values, j);
      Tensor<T> d_slice = class_slice(d_block_out, j);
      per_class[std::size_t(j)] =
          scan_chunked_backward(slice, plan, params.spatial_scan, d_slice);
    });
    for (int j = 0; j < n_c; ++j) {
      out.grads.spatial_scan.accumulate(per_class[std::size_t(j)]);
      set_class_slice(d_mod, j, per_class[std::size_t(j)].d_input);
    }

    // Image modulation backward.
    Tensor<T> pairs = image_mod_pairs(fv, params.mod);
    Tensor<T> d_in(v_in.values.dims());
    T* dproj = out.grads.img_proj.data().data();
    const std::size_t dim = fv.values.dim(1);
    std::vector<T> d_pair(2 * d_f);
    for (std::size_t i = 0; i < hw; ++i) {
      const T* gamma = pairs.row(i).data();
      std::fill(d_pair.begin(), d_pair.end(), T(0));
      for (int j = 0; j < n_c; ++j) {
        const std::size_t off = (i * std::size_t(n_c) + std::size_t(j)) * d_f;
        const T* dmv = d_mod.data().data() + off;
        const T* vin = v_in.values.data().data() + off;
        T* din = d_in.data().data() + off;
        for (std::size_t c = 0; c < d_f; ++c) {
          din[c] = dmv[c] * (T(1) + gamma[c]);
          d_pair[c] += dmv[c] * vin[c];
          d_pair[d_f + c] += dmv[c];
        }
      }
      auto f = fv.values.row(i);
      for (std::size_t r = 0; r < 2 * d_f; ++r)
        for (std::size_t c = 0; c < dim; ++c) dproj[r * dim + c] += d_pair[r] * f[c];
    }
    d_block_out = std::move(d_in);
  }

  // Lift: E[i,j,k] = C[i,j] * P[k,j]
  {
    const T* dE = d_block_out.data().data();
    for (std::size_t i = 0; i < hw; ++i)
      for (int j = 0; j < n_c; ++j) {
        const T cij = corr.values(i, std::size_t(j));
        const std::size_t off = (i * std::size_t(n_c) + std::size_t(j)) * d_f;
        for (std::size_t k = 0; k < d_f; ++k)
          out.grads.lift_p(k, std::size_t(j)) += dE[off + k] * cij;
      }
  }
  return out;
}

template struct ModulationParams<float>;
template struct ModulationParams<double>;
template struct DomainTexts<float>;
template struct DomainTexts<double>;
template struct PipelineParams<float>;
template struct PipelineParams<double>;
template struct PipelineGradients<float>;
template struct PipelineGradients<double>;
template CorrelationVolume<float> modulate_image(const CorrelationVolume<float>&,
                                                 const FeatureGrid<float>&,
                                                 const ModulationParams<float>&);
template CorrelationVolume<double> modulate_image(const CorrelationVolume<double>&,
                                                  const FeatureGrid<double>&,
                                                  const ModulationParams<double>&);
template CorrelationVolume<float> modulate_text(const CorrelationVolume<float>&,
                                                const DomainTexts<float>&,
                                                const ModulationParams<float>&);
template CorrelationVolume<double> modulate_text(const CorrelationVolume<double>&,
                                                 const DomainTexts<double>&,
                                                 const ModulationParams<double>&);
template CorrelationVolume<float> spatial_aggregate(const CorrelationVolume<float>&,
                                                    const FeatureGrid<float>&,
                                                    const PipelineParams<float>&,
                                                    const ChunkPlan&, int);
template CorrelationVolume<double> spatial_aggregate(const CorrelationVolume<double>&,
                                                     const FeatureGrid<double>&,
                                                     const PipelineParams<double>&,
                                                     const ChunkPlan&, int);
template CorrelationVolume<float> class_aggregate(const CorrelationVolume<float>&,
                                                  const DomainTexts<float>&,
                                                  const PipelineParams<float>&);
template CorrelationVolume<double> class_aggregate(const CorrelationVolume<double>&,
                                                   const DomainTexts<double>&,
                                                   const PipelineParams<double>&);
template Tensor<float> decode(const CorrelationVolume<float>&, const PipelineParams<float>&);
template Tensor<double> decode(const CorrelationVolume<double>&, const PipelineParams<double>&);
template ForwardTrace<float> forward_trace(const FeatureGrid<float>&, const TextEmbeddings<float>&,
                                           const DomainTexts<float>&,
                                           const PipelineParams<float>&, const ChunkPlan&, int);
template ForwardTrace<double> forward_trace(const FeatureGrid<double>&,
                                            const TextEmbeddings<double>&,
                                            const DomainTexts<double>&,
                                            const PipelineParams<double>&, const ChunkPlan&, int);
template Tensor<float> forward(const FeatureGrid<float>&, const TextEmbeddings<float>&,
                               const DomainTexts<float>&, const PipelineParams<float>&,
                               const ChunkPlan&, int);
template Tensor<double> forward(const FeatureGrid<double>&, const TextEmbeddings<double>&,
                                const DomainTexts<double>&, const PipelineParams<double>&,
                                const ChunkPlan&, int);
template LossAndGrads<float> forward_backward(const FeatureGrid<float>&,
                                              const TextEmbeddings<float>&,
                                              const DomainTexts<float>&, const std::vector<int>&,
                                              const PipelineParams<float>&, const ChunkPlan&, int);
template LossAndGrads<double> forward_backward(const FeatureGrid<double>&,
                                               const TextEmbeddings<double>&,
                                               const DomainTexts<double>&, const std::vector<int>&,
                                               const PipelineParams<double>&, const ChunkPlan&,
                                               int);

}  // namespace s2corr
