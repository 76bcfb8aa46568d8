#pragma once

#include <cmath>
#include <vector>

#include "s2corr/refine.hpp"

namespace s2corr {

struct AdamWConfig {
  double lr = 2e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-4;
};

// Decoupled weight decay Adam. Slots are keyed by position in the param list,
// which must stay stable across steps.
template <typename T>
class AdamW {
public:
  explicit AdamW(AdamWConfig cfg) : cfg_(cfg) {}

  void step(const std::vector<Tensor<T>*>& params, const std::vector<const Tensor<T>*>& grads) {
    if (params.size() != grads.size()) throw ArgumentError("param/grad count mismatch");
    if (m_.empty()) {
      for (const Tensor<T>* g : grads) {
        m_.push_back(Tensor<T>::zeros(g->dims()));
        v_.push_back(Tensor<T>::zeros(g->dims()));
      }
    }
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, double(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, double(t_));
    for (std::size_t s = 0; s < params.size(); ++s) {
      auto p = params[s]->data();
      auto g = grads[s]->data();
      auto m = m_[s].data();
      auto v = v_[s].data();
      for (std::size_t i = 0; i < p.size(); ++i) {
        m[i] = T(cfg_.beta1) * m[i] + T(1.0 - cfg_.beta1) * g[i];
        v[i] = T(cfg_.beta2) * v[i] + T(1.0 - cfg_.beta2) * g[i] * g[i];
        const double mhat = double(m[i]) / bc1;
        const double vhat = double(v[i]) / bc2;
        p[i] -= T(cfg_.lr * (mhat / (std::sqrt(vhat) + cfg_.eps) + cfg_.weight_decay * double(p[i])));
      }
    }
  }

private:
  AdamWConfig cfg_;
  long t_ = 0;
  std::vector<Tensor<T>> m_, v_;
};

// Fixed traversal of the trainable pipeline tensors; gradient_tensors yields
// the matching order.
template <typename T>
std::vector<Tensor<T>*> trainable_params(PipelineParams<T>& p) {
  return {&p.lift.p,
          &p.mod.img_proj,
          &p.mod.txt_proj,
          &p.spatial_scan.w_a,
          &p.spatial_scan.b_a,
          &p.spatial_scan.w_b,
          &p.spatial_scan.b_b,
          &p.spatial_scan.w_out,
          &p.spatial_scan.u_out,
          &p.spatial_scan.gamma_logits,
          &p.spatial_scan.mix_w,
          &p.class_scan.w_a,
          &p.class_scan.b_a,
          &p.class_scan.w_b,
          &p.class_scan.b_b,
          &p.class_scan.w_out,
          &p.class_scan.u_out,
          &p.class_scan.gamma_logits,
          &p.class_scan.mix_w,
          &p.decoder_w,
          &p.decoder_b};
}

template <typename T>
std::vector<const Tensor<T>*> gradient_tensors(const PipelineGradients<T>& g) {
  return {&g.lift_p,
          &g.img_proj,
          &g.txt_proj,
          &g.spatial_scan.w_a,
          &g.spatial_scan.b_a,
          &g.spatial_scan.w_b,
          &g.spatial_scan.b_b,
          &g.spatial_scan.w_out,
          &g.spatial_scan.u_out,
          &g.spatial_scan.gamma_logits,
          &g.spatial_scan.mix_w,
          &g.class_scan.w_a,
          &g.class_scan.b_a,
          &g.class_scan.w_b,
          &g.class_scan.b_b,
          &g.class_scan.w_out,
          &g.class_scan.u_out,
          &g.class_scan.gamma_logits,
          &g.class_scan.mix_w,
          &g.decoder_w,
          &g.decoder_b};
}

}  // namespace s2corr
