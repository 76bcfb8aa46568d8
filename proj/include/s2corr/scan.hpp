#pragma once

#include <algorithm>
#include <vector>

#include "s2corr/tensor.hpp"

namespace s2corr {

// Learnable quantities of the selective scan. The transition is purely
// diagonal (elementwise); the decay prior is held as logits so optimizer steps
// cannot push it out of (0,1). Channel c belongs to head c*K/d_f.
template <typename T>
struct ScanParams {
  Tensor<T> w_a, b_a;        // decay-gate projection, d_f×d_f and d_f
  Tensor<T> w_b, b_b;        // input-gate projection
  Tensor<T> w_out, u_out;    // state output map and skip map, d_f×d_f each
  Tensor<T> gamma_logits;    // K, decay prior = sigmoid(gamma_logits)
  Tensor<T> mix_w;           // K, pre-sigmoid mixing logits
  int heads = 1;

  int feat_dim() const { return int(b_a.dim(0)); }
  int head_of(int channel) const { return channel * heads / feat_dim(); }

  Tensor<T> gamma_prior() const {
    Tensor<T> g({std::size_t(heads)});
    for (int k = 0; k < heads; ++k) g(k) = sigmoid(gamma_logits(k));
    return g;
  }

  // Gate projections ~ U[-1/sqrt(d_f), 1/sqrt(d_f)], b_a = +1 (remember bias),
  // b_b = 0, prior at gamma, mix logits 0 (even blend).
  static ScanParams init(int d_f, int heads, T gamma, Rng& rng);

  void validate() const;
};

template <typename T>
struct GatePair {
  Tensor<T> decay;  // A_t
  Tensor<T> input;  // B_t
};

// A_t = sigmoid(W_a x + b_a), B_t = sigmoid(W_b x + b_b).
template <typename T>
GatePair<T> gates(const Tensor<T>& x, const ScanParams<T>& p);

// Per channel c in head k: sigmoid(mix_w[k])*A[c] + (1-sigmoid(mix_w[k]))*gamma[k].
template <typename T>
Tensor<T> effective_decay(const Tensor<T>& decay_gate, const ScanParams<T>& p);

template <typename T>
struct ScanResult {
  Tensor<T> outputs;      // T_len × d_f (empty-leading-extent when input is empty)
  Tensor<T> final_state;  // d_f
};

// Exact left-to-right recurrence h_t = A_eff ⊙ h_{t-1} + B ⊙ x_t,
// y_t = W_out h_t + U_out x_t. With use_decay_prior=false the raw gate A_t is
// used instead of the blended A_eff.
template <typename T>
ScanResult<T> scan_sequential(const Tensor<T>& xs, const Tensor<T>& h0, const ScanParams<T>& p,
                              bool use_decay_prior);

// Deterministic chunk layout over an H×W grid. Chunks never span rows; with
// snake=true odd rows are traversed right-to-left (full within-chunk reversal,
// chunk order reversed with them). eta_cross scales the state carried across a
// row boundary; within a row the handoff is the identity.
struct ChunkPlan {
  int height = 0;
  int width = 0;
  int chunk_len = 0;
  int requested_len = 0;  // before divisor clamping
  bool clamped = false;
  double eta_cross = 1.0;
  bool snake = false;
  std::vector<int> order;  // traversal order as row-major grid indices, size H*W

  int chunks_per_row() const { return width / chunk_len; }
  int chunk_count() const { return height * chunks_per_row(); }
  bool chunk_starts_row(int chunk) const { return chunk % chunks_per_row() == 0; }
  std::vector<int> chunk_tokens(int chunk) const;
};

// chunk_len that does not divide W is clamped to the largest divisor of W
// that is <= chunk_len (1 in the worst case); the clamp is flagged in the plan.
ChunkPlan build_chunk_plan(int height, int width, int chunk_len, double eta_cross, bool snake);

// Total-chunk-count reading: n chunks over the whole grid map to L = HW/n
// (before divisor clamping).
inline int chunk_len_for_total(int height, int width, int total_chunks) {
  if (total_chunks < 1) throw ArgumentError("total chunk count must be >= 1");
  return std::max(1, height * width / total_chunks);
}

// Runs the decayed recurrence chunk by chunk in plan order, carrying the end
// state into the next chunk (scaled by eta_cross at row starts). Input rows
// are grid row-major; outputs come back in grid order.
template <typename T>
Tensor<T> scan_chunked(const Tensor<T>& xs, const ChunkPlan& plan, const ScanParams<T>& p);

// Gradients mirrored to ScanParams shapes plus the input/initial-state terms.
// eta_cross is populated only by the chunked backward.
template <typename T>
struct TapeGradients {
  Tensor<T> w_a, b_a, w_b, b_b, w_out, u_out, gamma_logits, mix_w;
  T eta_cross = T(0);
  Tensor<T> d_input;  // same shape as xs
  Tensor<T> d_h0;     // d_f

  static TapeGradients zeros_like(const ScanParams<T>& p, const std::vector<std::size_t>& xs_dims);
  void accumulate(const TapeGradients& other);
  T max_abs() const;
};

// Exact reverse-mode gradients of a scalar loss given its gradients w.r.t.
// every output and the final state. Forward quantities are recomputed from xs.
template <typename T>
TapeGradients<T> scan_backward(const Tensor<T>& xs, const Tensor<T>& h0, const ScanParams<T>& p,
                               bool use_decay_prior, const Tensor<T>& d_outputs,
                               const Tensor<T>& d_final_state);

// Reverse-mode through scan_chunked (d_outputs in grid order).
template <typename T>
TapeGradients<T> scan_chunked_backward(const Tensor<T>& xs, const ChunkPlan& plan,
                                       const ScanParams<T>& p, const Tensor<T>& d_outputs);

// Elementwise product of A_eff over steps t-d+1..t (1-based steps); equals the
// diagonal Jacobian of h_t w.r.t. h_{t-d}.
template <typename T>
Tensor<T> influence(const Tensor<T>& xs, const ScanParams<T>& p, int t, int d);

}  // namespace s2corr
