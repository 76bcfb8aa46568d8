#include "s2corr/scan.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace s2corr {

template <typename T>
ScanParams<T> ScanParams<T>::init(int d_f, int heads, T gamma, Rng& rng) {
  if (d_f < 1 || heads < 1 || d_f % heads != 0)
    throw ArgumentError("heads must divide d_f");
  if (!(gamma > T(0) && gamma < T(1)))
    throw ArgumentError("gamma prior must lie in (0,1)");
  const double bound = 1.0 / std::sqrt(double(d_f));
  ScanParams<T> p;
  p.heads = heads;
  p.w_a = rng.uniform_tensor<T>({std::size_t(d_f), std::size_t(d_f)}, -bound, bound);
  p.w_b = rng.uniform_tensor<T>({std::size_t(d_f), std::size_t(d_f)}, -bound, bound);
  p.w_out = rng.uniform_tensor<T>({std::size_t(d_f), std::size_t(d_f)}, -bound, bound);
  p.u_out = rng.uniform_tensor<T>({std::size_t(d_f), std::size_t(d_f)}, -bound, bound);
  p.b_a = Tensor<T>::full({std::size_t(d_f)}, T(1));
  p.b_b = Tensor<T>::zeros({std::size_t(d_f)});
  p.gamma_logits = Tensor<T>::full({std::size_t(heads)}, logit(gamma));
  p.mix_w = Tensor<T>::zeros({std::size_t(heads)});
  return p;
}

template <typename T>
void ScanParams<T>::validate() const {
  const std::size_t d = b_a.dim(0);
  if (w_a.rank() != 2 || w_a.dim(0) != d || w_a.dim(1) != d || !w_b.same_shape(w_a) ||
      !w_out.same_shape(w_a) || !u_out.same_shape(w_a) || !b_b.same_shape(b_a))
    throw DimensionError("scan parameter shapes inconsistent");
  if (heads < 1 || int(d) % heads != 0) throw DimensionError("heads must divide d_f");
  if (gamma_logits.rank() != 1 || gamma_logits.dim(0) != std::size_t(heads) ||
      !mix_w.same_shape(gamma_logits))
    throw DimensionError("gamma/mix tensors must have one entry per head");
}

template <typename T>
GatePair<T> gates(const Tensor<T>& x, const ScanParams<T>& p) {
  const std::size_t d = p.b_a.dim(0);
  if (x.rank() != 1 || x.dim(0) != d) throw DimensionError("gate input must be a d_f vector");
  GatePair<T> g{Tensor<T>({d}), Tensor<T>({d})};
  affine_into(p.w_a, x.data(), p.b_a.data(), g.decay.data());
  affine_into(p.w_b, x.data(), p.b_b.data(), g.input.data());
  for (T& v : g.decay.data()) v = sigmoid(v);
  for (T& v : g.input.data()) v = sigmoid(v);
  return g;
}

template <typename T>
Tensor<T> effective_decay(const Tensor<T>& decay_gate, const ScanParams<T>& p) {
  const int d = p.feat_dim();
  if (decay_gate.rank() != 1 || int(decay_gate.dim(0)) != d)
    throw DimensionError("effective_decay input must be a d_f vector");
  Tensor<T> out({std::size_t(d)});
  for (int c = 0; c < d; ++c) {
    const int k = p.head_of(c);
    const T m = sigmoid(p.mix_w(k));
    const T g = sigmoid(p.gamma_logits(k));
    out(c) = m * decay_gate(c) + (T(1) - m) * g;
  }
  return out;
}

namespace {

// Shared forward core over an arbitrary traversal. row_scale_period > 0 turns
// on the cross-row handoff: the carried state is multiplied by eta at every
// step index that is a positive multiple of the period.
template <typename T>
struct ForwardTape {
  Tensor<T> h;       // T_len × d_f, state after each step
  Tensor<T> a_gate;  // raw decay gates
  Tensor<T> b_gate;
  Tensor<T> a_eff;
};

template <typename T>
void run_forward(std::span<const T> xs, std::size_t t_len, const Tensor<T>& h0,
                 const ScanParams<T>& p, bool use_prior, int row_scale_period, T eta,
                 ForwardTape<T>& tape, Tensor<T>& ys, Tensor<T>& h_end) {
  const int d = p.feat_dim();
  const std::size_t dd = std::size_t(d);
  tape.h = Tensor<T>({t_len, dd});
  tape.a_gate = Tensor<T>({t_len, dd});
  tape.b_gate = Tensor<T>({t_len, dd});
  tape.a_eff = Tensor<T>({t_len, dd});
  ys = Tensor<T>({t_len, dd});

  std::vector<T> mix(std::size_t(p.heads)), gam(std::size_t(p.heads));
  for (int k = 0; k < p.heads; ++k) {
    mix[k] = sigmoid(p.mix_w(k));
    gam[k] = sigmoid(p.gamma_logits(k));
  }

  std::vector<T> h_prev(h0.data().begin(), h0.data().end());
  for (std::size_t t = 0; t < t_len; ++t) {
    if (row_scale_period > 0 && t > 0 && t % std::size_t(row_scale_period) == 0)
      for (T& v : h_prev) v *= eta;
    std::span<const T> x(xs.data() + t * dd, dd);
    auto a = tape.a_gate.row(t);
    auto b = tape.b_gate.row(t);
    auto ae = tape.a_eff.row(t);
    auto h = tape.h.row(t);
    affine_into(p.w_a, x, p.b_a.data(), a);
    affine_into(p.w_b, x, p.b_b.data(), b);
    for (int c = 0; c < d; ++c) {
      a[c] = sigmoid(a[c]);
      b[c] = sigmoid(b[c]);
      const int k = c * p.heads / d;
      ae[c] = use_prior ? mix[k] * a[c] + (T(1) - mix[k]) * gam[k] : a[c];
      h[c] = ae[c] * h_prev[c] + b[c] * x[c];
      h_prev[c] = h[c];
    }
    affine_into(p.w_out, std::span<const T>(h), std::span<const T>{}, ys.row(t));
    auto y = ys.row(t);
    const T* up = p.u_out.data().data();
    for (int i = 0; i < d; ++i) {
      T acc = y[i];
      const T* urow = up + std::size_t(i) * dd;
      for (int j = 0; j < d; ++j) acc += urow[j] * x[j];
      y[i] = acc;
    }
  }
  h_end = Tensor<T>({dd}, std::move(h_prev));
}

// Reverse pass over the same traversal. d_ys/d_h_end may be empty (treated as
// zero). Fills grads; returns nothing.
template <typename T>
void run_backward(std::span<const T> xs, std::size_t t_len, const Tensor<T>& h0,
                  const ScanParams<T>& p, bool use_prior, int row_scale_period, T eta,
                  const ForwardTape<T>& tape, std::span<const T> d_ys,
                  std::span<const T> d_h_end, TapeGradients<T>& grads,
                  std::span<T> d_xs) {
  const int d = p.feat_dim();
  const std::size_t dd = std::size_t(d);
  std::vector<T> mix(std::size_t(p.heads)), gam(std::size_t(p.heads));
  for (int k = 0; k < p.heads; ++k) {
    mix[k] = sigmoid(p.mix_w(k));
    gam[k] = sigmoid(p.gamma_logits(k));
  }

  std::vector<T> gh(dd, T(0));
  if (!d_h_end.empty())
    for (std::size_t c = 0; c < dd; ++c) gh[c] = d_h_end[c];

  std::vector<T> dm(std::size_t(p.heads), T(0)), dg(std::size_t(p.heads), T(0));
  std::vector<T> da(dd), db(dd), daeff(dd);

  for (std::size_t ti = t_len; ti-- > 0;) {
    std::span<const T> x(xs.data() + ti * dd, dd);
    std::span<T> dx(d_xs.data() + ti * dd, dd);
    auto a = tape.a_gate.row(ti);
    auto b = tape.b_gate.row(ti);
    auto ae = tape.a_eff.row(ti);
    auto h = tape.h.row(ti);

    if (!d_ys.empty()) {
      std::span<const T> dy(d_ys.data() + ti * dd, dd);
      // y = W_out h + U_out x
      T* dwout = grads.w_out.data().data();
      T* duout = grads.u_out.data().data();
      for (int i = 0; i < d; ++i) {
        const T dyi = dy[i];
        if (dyi == T(0)) continue;
        T* wrow = dwout + std::size_t(i) * dd;
        T* urow = duout + std::size_t(i) * dd;
        for (int j = 0; j < d; ++j) {
          wrow[j] += dyi * h[j];
          urow[j] += dyi * x[j];
        }
      }
      const T* wp = p.w_out.data().data();
      const T* up = p.u_out.data().data();
      for (int i = 0; i < d; ++i) {
        const T dyi = dy[i];
        if (dyi == T(0)) continue;
        const T* wrow = wp + std::size_t(i) * dd;
        const T* urow = up + std::size_t(i) * dd;
        for (int j = 0; j < d; ++j) {
          gh[j] += wrow[j] * dyi;
          dx[j] += urow[j] * dyi;
        }
      }
    }

    // h_prev as seen by this step (after any row scaling).
    const bool scaled = row_scale_period > 0 && ti > 0 && ti % std::size_t(row_scale_period) == 0;
    std::span<const T> h_prev_raw =
        (ti == 0) ? h0.data() : std::span<const T>(tape.h.row(ti - 1));

    for (int c = 0; c < d; ++c) {
      const T hp = scaled ? eta * h_prev_raw[c] : h_prev_raw[c];
      daeff[c] = gh[c] * hp;
      db[c] = gh[c] * x[c];
      dx[c] += gh[c] * b[c];
      gh[c] = gh[c] * ae[c];  // now gradient w.r.t. (possibly scaled) h_prev
    }
    if (scaled) {
      T de = T(0);
      for (int c = 0; c < d; ++c) {
        de += gh[c] * h_prev_raw[c];
        gh[c] *= eta;
      }
      grads.eta_cross += de;
    }

    if (use_prior) {
      for (int c = 0; c < d; ++c) {
        const int k = c * p.heads / d;
        da[c] = mix[k] * daeff[c];
        dm[k] += daeff[c] * (a[c] - gam[k]);
        dg[k] += daeff[c] * (T(1) - mix[k]);
      }
    } else {
      for (int c = 0; c < d; ++c) da[c] = daeff[c];
    }

    // Through the gate sigmoids and projections.
    T* dwa = grads.w_a.data().data();
    T* dwb = grads.w_b.data().data();
    const T* wa = p.w_a.data().data();
    const T* wb = p.w_b.data().data();
    for (int i = 0; i < d; ++i) {
      const T dai = da[i] * a[i] * (T(1) - a[i]);
      const T dbi = db[i] * b[i] * (T(1) - b[i]);
      grads.b_a(i) += dai;
      grads.b_b(i) += dbi;
      T* warow = dwa + std::size_t(i) * dd;
      T* wbrow = dwb + std::size_t(i) * dd;
      const T* warowp = wa + std::size_t(i) * dd;
      const T* wbrowp = wb + std::size_t(i) * dd;
      for (int j = 0; j < d; ++j) {
        warow[j] += dai * x[j];
        wbrow[j] += dbi * x[j];
        dx[j] += warowp[j] * dai + wbrowp[j] * dbi;
      }
    }
  }

  for (std::size_t c = 0; c < dd; ++c) grads.d_h0(c) += gh[c];
  if (use_prior) {
    for (int k = 0; k < p.heads; ++k) {
      grads.mix_w(k) += dm[k] * mix[k] * (T(1) - mix[k]);
      grads.gamma_logits(k) += dg[k] * gam[k] * (T(1) - gam[k]);
    }
  }
}

template <typename T>
void check_sequence(const Tensor<T>& xs, const ScanParams<T>& p, const char* op) {
  if (xs.rank() != 2 || int(xs.dim(1)) != p.feat_dim())
    throw DimensionError(std::string(op) + ": input must be T x d_f with d_f = " +
                         std::to_string(p.feat_dim()));
}

template <typename T>
Tensor<T> gather_rows(const Tensor<T>& xs, const std::vector<int>& order) {
  const std::size_t d = xs.dim(1);
  Tensor<T> out({order.size(), d});
  for (std::size_t t = 0; t < order.size(); ++t) {
    auto src = xs.row(std::size_t(order[t]));
    std::copy(src.begin(), src.end(), out.row(t).begin());
  }
  return out;
}

}  // namespace

template <typename T>
ScanResult<T> scan_sequential(const Tensor<T>& xs, const Tensor<T>& h0, const ScanParams<T>& p,
                              bool use_decay_prior) {
  check_sequence(xs, p, "scan_sequential");
  if (h0.rank() != 1 || int(h0.dim(0)) != p.feat_dim())
    throw DimensionError("scan_sequential: h0 must be a d_f vector");
  const std::size_t t_len = xs.dim(0);
  if (t_len == 0)
    return {Tensor<T>({0, std::size_t(p.feat_dim())}), h0};
  ForwardTape<T> tape;
  ScanResult<T> res;
  run_forward(xs.data(), t_len, h0, p, use_decay_prior, 0, T(1), tape, res.outputs,
              res.final_state);
  return res;
}

std::vector<int> ChunkPlan::chunk_tokens(int chunk) const {
  std::vector<int> tokens;
  tokens.reserve(std::size_t(chunk_len));
  for (int i = 0; i < chunk_len; ++i)
    tokens.push_back(order[std::size_t(chunk * chunk_len + i)]);
  return tokens;
}

ChunkPlan build_chunk_plan(int height, int width, int chunk_len, double eta_cross, bool snake) {
  if (height < 1 || width < 1) throw ArgumentError("grid extents must be >= 1");
  if (chunk_len < 1) throw ArgumentError("chunk length must be >= 1");
  ChunkPlan plan;
  plan.height = height;
  plan.width = width;
  plan.requested_len = chunk_len;
  plan.eta_cross = eta_cross;
  plan.snake = snake;
  int len = std::min(chunk_len, width);
  while (width % len != 0) --len;  // largest divisor of W that is <= chunk_len
  plan.chunk_len = len;
  plan.clamped = (len != chunk_len);
  plan.order.reserve(std::size_t(height) * std::size_t(width));
  for (int r = 0; r < height; ++r) {
    const bool reversed = snake && (r % 2 == 1);
    for (int i = 0; i < width; ++i) {
      const int col = reversed ? width - 1 - i : i;
      plan.order.push_back(r * width + col);
    }
  }
  return plan;
}

template <typename T>
Tensor<T> scan_chunked(const Tensor<T>& xs, const ChunkPlan& plan, const ScanParams<T>& p) {
  check_sequence(xs, p, "scan_chunked");
  if (int(xs.dim(0)) != plan.height * plan.width)
    throw DimensionError("scan_chunked: plan covers " +
                         std::to_string(plan.height * plan.width) + " tokens, input has " +
                         std::to_string(xs.dim(0)));
  const std::size_t t_len = xs.dim(0);
  const std::size_t d = std::size_t(p.feat_dim());
  const Tensor<T> gathered = gather_rows(xs, plan.order);
  const Tensor<T> h0 = Tensor<T>::zeros({d});
  ForwardTape<T> tape;
  Tensor<T> ys, h_end;
  run_forward(gathered.data(), t_len, h0, p, true, plan.width, T(plan.eta_cross), tape, ys,
              h_end);
  Tensor<T> out({t_len, d});
  for (std::size_t t = 0; t < t_len; ++t) {
    auto src = ys.row(t);
    std::copy(src.begin(), src.end(), out.row(std::size_t(plan.order[t])).begin());
  }
  return out;
}

template <typename T>
TapeGradients<T> TapeGradients<T>::zeros_like(const ScanParams<T>& p,
                                              const std::vector<std::size_t>& xs_dims) {
  TapeGradients<T> g;
  g.w_a = Tensor<T>::zeros(p.w_a.dims());
  g.b_a = Tensor<T>::zeros(p.b_a.dims());
  g.w_b = Tensor<T>::zeros(p.w_b.dims());
  g.b_b = Tensor<T>::zeros(p.b_b.dims());
  g.w_out = Tensor<T>::zeros(p.w_out.dims());
  g.u_out = Tensor<T>::zeros(p.u_out.dims());
  g.gamma_logits = Tensor<T>::zeros(p.gamma_logits.dims());
  g.mix_w = Tensor<T>::zeros(p.mix_w.dims());
  g.d_input = Tensor<T>::zeros(xs_dims);
  g.d_h0 = Tensor<T>::zeros(p.b_a.dims());
  return g;
}

namespace {
template <typename T>
void add_into(Tensor<T>& dst, const Tensor<T>& src) {
  auto d = dst.data();
  auto s = src.data();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] += s[i];
}
}  // namespace

template <typename T>
void TapeGradients<T>::accumulate(const TapeGradients& other) {
  add_into(w_a, other.w_a);
  add_into(b_a, other.b_a);
  add_into(w_b, other.w_b);
  add_into(b_b, other.b_b);
  add_into(w_out, other.w_out);
  add_into(u_out, other.u_out);
  add_into(gamma_logits, other.gamma_logits);
  add_into(mix_w, other.mix_w);
  eta_cross += other.eta_cross;
  add_into(d_h0, other.d_h0);
  if (d_input.same_shape(other.d_input)) add_into(d_input, other.d_input);
}

template <typename T>
T TapeGradients<T>::max_abs() const {
  T m = std::abs(eta_cross);
  for (const Tensor<T>* t : {&w_a, &b_a, &w_b, &b_b, &w_out, &u_out, &gamma_logits, &mix_w,
                             &d_input, &d_h0})
    for (T v : t->data()) m = std::max(m, std::abs(v));
  return m;
}

template <typename T>
TapeGradients<T> scan_backward(const Tensor<T>& xs, const Tensor<T>& h0, const ScanParams<T>& p,
                               bool use_decay_prior, const Tensor<T>& d_outputs,
                               const Tensor<T>& d_final_state) {
  check_sequence(xs, p, "scan_backward");
  const std::size_t t_len = xs.dim(0);
  const std::size_t d = std::size_t(p.feat_dim());
  if (!d_outputs.empty() && (d_outputs.rank() != 2 || d_outputs.dim(0) != t_len ||
                             d_outputs.dim(1) != d))
    throw DimensionError("scan_backward: output gradient shape mismatch");
  if (!d_final_state.empty() && (d_final_state.rank() != 1 || d_final_state.dim(0) != d))
    throw DimensionError("scan_backward: final-state gradient must be a d_f vector");
  TapeGradients<T> grads = TapeGradients<T>::zeros_like(p, xs.dims());
  if (t_len == 0) {
    if (!d_final_state.empty())
      for (std::size_t c = 0; c < d; ++c) grads.d_h0(c) = d_final_state(c);
    return grads;
  }
  ForwardTape<T> tape;
  Tensor<T> ys, h_end;
  run_forward(xs.data(), t_len, h0, p, use_decay_prior, 0, T(1), tape, ys, h_end);
  run_backward(xs.data(), t_len, h0, p, use_decay_prior, 0, T(1), tape,
               d_outputs.empty() ? std::span<const T>{} : d_outputs.data(),
               d_final_state.empty() ? std::span<const T>{} : d_final_state.data(), grads,
               grads.d_input.data());
  return grads;
}

template <typename T>
TapeGradients<T> scan_chunked_backward(const Tensor<T>& xs, const ChunkPlan& plan,
                                       const ScanParams<T>& p, const Tensor<T>& d_outputs) {
  check_sequence(xs, p, "scan_chunked_backward");
  if (int(xs.dim(0)) != plan.height * plan.width)
    throw DimensionError("scan_chunked_backward: plan/input length mismatch");
  if (!d_outputs.same_shape(xs))
    throw DimensionError("scan_chunked_backward: output gradient shape mismatch");
  const std::size_t t_len = xs.dim(0);
  const std::size_t d = std::size_t(p.feat_dim());
  const Tensor<T> gathered = gather_rows(xs, plan.order);
  const Tensor<T> d_ys = gather_rows(d_outputs, plan.order);
  const Tensor<T> h0 = Tensor<T>::zeros({d});
  ForwardTape<T> tape;
  Tensor<T> ys, h_end;
  run_forward(gathered.data(), t_len, h0, p, true, plan.width, T(plan.eta_cross), tape, ys, h_end);
  TapeGradients<T> grads = TapeGradients<T>::zeros_like(p, xs.dims());
  Tensor<T> d_gathered = Tensor<T>::zeros({t_len, d});
  run_backward(gathered.data(), t_len, h0, p, true, plan.width, T(plan.eta_cross), tape,
               d_ys.data(), std::span<const T>{}, grads, d_gathered.data());
  for (std::size_t t = 0; t < t_len; ++t) {
    auto src = d_gathered.row(t);
    std::copy(src.begin(), src.end(), grads.d_input.row(std::size_t(plan.order[t])).begin());
  }
  return grads;
}

template <typename T>
Tensor<T> influence(const Tensor<T>& xs, const ScanParams<T>& p, int t, int d) {
  check_sequence(xs, p, "influence");
  const int t_len = int(xs.dim(0));
  if (t < 2 || t > t_len || d < 1 || d > t - 1)
    throw ArgumentError("influence requires 2 <= t <= T and 1 <= d <= t-1");
  const std::size_t df = std::size_t(p.feat_dim());
  Tensor<T> prod = Tensor<T>::full({df}, T(1));
  for (int step = t - d + 1; step <= t; ++step) {
    Tensor<T> x(std::vector<std::size_t>{df},
                std::vector<T>(xs.row(std::size_t(step - 1)).begin(),
                               xs.row(std::size_t(step - 1)).end()));
    GatePair<T> g = gates(x, p);
    Tensor<T> ae = effective_decay(g.decay, p);
    for (std::size_t c = 0; c < df; ++c) prod(c) *= ae(c);
  }
  return prod;
}

template struct ScanParams<float>;
template struct ScanParams<double>;
template struct TapeGradients<float>;
template struct TapeGradients<double>;
template GatePair<float> gates(const Tensor<float>&, const ScanParams<float>&);
template GatePair<double> gates(const Tensor<double>&, const ScanParams<double>&);
template Tensor<float> effective_decay(const Tensor<float>&, const ScanParams<float>&);
template Tensor<double> effective_decay(const Tensor<double>&, const ScanParams<double>&);
template ScanResult<float> scan_sequential(const Tensor<float>&, const Tensor<float>&,
                                           const ScanParams<float>&, bool);
template ScanResult<double> scan_sequential(const Tensor<double>&, const Tensor<double>&,
                                            const ScanParams<double>&, bool);
template Tensor<float> scan_chunked(const Tensor<float>&, const ChunkPlan&,
                                    const ScanParams<float>&);
template Tensor<double> scan_chunked(const Tensor<double>&, const ChunkPlan&,
                                     const ScanParams<double>&);
template TapeGradients<float> scan_backward(const Tensor<float>&, const Tensor<float>&,
                                            const ScanParams<float>&, bool, const Tensor<float>&,
                                            const Tensor<float>&);
template TapeGradients<double> scan_backward(const Tensor<double>&, const Tensor<double>&,
                                             const ScanParams<double>&, bool,
                                             const Tensor<double>&, const Tensor<double>&);
template TapeGradients<float> scan_chunked_backward(const Tensor<float>&, const ChunkPlan&,
                                                    const ScanParams<float>&,
                                                    const Tensor<float>&);
template TapeGradients<double> scan_chunked_backward(const Tensor<double>&, const ChunkPlan&,
                                                     const ScanParams<double>&,
                                                     const Tensor<double>&);
template Tensor<float> influence(const Tensor<float>&, const ScanParams<float>&, int, int);
template Tensor<double> influence(const Tensor<double>&, const ScanParams<double>&, int, int);

}  // namespace s2corr
