#include "s2corr/gradcheck.hpp"

#include <cmath>
#include <functional>
#include <vector>

#include "s2corr/optim.hpp"

namespace s2corr {

namespace {

// The finite-difference oracle always runs in double at the exact point the
// T-precision model sees (float widens losslessly). The analytic gradients
// come from the T-precision backward, so for f32 the comparison measures
// genuine single-precision backward error against an accurate reference.
template <typename T>
Tensor<double> widen(const Tensor<T>& t) {
  if (t.empty() && t.rank() == 0) return Tensor<double>();
  std::vector<double> data(t.data().begin(), t.data().end());
  return Tensor<double>(t.dims(), std::move(data));
}

ScanParams<double> widen_params(const ScanParams<float>& p) {
  ScanParams<double> d;
  d.w_a = widen(p.w_a);
  d.b_a = widen(p.b_a);
  d.w_b = widen(p.w_b);
  d.b_b = widen(p.b_b);
  d.w_out = widen(p.w_out);
  d.u_out = widen(p.u_out);
  d.gamma_logits = widen(p.gamma_logits);
  d.mix_w = widen(p.mix_w);
  d.heads = p.heads;
  return d;
}
const ScanParams<double>& widen_params(const ScanParams<double>& p) { return p; }

// rel = |a-b| / max(|a|, |b|, floor); the floor keeps near-zero gradients from
// amplifying roundoff into spurious failures.
inline double rel_error(double a, double b, double floor) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

template <typename T>
constexpr double rel_floor() {
  return sizeof(T) == 8 ? 1e-4 : 1e-2;
}

struct NamedGrad {
  std::string name;
  Tensor<double>* point;          // perturbed by the oracle
  std::vector<double> analytic;   // T-precision gradient, widened
};

template <typename T>
std::vector<double> widen_grad(const Tensor<T>& g) {
  return std::vector<double>(g.data().begin(), g.data().end());
}

void fd_check(std::vector<NamedGrad>& entries, const std::function<double()>& loss_fn,
              double step, double floor, bool fault_inject, GradCheckResult& result) {
  bool injected = false;
  for (NamedGrad& e : entries) {
    auto data = e.point->data();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double saved = data[i];
      data[i] = saved + step;
      const double up = loss_fn();
      data[i] = saved - step;
      const double down = loss_fn();
      data[i] = saved;
      const double fd = (up - down) / (2.0 * step);
      double g = e.analytic[i];
      if (fault_inject && !injected && g != 0.0) {
        g = -g;
        injected = true;
      }
      const double err = rel_error(g, fd, floor);
      if (err > result.max_rel_error) {
        result.max_rel_error = err;
        result.worst_param = e.name + "[" + std::to_string(i) + "]";
      }
    }
  }
}

}  // namespace

template <typename T>
GradCheckResult gradcheck_scan(int draws, std::uint64_t seed, double fd_step, bool fault_inject) {
  
  GradCheckResult result;
  Rng root(seed);
  for (int draw = 0; draw < draws; ++draw) {
    Rng rng = root.split(std::uint64_t(draw));
    const int d_f = 2 + int(rng.uniform() * 5);  // 2..6
    const int t_len = 1 + int(rng.uniform() * 8);
    int heads = 1 + int(rng.uniform() * 3);
    while (d_f % heads != 0) --heads;
    const bool use_prior = rng.uniform() < 0.7;
    ScanParams<T> p = ScanParams<T>::init(d_f, heads, T(0.8), rng);
    // Perturb the pinned-bias init so b_a/b_b gradients see generic values.
    for (T& v : p.b_a.data()) v += T(rng.uniform(-0.5, 0.5));
    for (T& v : p.mix_w.data()) v = T(rng.uniform(-1.0, 1.0));
    for (T& v : p.gamma_logits.data()) v = T(rng.uniform(-1.0, 1.5));
    Tensor<T> xs = rng.uniform_tensor<T>({std::size_t(t_len), std::size_t(d_f)}, -1.0, 1.0);
    Tensor<T> h0 = rng.uniform_tensor<T>({std::size_t(d_f)}, -1.0, 1.0);
    Tensor<T> up_y = rng.uniform_tensor<T>({std::size_t(t_len), std::size_t(d_f)}, -1.0, 1.0);
    Tensor<T> up_h = rng.uniform_tensor<T>({std::size_t(d_f)}, -1.0, 1.0);

    ScanParams<double> pd = widen_params(p);
    Tensor<double> xs_d = widen(xs), h0_d = widen(h0), up_y_d = widen(up_y), up_h_d = widen(up_h);

    auto loss_fn = [&]() {
      ScanResult<double> res = scan_sequential(xs_d, h0_d, pd, use_prior);
      double acc = 0.0;
      auto y = res.outputs.data();
      auto u = up_y_d.data();
      for (std::size_t i = 0; i < y.size(); ++i) acc += y[i] * u[i];
      for (int c = 0; c < d_f; ++c)
        acc += res.final_state(std::size_t(c)) * up_h_d(std::size_t(c));
      return acc;
    };

    TapeGradients<T> grads = scan_backward(xs, h0, p, use_prior, up_y, up_h);

    std::vector<NamedGrad> entries = {
        {"w_a", &pd.w_a, widen_grad(grads.w_a)},
        {"b_a", &pd.b_a, widen_grad(grads.b_a)},
        {"w_b", &pd.w_b, widen_grad(grads.w_b)},
        {"b_b", &pd.b_b, widen_grad(grads.b_b)},
        {"w_out", &pd.w_out, widen_grad(grads.w_out)},
        {"u_out", &pd.u_out, widen_grad(grads.u_out)},
        {"gamma_logits", &pd.gamma_logits, widen_grad(grads.gamma_logits)},
        {"mix_w", &pd.mix_w, widen_grad(grads.mix_w)},
        {"xs", &xs_d, widen_grad(grads.d_input)},
        {"h0", &h0_d, widen_grad(grads.d_h0)},
    };
    fd_check(entries, loss_fn, fd_step, rel_floor<T>(), fault_inject && draw == 0, result);
  }
  return result;
}

template <typename T>
GradCheckResult gradcheck_chunked(int draws, std::uint64_t seed, double fd_step,
                                  bool fault_inject) {
  
  GradCheckResult result;
  Rng root(seed);
  for (int draw = 0; draw < draws; ++draw) {
    Rng rng = root.split(0xC00 + std::uint64_t(draw));
    const int h = 2 + int(rng.uniform() * 3);
    const int w = 2 + int(rng.uniform() * 4);
    const int d_f = 4;
    const int chunk = 1 + int(rng.uniform() * w);
    const bool snake = rng.uniform() < 0.5;
    const double eta = rng.uniform(0.2, 1.2);
    ScanParams<T> p = ScanParams<T>::init(d_f, 2, T(0.8), rng);
    for (T& v : p.mix_w.data()) v = T(rng.uniform(-1.0, 1.0));
    ChunkPlan plan = build_chunk_plan(h, w, chunk, eta, snake);
    Tensor<T> xs =
        rng.uniform_tensor<T>({std::size_t(h) * std::size_t(w), std::size_t(d_f)}, -1.0, 1.0);
    Tensor<T> up = rng.uniform_tensor<T>(xs.dims(), -1.0, 1.0);

    ScanParams<double> pd = widen_params(p);
    Tensor<double> xs_d = widen(xs), up_d = widen(up);

    auto loss_fn = [&]() {
      Tensor<double> ys = scan_chunked(xs_d, plan, pd);
      double acc = 0.0;
      auto y = ys.data();
      auto u = up_d.data();
      for (std::size_t i = 0; i < y.size(); ++i) acc += y[i] * u[i];
      return acc;
    };

    TapeGradients<T> grads = scan_chunked_backward(xs, plan, p, up);

    std::vector<NamedGrad> entries = {
        {"w_a", &pd.w_a, widen_grad(grads.w_a)},
        {"b_a", &pd.b_a, widen_grad(grads.b_a)},
        {"w_b", &pd.w_b, widen_grad(grads.w_b)},
        {"b_b", &pd.b_b, widen_grad(grads.b_b)},
        {"w_out", &pd.w_out, widen_grad(grads.w_out)},
        {"u_out", &pd.u_out, widen_grad(grads.u_out)},
        {"gamma_logits", &pd.gamma_logits, widen_grad(grads.gamma_logits)},
        {"mix_w", &pd.mix_w, widen_grad(grads.mix_w)},
        {"xs", &xs_d, widen_grad(grads.d_input)},
    };
    fd_check(entries, loss_fn, fd_step, rel_floor<T>(), fault_inject && draw == 0, result);

    // eta_cross is a plan scalar; difference it directly.
    {
      const double saved = plan.eta_cross;
      plan.eta_cross = saved + fd_step;
      const double upv = loss_fn();
      plan.eta_cross = saved - fd_step;
      const double dn = loss_fn();
      plan.eta_cross = saved;
      const double fd = (upv - dn) / (2.0 * fd_step);
      const double err = rel_error(double(grads.eta_cross), fd, rel_floor<T>());
      if (err > result.max_rel_error) {
        result.max_rel_error = err;
        result.worst_param = "eta_cross";
      }
    }
  }
  return result;
}

template <typename T>
GradCheckResult gradcheck_pipeline(int draws, std::uint64_t seed, double fd_step,
                                   bool fault_inject) {
  
  GradCheckResult result;
  Rng root(seed);
  for (int draw = 0; draw < draws; ++draw) {
    Rng rng = root.split(0xF1F + std::uint64_t(draw));
    const int h = 4, w = 4, d = 8, d_f = 6, n_c = 3;
    const int heads = (draw % 2 == 0) ? 2 : 3;
    PipelineParams<T> params = PipelineParams<T>::init(d, d_f, n_c, heads, T(0.8), 2, rng);
    // Nudge the zero-init modulation so its gradients are exercised at a
    // generic point.
    params.mod.img_proj = rng.uniform_tensor<T>(params.mod.img_proj.dims(), -0.2, 0.2);
    params.mod.txt_proj = rng.uniform_tensor<T>(params.mod.txt_proj.dims(), -0.2, 0.2);
    FeatureGrid<T> fv(h, w,
                      rng.uniform_tensor<T>({std::size_t(h * w), std::size_t(d)}, -1.0, 1.0));
    TextEmbeddings<T> ft(rng.uniform_tensor<T>({std::size_t(n_c), std::size_t(d)}, -1.0, 1.0),
                         {"a", "b", "c"});
    DomainTexts<T> dt(rng.uniform_tensor<T>({2, std::size_t(d)}, -1.0, 1.0));
    ChunkPlan plan = build_chunk_plan(h, w, 2, rng.uniform(0.5, 1.0), true);
    std::vector<int> labels(std::size_t(h * w));
    for (auto& l : labels) l = int(rng.uniform() * n_c);
    labels[0] = kIgnoreLabel;  // exercise the ignore path

    PipelineParams<double> pd;
    pd.lift.p = widen(params.lift.p);
    pd.mod.img_proj = widen(params.mod.img_proj);
    pd.mod.txt_proj = widen(params.mod.txt_proj);
    pd.spatial_scan = widen_params(params.spatial_scan);
    pd.class_scan = widen_params(params.class_scan);
    pd.decoder_w = widen(params.decoder_w);
    pd.decoder_b = widen(params.decoder_b);
    pd.blocks = params.blocks;
    FeatureGrid<double> fv_d(h, w, widen(fv.values));
    TextEmbeddings<double> ft_d(widen(ft.values), ft.class_names);
    DomainTexts<double> dt_d(widen(dt.values));

    auto loss_fn = [&]() {
      return forward_backward(fv_d, ft_d, dt_d, labels, pd, plan).loss;
    };

    LossAndGrads<T> lg = forward_backward(fv, ft, dt, labels, params, plan);

    std::vector<Tensor<double>*> points;
    for (Tensor<double>* t : trainable_params(pd)) points.push_back(t);
    std::vector<const Tensor<T>*> analytic = gradient_tensors(lg.grads);
    const char* names[] = {"lift.p",
                           "mod.img_proj",
                           "mod.txt_proj",
                           "spatial.w_a",
                           "spatial.b_a",
                           "spatial.w_b",
                           "spatial.b_b",
                           "spatial.w_out",
                           "spatial.u_out",
                           "spatial.gamma_logits",
                           "spatial.mix_w",
                           "class.w_a",
                           "class.b_a",
                           "class.w_b",
                           "class.b_b",
                           "class.w_out",
                           "class.u_out",
                           "class.gamma_logits",
                           "class.mix_w",
                           "decoder_w",
                           "decoder_b"};
    std::vector<NamedGrad> entries;
    for (std::size_t i = 0; i < points.size(); ++i)
      entries.push_back({names[i], points[i], widen_grad(*analytic[i])});
    fd_check(entries, loss_fn, fd_step, rel_floor<T>(), fault_inject && draw == 0, result);
  }
  return result;
}

template GradCheckResult gradcheck_scan<float>(int, std::uint64_t, double, bool);
template GradCheckResult gradcheck_scan<double>(int, std::uint64_t, double, bool);
template GradCheckResult gradcheck_chunked<float>(int, std::uint64_t, double, bool);
template GradCheckResult gradcheck_chunked<double>(int, std::uint64_t, double, bool);
template GradCheckResult gradcheck_pipeline<float>(int, std::uint64_t, double, bool);
template GradCheckResult gradcheck_pipeline<double>(int, std::uint64_t, double, bool);

}  // namespace s2corr
