#include "s2corr/synth.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "s2corr/attention.hpp"
#include "s2corr/infer.hpp"
#include "s2corr/threading.hpp"

namespace s2corr {

void SynthConfig::validate() const {
  if (height < 1 || width < 1 || n_classes < 1 || feat_dim < 1 || embed_dim < 1 ||
      blobs_per_class < 1)
    throw ArgumentError("synth config extents must be positive");
  if (noise_sigma < 0.0 || spurious_patches < 0 || spurious_gain < 0.0)
    throw ArgumentError("synth corruption parameters must be non-negative");
}

namespace {

// Gram-Schmidt rows; classes beyond the feature dimension are only normalized.
template <typename T>
Tensor<T> prototype_rows(int n_classes, int d, Rng& rng) {
  Tensor<T> protos = rng.normal_tensor<T>({std::size_t(n_classes), std::size_t(d)});
  for (int c = 0; c < n_classes; ++c) {
    auto row = protos.row(std::size_t(c));
    if (c < d)
      for (int k = 0; k < c; ++k) {
        auto prev = protos.row(std::size_t(k));
        T dot = T(0);
        for (int j = 0; j < d; ++j) dot += row[j] * prev[j];
        for (int j = 0; j < d; ++j) row[j] -= dot * prev[j];
      }
    T norm = T(0);
    for (T v : row) norm += v * v;
    norm = std::sqrt(norm);
    if (norm < T(1e-9)) throw ArgumentError("degenerate prototype draw");
    for (T& v : row) v /= norm;
  }
  return protos;
}

double elapsed_s(std::chrono::steady_clock::time_point a,
                 std::chrono::steady_clock::time_point b) {
  return std::chrono::duration<double>(b - a).count();
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

// Least-squares slope of ln(t) against ln(n).
double loglog_slope(const std::vector<int>& ns, const std::vector<double>& ts) {
  const std::size_t n = ns.size();
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double x = std::log(double(ns[i])), y = std::log(ts[i]);
    sx += x;
    sy += y;
    sxx += x * x;
    sxy += x * y;
  }
  return (double(n) * sxy - sx * sy) / (double(n) * sxx - sx * sx);
}

// Times fn with auto-scaled inner iterations so each sample is well above the
// clock resolution. Returns per-call seconds (median) and the iteration count.
std::pair<double, int> time_method(const std::function<void()>& fn, int reps, bool* inconclusive) {
  constexpr double kMinSample = 1e-4;  // seconds per timed sample
  constexpr int kMaxInner = 4096;
  int inner = 1;
  for (;;) {
    auto t0 = std::chrono::steady_clock::now();
    for (int i = 0; i < inner; ++i) fn();
    auto t1 = std::chrono::steady_clock::now();
    const double t = elapsed_s(t0, t1);
    if (t >= kMinSample || inner >= kMaxInner) {
      if (t < kMinSample && inconclusive) *inconclusive = true;
      break;
    }
    const double scale = kMinSample / std::max(t, 1e-9);
    inner = std::min(kMaxInner, std::max(inner * 2, int(double(inner) * scale) + 1));
  }
  for (int w = 0; w < 2; ++w)
    for (int i = 0; i < inner; ++i) fn();  // warmup, discarded
  std::vector<double> samples;
  for (int r = 0; r < std::max(reps, 5); ++r) {
    auto t0 = std::chrono::steady_clock::now();
    for (int i = 0; i < inner; ++i) fn();
    auto t1 = std::chrono::steady_clock::now();
    samples.push_back(elapsed_s(t0, t1) / double(inner));
  }
  return {median(samples), inner};
}

}  // namespace

template <typename T>
SynthSample<T> generate(const SynthConfig& cfg, Rng& rng) {
  cfg.validate();
  const int h = cfg.height, w = cfg.width, n_c = cfg.n_classes, d = cfg.feat_dim;
  const std::size_t hw = std::size_t(h) * std::size_t(w);

  Tensor<T> protos = prototype_rows<T>(n_c, d, rng);

  // Blob scores; the per-pixel argmax paints the label map.
  std::vector<double> best_score(hw, -1.0);
  std::vector<int> labels(hw, 0);
  const double rmin = 0.15 * std::min(h, w), rmax = 0.35 * std::min(h, w);
  for (int c = 0; c < n_c; ++c)
    for (int b = 0; b < cfg.blobs_per_class; ++b) {
      const double cy = rng.uniform(0.0, double(h));
      const double cx = rng.uniform(0.0, double(w));
      const double r = rng.uniform(rmin, rmax);
      const double amp = rng.uniform(0.75, 1.25);
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
          const double dy = y + 0.5 - cy, dx = x + 0.5 - cx;
          const double s = amp * std::exp(-(dy * dy + dx * dx) / (2.0 * r * r));
          const std::size_t i = std::size_t(y) * w + x;
          if (s > best_score[i]) {
            best_score[i] = s;
            labels[i] = c;
          }
        }
    }

  // Clean features: prototype plus jitter projected into the orthogonal
  // complement of the prototypes, so the cosine argmax provably stays put.
  const bool jitter_ok = n_c < d;
  Tensor<T> clean({hw, std::size_t(d)});
  for (std::size_t i = 0; i < hw; ++i) {
    auto dst = clean.row(i);
    auto proto = protos.row(std::size_t(labels[i]));
    std::vector<T> j(static_cast<std::size_t>(d));
    for (T& v : j) v = T(0.05 * rng.normal());
    if (jitter_ok)
      for (int c = 0; c < n_c; ++c) {
        auto p = protos.row(std::size_t(c));
        T dot = T(0);
        for (int k = 0; k < d; ++k) dot += j[std::size_t(k)] * p[k];
        for (int k = 0; k < d; ++k) j[std::size_t(k)] -= dot * p[k];
      }
    for (int k = 0; k < d; ++k) dst[k] = proto[k] + (jitter_ok ? j[std::size_t(k)] : T(0));
  }

  // Corruption: dense Gaussian noise plus wrong-class rectangles.
  Tensor<T> corrupt = clean;
  if (cfg.noise_sigma > 0.0)
    for (T& v : corrupt.data()) v += T(cfg.noise_sigma * rng.normal());
  for (int patch = 0; patch < cfg.spurious_patches; ++patch) {
    const int ph = 2 + int(rng.uniform() * std::max(1, h / 3));
    const int pw = 2 + int(rng.uniform() * std::max(1, w / 3));
    const int y0 = int(rng.uniform() * std::max(1, h - ph + 1));
    const int x0 = int(rng.uniform() * std::max(1, w - pw + 1));
    const std::size_t center = std::size_t(std::min(h - 1, y0 + ph / 2)) * w +
                               std::size_t(std::min(w - 1, x0 + pw / 2));
    int wrong = int(rng.uniform() * n_c);
    if (wrong == labels[center]) wrong = (wrong + 1) % n_c;
    if (n_c == 1) continue;  // no wrong class exists
    auto p = protos.row(std::size_t(wrong));
    for (int y = y0; y < std::min(h, y0 + ph); ++y)
      for (int x = x0; x < std::min(w, x0 + pw); ++x) {
        auto row = corrupt.row(std::size_t(y) * w + x);
        for (int k = 0; k < d; ++k) row[k] += T(cfg.spurious_gain) * p[k];
      }
  }

  SynthSample<T> sample;
  std::vector<std::string> names;
  for (int c = 0; c < n_c; ++c) {
    std::ostringstream os;
    os << "class_" << c;
    names.push_back(os.str());
  }
  sample.text = TextEmbeddings<T>(protos, std::move(names));
  sample.clean_features = FeatureGrid<T>(h, w, std::move(clean));
  sample.features = FeatureGrid<T>(h, w, std::move(corrupt));
  sample.labels = std::move(labels);
  sample.clean_corr = initial_correlation(sample.clean_features, sample.text);

  // Generator contract: the clean map must recover the painted labels.
  std::vector<int> rec = argmax_labels(sample.clean_corr.values);
  for (std::size_t i = 0; i < hw; ++i)
    if (rec[i] != sample.labels[i])
      throw ArgumentError("synth generator contract violated: clean argmax != labels");
  return sample;
}

MachineFingerprint machine_fingerprint() {
  MachineFingerprint fp;
  fp.hardware_threads = std::thread::hardware_concurrency();
  fp.cpu_model = "unknown-cpu";
  std::ifstream f("/proc/cpuinfo");
  std::string line;
  while (std::getline(f, line)) {
    if (line.rfind("model name", 0) == 0) {
      const auto pos = line.find(':');
      if (pos != std::string::npos) {
        fp.cpu_model = line.substr(pos + 1);
        while (!fp.cpu_model.empty() && fp.cpu_model.front() == ' ')
          fp.cpu_model.erase(fp.cpu_model.begin());
      }
      break;
    }
  }
  return fp;
}

nlohmann::json TrainReport::to_json() const {
  return {{"losses", losses},
          {"eval_losses", eval_losses},
          {"initial_loss", initial_loss},
          {"final_loss", final_loss},
          {"initial_loss_smooth", initial_loss_smooth},
          {"final_loss_smooth", final_loss_smooth},
          {"raw_accuracy", raw_accuracy},
          {"refined_accuracy_initial", refined_accuracy_initial},
          {"refined_accuracy_final", refined_accuracy_final},
          {"param_max_delta", param_max_delta},
          {"seconds_per_step", seconds_per_step},
          {"diverged", diverged},
          {"diverged_step", diverged_step},
          {"threads", threads},
          {"machine",
           {{"cpu_model", machine.cpu_model}, {"hardware_threads", machine.hardware_threads}}}};
}

std::string TrainReport::to_csv() const {
  std::ostringstream os;
  os << "step,loss,eval_loss\n";
  for (std::size_t i = 0; i < losses.size(); ++i)
    os << (i + 1) << ',' << losses[i] << ','
       << (i < eval_losses.size() ? eval_losses[i] : std::nan("")) << "\n";
  return os.str();
}

namespace {

template <typename T>
double pixel_accuracy(const std::vector<int>& pred, const std::vector<int>& gt) {
  std::size_t hit = 0;
  for (std::size_t i = 0; i < gt.size(); ++i)
    if (pred[i] == gt[i]) ++hit;
  return double(hit) / double(gt.size());
}

template <typename T>
double cross_entropy(const Tensor<T>& logits, const std::vector<int>& labels) {
  double loss = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < logits.dim(0); ++i) {
    if (labels[i] == kIgnoreLabel) continue;
    auto row = logits.row(i);
    T m = row[0];
    for (T v : row) m = std::max(m, v);
    T sum = T(0);
    for (T v : row) sum += std::exp(v - m);
    loss += double(m) + std::log(double(sum)) - double(row[std::size_t(labels[i])]);
    ++n;
  }
  return loss / double(n);
}

}  // namespace

template <typename T>
TrainReport train_denoise(const SynthConfig& cfg, int steps, const AdamWConfig& optim,
                          int threads) {
  cfg.validate();
  if (steps < 1) throw ArgumentError("steps must be >= 1");
  TrainReport report;
  report.machine = machine_fingerprint();
  report.threads = threads;

  Rng root(cfg.seed);
  Rng eval_rng = root.split(0);
  Rng init_rng = root.split(1);
  SynthSample<T> eval = generate<T>(cfg, eval_rng);

  const int heads = cfg.embed_dim % 4 == 0 ? 4 : 1;
  PipelineParams<T> params = PipelineParams<T>::init(cfg.feat_dim, cfg.embed_dim, cfg.n_classes,
                                                     heads, T(0.8), 2, init_rng);
  ChunkPlan plan = build_chunk_plan(cfg.height, cfg.width,
                                    chunk_len_for_total(cfg.height, cfg.width, 16), 1.0, true);
  DomainTexts<T> domains(eval.text.values);  // class prototypes double as domain prompts

  {
    CorrelationMap<T> raw = initial_correlation(eval.features, eval.text);
    report.raw_accuracy = pixel_accuracy<T>(argmax_labels(raw.values), eval.labels);
    Tensor<T> logits = forward(eval.features, eval.text, domains, params, plan, threads);
    report.refined_accuracy_initial = pixel_accuracy<T>(argmax_labels(logits), eval.labels);
  }

  std::vector<Tensor<T>> initial_snapshot;
  for (const Tensor<T>* t : trainable_params(params)) initial_snapshot.push_back(*t);

  AdamW<T> opt(optim);
  auto t0 = std::chrono::steady_clock::now();
  for (int step = 1; step <= steps; ++step) {
    Rng step_rng = root.split(1000 + std::uint64_t(step));
    SynthSample<T> sample = generate<T>(cfg, step_rng);
    report.eval_losses.push_back(cross_entropy(
        forward(eval.features, eval.text, domains, params, plan, threads), eval.labels));
    LossAndGrads<T> lg =
        forward_backward(sample.features, sample.text, domains, sample.labels, params, plan,
                         threads);
    if (!std::isfinite(double(lg.loss))) {
      report.diverged = true;
      report.diverged_step = step;
      break;
    }
    report.losses.push_back(double(lg.loss));
    auto ps = trainable_params(params);
    auto gs = gradient_tensors(lg.grads);
    opt.step(ps, gs);
  }
  auto t1 = std::chrono::steady_clock::now();
  {
    auto ps = trainable_params(params);
    for (std::size_t s = 0; s < ps.size(); ++s) {
      auto now = ps[s]->data();
      auto was = initial_snapshot[s].data();
      for (std::size_t i = 0; i < now.size(); ++i)
        report.param_max_delta =
            std::max(report.param_max_delta, std::abs(double(now[i]) - double(was[i])));
    }
  }
  report.seconds_per_step = elapsed_s(t0, t1) / double(std::max<std::size_t>(1,
                                                                             report.losses.size()));

  if (!report.losses.empty()) {
    report.initial_loss = report.losses.front();
    report.final_loss = report.losses.back();
    const std::size_t k = std::min<std::size_t>(20, report.losses.size());
    report.initial_loss_smooth =
        std::accumulate(report.losses.begin(), report.losses.begin() + k, 0.0) / double(k);
    report.final_loss_smooth =
        std::accumulate(report.losses.end() - k, report.losses.end(), 0.0) / double(k);
  }
  {
    Tensor<T> logits = forward(eval.features, eval.text, domains, params, plan, threads);
    report.refined_accuracy_final = pixel_accuracy<T>(argmax_labels(logits), eval.labels);
  }
  return report;
}

nlohmann::json BenchReport::to_json() const {
  nlohmann::json rows_j = nlohmann::json::array();
  for (const BenchRow& r : rows)
    rows_j.push_back({{"method", r.method},
                      {"n", r.n},
                      {"median_seconds", r.median_seconds},
                      {"inner_iters", r.inner_iters},
                      {"throughput", r.throughput},
                      {"threads", r.threads}});
  return {{"rows", rows_j},
          {"slopes", slopes},
          {"inconclusive", inconclusive},
          {"parallel_outputs_identical", parallel_outputs_identical},
          {"machine",
           {{"cpu_model", machine.cpu_model}, {"hardware_threads", machine.hardware_threads}}}};
}

std::string BenchReport::to_csv() const {
  std::ostringstream os;
  os << "method,n,median_seconds,inner_iters,throughput,threads,cpu_model,hardware_threads\n";
  for (const BenchRow& r : rows)
    os << r.method << ',' << r.n << ',' << r.median_seconds << ',' << r.inner_iters << ','
       << r.throughput << ',' << r.threads << ",\"" << machine.cpu_model << "\","
       << machine.hardware_threads << "\n";
  return os.str();
}

BenchReport bench_vocab_scaling(const std::vector<int>& sizes, int reps,
                                const std::vector<BenchMethod>& methods) {
  if (sizes.size() < 3) throw ArgumentError("need >=3 sizes");
  for (std::size_t i = 1; i < sizes.size(); ++i)
    if (sizes[i] <= sizes[i - 1]) throw ArgumentError("sizes must be strictly increasing");
  BenchReport report;
  report.machine = machine_fingerprint();
  // Each (method, size) cell is timed contiguously in steady state: inner
  // iterations auto-scaled above the clock resolution, two warmup rounds
  // discarded, median over the reps.
  for (const auto& [name, fn] : methods) {
    std::vector<double> medians;
    for (int n : sizes) {
      bool inconclusive = false;
      auto [med, inner] = time_method([&] { fn(n); }, reps, &inconclusive);
      report.inconclusive = report.inconclusive || inconclusive;
      report.rows.push_back({name, n, med, inner, 0.0, 1});
      medians.push_back(med);
    }
    report.slopes[name] = loglog_slope(sizes, medians);
  }
  return report;
}

BenchReport bench_vocab_scaling(const std::vector<int>& sizes, int reps) {
  constexpr int kH = 16, kW = 16, kDf = 32, kD = 16;
  // Pre-build one workload per size so setup stays outside the timed region.
  struct Workload {
    CorrelationVolume<float> vol;
    PipelineParams<float> params;
    DomainTexts<float> domains;
    AttnParams<float> attn;
  };
  std::map<int, Workload> workloads;
  Rng rng(20240915);
  for (int n : sizes) {
    Workload wl{
        CorrelationVolume<float>(
            kH, kW,
            rng.uniform_tensor<float>({std::size_t(kH * kW), std::size_t(n), std::size_t(kDf)},
                                      -1.0, 1.0)),
        PipelineParams<float>::init(kD, kDf, n, 4, 0.8f, 1, rng),
        DomainTexts<float>(rng.uniform_tensor<float>({2, std::size_t(kD)}, -1.0, 1.0)),
        AttnParams<float>::init(kDf, 1, rng)};
    workloads.emplace(n, std::move(wl));
  }
  std::vector<BenchMethod> methods = {
      {"class_scan",
       [&](int n) {
         Workload& wl = workloads.at(n);
         class_aggregate(wl.vol, wl.domains, wl.params);
       }},
      {"class_attention",
       [&](int n) {
         Workload& wl = workloads.at(n);
         class_attention(wl.vol, wl.attn);
       }},
  };
  return bench_vocab_scaling(sizes, reps, methods);
}

BenchReport bench_chunk_speed(const std::vector<int>& chunk_lens, int height, int width,
                              int n_classes, int reps, int threads) {
  if (chunk_lens.empty()) throw ArgumentError("need at least one chunk length");
  constexpr int kDf = 32;
  BenchReport report;
  report.machine = machine_fingerprint();
  Rng rng(77001);
  ScanParams<float> params = ScanParams<float>::init(kDf, 4, 0.8f, rng);
  std::vector<Tensor<float>> slices;
  for (int j = 0; j < n_classes; ++j)
    slices.push_back(rng.uniform_tensor<float>(
        {std::size_t(height) * std::size_t(width), std::size_t(kDf)}, -1.0, 1.0));
  const double tokens = double(height) * width * n_classes;
  for (int len : chunk_lens) {
    ChunkPlan plan = build_chunk_plan(height, width, len, 1.0, true);
    std::vector<Tensor<float>> single(static_cast<std::size_t>(n_classes));
    std::vector<Tensor<float>> multi(static_cast<std::size_t>(n_classes));
    auto run = [&](int nthreads, std::vector<Tensor<float>>& out) {
      parallel_for(n_classes, nthreads,
                   [&](int j) { out[std::size_t(j)] = scan_chunked(slices[std::size_t(j)], plan,
                                                                   params); });
    };
    for (int mode = 0; mode < 2; ++mode) {
      const int nthreads = mode == 0 ? 1 : threads;
      auto& out = mode == 0 ? single : multi;
      bool inconclusive = false;
      auto [med, inner] = time_method([&] { run(nthreads, out); }, reps, &inconclusive);
      report.inconclusive = report.inconclusive || inconclusive;
      report.rows.push_back({mode == 0 ? "chunked_scan_1t" : "chunked_scan_mt", plan.chunk_len,
                             med, inner, tokens / med, nthreads});
    }
    for (int j = 0; j < n_classes; ++j) {
      auto a = single[std::size_t(j)].data();
      auto b = multi[std::size_t(j)].data();
      if (!std::equal(a.begin(), a.end(), b.begin(),
                      [](float x, float y) { return x == y; }))
        report.parallel_outputs_identical = false;
    }
  }
  return report;
}

template SynthSample<float> generate(const SynthConfig&, Rng&);
template SynthSample<double> generate(const SynthConfig&, Rng&);
template TrainReport train_denoise<float>(const SynthConfig&, int, const AdamWConfig&, int);
template TrainReport train_denoise<double>(const SynthConfig&, int, const AdamWConfig&, int);

}  // namespace s2corr
