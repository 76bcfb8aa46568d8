// Acceptance suite: every release criterion with its stated tolerance, one
// pass/fail line each. Exits nonzero if any criterion fails.

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "s2corr/bundle_io.hpp"
#include "s2corr/gradcheck.hpp"
#include "s2corr/infer.hpp"
#include "s2corr/synth.hpp"

using namespace s2corr;
namespace fs = std::filesystem;

namespace {

int g_failures = 0;

void report(int criterion, const std::string& name, bool pass, const std::string& detail) {
  std::cout << (pass ? "[PASS] " : "[FAIL] ") << "criterion " << criterion << ": " << name
            << " — " << detail << "\n";
  if (!pass) ++g_failures;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

template <typename T>
double max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  double m = 0;
  auto ad = a.data();
  auto bd = b.data();
  for (std::size_t i = 0; i < ad.size(); ++i)
    m = std::max(m, std::abs(double(ad[i]) - double(bd[i])));
  return m;
}

ScanParams<double> random_params(int d_f, int heads, Rng& rng) {
  ScanParams<double> p = ScanParams<double>::init(d_f, heads, 0.8, rng);
  for (double& v : p.mix_w.data()) v = rng.uniform(-1.0, 1.0);
  return p;
}

void criterion1_chunked_oracle() {
  auto t0 = std::chrono::steady_clock::now();
  Rng root(101);
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    Rng rng = root.split(std::uint64_t(trial));
    const int h = 1 + int(rng.uniform() * 8);
    const int w = 1 + int(rng.uniform() * 8);
    int d_f = 1 + int(rng.uniform() * 8);
    int heads = 1 + int(rng.uniform() * 4);
    while (d_f % heads != 0) --heads;
    ScanParams<double> p = random_params(d_f, heads, rng);
    Tensor<double> xs = rng.uniform_tensor<double>(
        {std::size_t(h) * std::size_t(w), std::size_t(d_f)}, -1.0, 1.0);
    ChunkPlan plan = build_chunk_plan(h, w, w, 1.0, false);
    Tensor<double> chunked = scan_chunked(xs, plan, p);
    ScanResult<double> seq =
        scan_sequential(xs, Tensor<double>::zeros({std::size_t(d_f)}), p, true);
    worst = std::max(worst, max_abs_diff(chunked, seq.outputs));
  }
  const double elapsed = seconds_since(t0);
  std::ostringstream d;
  d << "100 cases, max abs diff " << worst << " (tol 1e-12), " << elapsed << " s (cap 10)";
  report(1, "chunked-scan oracle equivalence", worst <= 1e-12 && elapsed < 10.0, d.str());
}

void criterion2_snake_equivalence() {
  Rng root(102);
  double worst = 0.0;
  for (int trial = 0; trial < 50; ++trial) {
    Rng rng = root.split(std::uint64_t(trial));
    const int h = 2 + int(rng.uniform() * 6);
    const int w = 2 + int(rng.uniform() * 6);
    const int d_f = 4;
    ScanParams<double> p = random_params(d_f, 2, rng);
    Tensor<double> xs = rng.uniform_tensor<double>(
        {std::size_t(h) * std::size_t(w), std::size_t(d_f)}, -1.0, 1.0);
    const int chunk = 1 + int(rng.uniform() * w);
    ChunkPlan plan = build_chunk_plan(h, w, chunk, 1.0, true);
    Tensor<double> permuted({xs.dim(0), xs.dim(1)});
    for (std::size_t t = 0; t < plan.order.size(); ++t) {
      auto src = xs.row(std::size_t(plan.order[t]));
      std::copy(src.begin(), src.end(), permuted.row(t).begin());
    }
    ScanResult<double> seq =
        scan_sequential(permuted, Tensor<double>::zeros({std::size_t(d_f)}), p, true);
    Tensor<double> unpermuted({xs.dim(0), xs.dim(1)});
    for (std::size_t t = 0; t < plan.order.size(); ++t) {
      auto src = seq.outputs.row(t);
      std::copy(src.begin(), src.end(), unpermuted.row(std::size_t(plan.order[t])).begin());
    }
    worst = std::max(worst, max_abs_diff(scan_chunked(xs, plan, p), unpermuted));
  }
  std::ostringstream d;
  d << "50 cases, max abs diff " << worst << " (tol 1e-12)";
  report(2, "snake-permutation equivalence", worst <= 1e-12, d.str());
}

void criterion3_gradients() {
  auto t0 = std::chrono::steady_clock::now();
  GradCheckResult scan = gradcheck_scan<double>(20, 1234, 1e-6);
  GradCheckResult pipe = gradcheck_pipeline<double>(5, 905, 1e-6);
  const double elapsed = seconds_since(t0);
  std::ostringstream d;
  d << "scan max rel err " << scan.max_rel_error << " (tol 1e-5, worst " << scan.worst_param
    << "), pipeline " << pipe.max_rel_error << " (tol 1e-4, worst " << pipe.worst_param << "), "
    << elapsed << " s (cap 60)";
  report(3, "gradient correctness vs finite differences",
         scan.max_rel_error <= 1e-5 && pipe.max_rel_error <= 1e-4 && elapsed < 60.0, d.str());
}

void criterion4_geometric_decay() {
  Rng rng(104);
  bool ok = true;
  std::ostringstream d;
  {
    ScanParams<double> p = ScanParams<double>::init(8, 4, 0.8, rng);
    p.mix_w.fill(-20.0);
    Tensor<double> xs = rng.uniform_tensor<double>({10, 8}, -1.0, 1.0);
    double worst = 0.0;
    for (int dist = 1; dist <= 6; ++dist) {
      Tensor<double> inf = influence(xs, p, 8, dist);
      for (double v : inf.data()) worst = std::max(worst, std::abs(v - std::pow(0.8, dist)));
    }
    ok = ok && worst <= 1e-9;
    d << "prior-dominated |influence - 0.8^d| max " << worst << " (tol 1e-9)";
  }
  {
    ScanParams<double> p = random_params(8, 4, rng);
    Tensor<double> xs = rng.uniform_tensor<double>({10, 8}, -1.0, 1.0);
    double worst = 0.0;
    bool monotone = true;
    Tensor<double> running = Tensor<double>::full({8}, 1.0);
    Tensor<double> prev;
    for (int dist = 1; dist <= 9; ++dist) {
      const int step = 10 - dist + 1;
      Tensor<double> x({8}, std::vector<double>(xs.row(std::size_t(step - 1)).begin(),
                                                xs.row(std::size_t(step - 1)).end()));
      Tensor<double> ae = effective_decay(gates(x, p).decay, p);
      for (std::size_t c = 0; c < 8; ++c) running(c) *= ae(c);
      Tensor<double> inf = influence(xs, p, 10, dist);
      worst = std::max(worst, max_abs_diff(inf, running));
      if (dist > 1)
        for (std::size_t c = 0; c < 8; ++c) monotone = monotone && inf(c) <= prev(c);
      prev = inf;
    }
    ok = ok && worst <= 1e-8 && monotone;
    d << "; mixed-gate |influence - running product| max " << worst << " (tol 1e-8), monotone "
      << (monotone ? "yes" : "NO");
  }
  report(4, "geometric decay law", ok, d.str());
}

void criterion5_complexity_direction() {
  auto t0 = std::chrono::steady_clock::now();
  BenchReport r = bench_vocab_scaling({32, 64, 128, 256}, 5);
  const double scan_slope = r.slopes.at("class_scan");
  const double attn_slope = r.slopes.at("class_attention");
  const double elapsed = seconds_since(t0);
  std::ostringstream d;
  d << "class-scan slope " << scan_slope << " (< 1.3), class-attention slope " << attn_slope
    << " (> 1.7), " << elapsed << " s (cap 300)";
  report(5, "complexity direction over vocabulary size",
         scan_slope < 1.3 && attn_slope > 1.7 && elapsed < 300.0, d.str());
}

void criterion6_synthetic_denoising() {
  auto t0 = std::chrono::steady_clock::now();
  SynthConfig cfg;  // pinned: 16x16, 8 classes, d 16, d_f 16, seed 42
  AdamWConfig optim;  // AdamW, lr 2e-4
  TrainReport r = train_denoise<double>(cfg, 500, optim);
  const double elapsed = seconds_since(t0);
  const double ratio = r.final_loss / r.initial_loss;
  const double ratio_smooth = r.final_loss_smooth / r.initial_loss_smooth;
  // Margins recorded from the first oracle run of this pinned configuration:
  // ratio 0.391 (smoothed 0.376), raw 0.6367, refined 0.7109.
  const bool ok = !r.diverged && ratio <= 0.5 && ratio_smooth <= 0.45 &&
                  r.refined_accuracy_final > r.raw_accuracy &&
                  r.refined_accuracy_final - r.raw_accuracy >= 0.04 && elapsed < 300.0;
  std::ostringstream d;
  d << "loss " << r.initial_loss << " -> " << r.final_loss << " (ratio " << ratio
    << ", cap 0.5; smoothed " << ratio_smooth << ", pinned cap 0.45), raw acc "
    << r.raw_accuracy << ", refined " << r.refined_accuracy_final
    << " (pinned margin 0.04), " << elapsed << " s (cap 300)";
  report(6, "synthetic denoising training", ok, d.str());
}

void criterion7_tiled_inference() {
  bool ok = true;
  std::ostringstream d;
  const std::vector<int> origins = window_origins(896, 448, 0.333);
  ok = ok && origins == std::vector<int>{0, 299, 448};
  d << "origins(896,448,0.333) = [";
  for (std::size_t i = 0; i < origins.size(); ++i) d << (i ? "," : "") << origins[i];
  d << "] (expect [0,299,448])";

  TileConfig cfg{64, 0.333, 128, 192};
  const double value = 0.875;
  SegPrediction<double> pred = tiled_infer<double>(
      [&](int, int, int k) {
        return Tensor<double>::full({std::size_t(k), std::size_t(k), 3}, value);
      },
      cfg, 3);
  double worst = 0.0;
  for (double v : pred.logits.data()) worst = std::max(worst, std::abs(v - value));
  ok = ok && worst <= 1e-12;
  d << "; constant round-trip max diff " << worst << " (tol 1e-12)";

  Rng rng(107);
  bool covered = true;
  for (int trial = 0; trial < 20; ++trial) {
    const int kernel = 2 + int(rng.uniform() * 40);
    const int out_h = kernel + int(rng.uniform() * 100);
    const int out_w = kernel + int(rng.uniform() * 100);
    const double overlap = rng.uniform(0.0, 0.85);
    // tiled_infer raises if any pixel is uncovered, so completing is the check
    TileConfig c{kernel, overlap, out_h, out_w};
    try {
      tiled_infer<double>(
          [&](int, int, int k) {
            return Tensor<double>::zeros({std::size_t(k), std::size_t(k), 1});
          },
          c, 1);
    } catch (const std::exception&) {
      covered = false;
    }
  }
  ok = ok && covered;
  d << "; coverage >= 1 on 20 random configs " << (covered ? "yes" : "NO");
  report(7, "tiled inference", ok, d.str());
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
}

std::string dir_bytes(const fs::path& dir) {
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file()) files.push_back(e.path());
  std::sort(files.begin(), files.end());
  std::string all;
  for (const auto& f : files) {
    all += f.filename().string();
    all += '\0';
    all += slurp(f);
  }
  return all;
}

void criterion8_determinism() {
  bool ok = true;
  std::ostringstream d;
  const fs::path root = fs::temp_directory_path() / "s2corr_acceptance";
  fs::remove_all(root);
  fs::create_directories(root);

  {
    Rng rng(7);
    FeatureGrid<double> fv(4, 4, rng.uniform_tensor<double>({16, 8}, -1.0, 1.0));
    TextEmbeddings<double> ft(rng.uniform_tensor<double>({3, 8}, -1.0, 1.0),
                              {"road", "sky", "car"});
    save_feature_bundle(root / "bundle", fv, ft);
  }
  auto run = [&](const std::string& out, int threads) {
    std::ostringstream cmd;
    cmd << S2CORR_CLI_PATH << " refine --bundle " << (root / "bundle").string() << " --out "
        << (root / out).string() << " --d-f 6 --heads 2 --seed 7 --threads " << threads
        << " > /dev/null 2>&1";
    return std::system(cmd.str().c_str()) == 0;
  };
  ok = ok && run("a", 1) && run("b", 1) && run("c", 4);
  const bool rerun_same = dir_bytes(root / "a") == dir_bytes(root / "b");
  const bool threads_same = dir_bytes(root / "a") == dir_bytes(root / "c");
  ok = ok && rerun_same && threads_same;
  d << "refine rerun byte-identical " << (rerun_same ? "yes" : "NO") << ", threads 1 vs 4 "
    << (threads_same ? "yes" : "NO");

  Rng rng(108);
  bool roundtrip = true;
  for (int trial = 0; trial < 10; ++trial) {
    Tensor<double> t = rng.normal_tensor<double>({3, 4, 2});
    save_tensor(root / "rt.s2ct", t);
    Tensor<double> back = load_tensor<double>(root / "rt.s2ct");
    for (std::size_t i = 0; i < t.size(); ++i)
      roundtrip = roundtrip && t.data()[i] == back.data()[i];
  }
  ok = ok && roundtrip;
  d << "; serialization round-trip bit-exact " << (roundtrip ? "yes" : "NO");
  report(8, "determinism", ok, d.str());
}

void criterion9_miou_hand_case() {
  const std::vector<int> gt = {0, 0, 1, 1}, pred = {0, 1, 1, 1};
  IouReport rep = miou(pred, gt, 2);
  const double err = std::abs(rep.mean - 7.0 / 12.0);
  std::ostringstream d;
  d << "mean " << rep.mean << ", |mean - 7/12| = " << err << " (tol 1e-12)";
  report(9, "mIoU hand case", err <= 1e-12, d.str());
}

}  // namespace

int main() {
  criterion1_chunked_oracle();
  criterion2_snake_equivalence();
  criterion3_gradients();
  criterion4_geometric_decay();
  criterion5_complexity_direction();
  criterion6_synthetic_denoising();
  criterion7_tiled_inference();
  criterion8_determinism();
  criterion9_miou_hand_case();
  if (g_failures == 0)
    std::cout << "all acceptance criteria passed\n";
  else
    std::cout << g_failures << " acceptance criteria FAILED\n";
  return g_failures == 0 ? 0 : 1;
}
