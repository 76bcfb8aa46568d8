// Command-line surface: refine a feature bundle, run gradient checks, the
// synthetic trainer, benchmarks, and tiled inference.
//
// Exit codes: 0 ok, 1 check failure, 2 input format, 3 shape, 4 usage.
// S2CORR_LOG=1 (info) or 2 (debug) raises verbosity on stderr.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include <CLI11.hpp>

#include "s2corr/bundle_io.hpp"
#include "s2corr/gradcheck.hpp"
#include "s2corr/infer.hpp"
#include "s2corr/params_io.hpp"
#include "s2corr/synth.hpp"

namespace {

using namespace s2corr;

int log_level() {
  const char* v = std::getenv("S2CORR_LOG");
  return v ? std::atoi(v) : 0;
}

void info(const std::string& msg) {
  if (log_level() >= 1) std::cerr << "[s2corr] " << msg << "\n";
}

struct CommonOpts {
  std::string bundle, params, out;
  int d_f = 128;
  std::optional<int> chunk_len, num_chunks, chunks_per_row;
  double eta_cross = 1.0;
  bool snake = true;
  double gamma = 0.8;
  int heads = 4;
  int blocks = 2;
  std::uint64_t seed = 42;
  std::string dtype = "f64";
  int threads = 1;
  int kernel = 448;
  double overlap = 0.333;
  std::string out_res = "448x896";
};

// Resolves the chunk-length setting against a concrete grid. Exactly one of
// the three chunk flags may be set; the default is 16 chunks in total.
int resolve_chunk_len(const CommonOpts& o, int h, int w) {
  const int given = int(o.chunk_len.has_value()) + int(o.num_chunks.has_value()) +
                    int(o.chunks_per_row.has_value());
  if (given > 1)
    throw ArgumentError("set at most one of --chunk-len / --num-chunks / --chunks-per-row");
  int len;
  if (o.chunk_len) {
    len = *o.chunk_len;
  } else if (o.chunks_per_row) {
    if (*o.chunks_per_row < 1) throw ArgumentError("--chunks-per-row must be >= 1");
    len = std::max(1, w / *o.chunks_per_row);
  } else {
    len = chunk_len_for_total(h, w, o.num_chunks.value_or(16));
  }
  if (len < 1) throw ArgumentError("resolved chunk length must be >= 1");
  return len;
}

ChunkPlan make_plan(const CommonOpts& o, int h, int w) {
  const int requested = resolve_chunk_len(o, h, w);
  ChunkPlan plan = build_chunk_plan(h, w, requested, o.eta_cross, o.snake);
  if (plan.clamped)
    std::cerr << "[s2corr] chunk length " << requested << " does not divide W=" << w
              << "; clamped to " << plan.chunk_len << "\n";
  std::cerr << "[s2corr] resolved chunk length L=" << plan.chunk_len << " ("
            << plan.chunk_count() << " chunks)\n";
  return plan;
}

std::pair<int, int> parse_out_res(const std::string& s) {
  const auto x = s.find('x');
  if (x == std::string::npos) throw ArgumentError("--out-res must look like 448x896");
  return {std::stoi(s.substr(0, x)), std::stoi(s.substr(x + 1))};
}

std::vector<int> parse_int_list(const std::string& csv) {
  std::vector<int> out;
  std::stringstream ss(csv);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!item.empty()) out.push_back(std::stoi(item));
  return out;
}

template <typename T>
int run_refine(const CommonOpts& o) {
  FeatureBundle<T> in = load_feature_bundle<T>(o.bundle);
  const int h = in.features.height, w = in.features.width;
  ChunkPlan plan = make_plan(o, h, w);

  PipelineParams<T> params;
  if (!o.params.empty()) {
    PipelineConfig cfg;
    params = load_pipeline_params<T>(o.params, &cfg);
    info("loaded parameters from " + o.params);
  } else {
    Rng rng = Rng(o.seed).split(1);
    params = PipelineParams<T>::init(in.features.dim(), o.d_f, in.text.num_classes(), o.heads,
                                     T(o.gamma), o.blocks, rng);
    info("initialized random parameters (seed " + std::to_string(o.seed) + ")");
  }

  ForwardTrace<T> trace = forward_trace(in.features, in.text, in.domains, params, plan,
                                        o.threads);
  std::vector<int> labels = argmax_labels(trace.logits);
  Tensor<T> label_tensor({labels.size()});
  for (std::size_t i = 0; i < labels.size(); ++i) label_tensor(i) = T(labels[i]);

  Bundle out = Bundle::create(o.out);
  out.put("logits", trace.logits);
  out.put("labels", label_tensor);
  out.put("corr_initial", trace.corr.values);
  out.put("corr_post_spatial", trace.post_spatial.values);
  out.put("corr_post_class", trace.post_class.values);
  out.meta()["height"] = h;
  out.meta()["width"] = w;
  out.meta()["class_names"] = in.text.class_names;
  out.save();
  info("wrote refine outputs to " + o.out);
  return 0;
}

template <typename T>
int run_gradcheck(const CommonOpts& o, int draws_scan, int draws_pipeline) {
  const bool fault = [] {
    const char* v = std::getenv("S2CORR_FAULT_INJECT");
    return v && std::string(v) == "sign-flip";
  }();
  const double step = default_fd_step<T>();
  const double scan_thresh = scan_grad_threshold<T>();
  const double pipe_thresh = pipeline_grad_threshold<T>();
  std::cout << "gradcheck dtype=" << (sizeof(T) == 8 ? "f64" : "f32") << " fd_step=" << step
            << " thresholds: scan " << scan_thresh << ", pipeline " << pipe_thresh << "\n";
  if (fault) std::cout << "fault injection: sign-flip enabled\n";

  GradCheckResult scan = gradcheck_scan<T>(draws_scan, o.seed, step, fault);
  std::cout << "scan            max rel error " << scan.max_rel_error << " (worst "
            << scan.worst_param << ")\n";
  GradCheckResult chunked = gradcheck_chunked<T>(std::max(5, draws_scan / 4), o.seed, step, fault);
  std::cout << "chunked scan    max rel error " << chunked.max_rel_error << " (worst "
            << chunked.worst_param << ")\n";
  GradCheckResult pipe = gradcheck_pipeline<T>(draws_pipeline, o.seed, step, fault);
  std::cout << "pipeline        max rel error " << pipe.max_rel_error << " (worst "
            << pipe.worst_param << ")\n";

  bool ok = true;
  if (!scan.passes(scan_thresh)) {
    std::cout << "FAIL scan gradients: " << scan.worst_param << "\n";
    ok = false;
  }
  if (!chunked.passes(scan_thresh)) {
    std::cout << "FAIL chunked-scan gradients: " << chunked.worst_param << "\n";
    ok = false;
  }
  if (!pipe.passes(pipe_thresh)) {
    std::cout << "FAIL pipeline gradients: " << pipe.worst_param << "\n";
    ok = false;
  }
  std::cout << (ok ? "gradcheck OK\n" : "gradcheck FAILED\n");
  return ok ? 0 : 1;
}

template <typename T>
int run_make_bundle(const CommonOpts& o, double noise, int patches) {
  SynthConfig cfg;
  cfg.seed = o.seed;
  cfg.noise_sigma = noise;
  cfg.spurious_patches = patches;
  Rng rng = Rng(cfg.seed).split(0);
  SynthSample<T> sample = generate<T>(cfg, rng);
  save_feature_bundle(o.out, sample.features, sample.text);
  Bundle b = Bundle::open(o.out);
  Tensor<T> gt({sample.labels.size()});
  for (std::size_t i = 0; i < sample.labels.size(); ++i) gt(i) = T(sample.labels[i]);
  b.put("gt_labels", gt);
  b.put("clean_corr", sample.clean_corr.values);
  b.save();
  std::cout << "wrote " << cfg.height << "x" << cfg.width << " bundle with "
            << cfg.n_classes << " classes to " << o.out << "\n";
  return 0;
}

template <typename T>
int run_train_synth(const CommonOpts& o, int steps) {
  SynthConfig cfg;
  cfg.seed = o.seed;
  AdamWConfig optim;
  TrainReport report = train_denoise<T>(cfg, steps, optim, o.threads);
  std::filesystem::create_directories(o.out);
  {
    std::ofstream f(std::filesystem::path(o.out) / "train_report.json", std::ios::trunc);
    f << report.to_json().dump(2) << "\n";
  }
  {
    std::ofstream f(std::filesystem::path(o.out) / "train_curve.csv", std::ios::trunc);
    f << report.to_csv();
  }
  std::cout << "initial loss " << report.initial_loss << ", final loss " << report.final_loss
            << "\nraw accuracy " << report.raw_accuracy << ", refined accuracy "
            << report.refined_accuracy_final << "\n";
  if (report.diverged) {
    std::cout << "training diverged at step " << report.diverged_step << "\n";
    return 1;
  }
  return 0;
}

int run_bench(const CommonOpts& o, const std::string& kind, const std::string& sizes_csv,
              const std::string& chunk_lens_csv, int reps) {
  std::filesystem::create_directories(o.out);
  BenchReport report;
  std::string stem;
  if (kind == "vocab") {
    std::vector<int> sizes = parse_int_list(sizes_csv);
    if (sizes.size() < 3) throw ArgumentError("need >=3 sizes");
    report = bench_vocab_scaling(sizes, reps);
    stem = "vocab_scaling";
    for (const auto& [m, s] : report.slopes)
      std::cout << m << " log-log slope " << s << "\n";
  } else if (kind == "chunk") {
    std::vector<int> lens = parse_int_list(chunk_lens_csv);
    report = bench_chunk_speed(lens, 32, 32, 8, reps, std::max(o.threads, 2));
    stem = "chunk_speed";
    std::cout << "parallel outputs identical: "
              << (report.parallel_outputs_identical ? "yes" : "NO") << "\n";
  } else {
    throw ArgumentError("--kind must be vocab or chunk");
  }
  {
    std::ofstream f(std::filesystem::path(o.out) / (stem + ".json"), std::ios::trunc);
    f << report.to_json().dump(2) << "\n";
  }
  {
    std::ofstream f(std::filesystem::path(o.out) / (stem + ".csv"), std::ios::trunc);
    f << report.to_csv();
  }
  if (report.inconclusive) std::cerr << "[s2corr] warning: timings near clock resolution\n";
  return 0;
}

template <typename T>
int run_tile_infer(const CommonOpts& o, int stub_classes) {
  auto [out_h, out_w] = parse_out_res(o.out_res);
  TileConfig cfg{o.kernel, o.overlap, out_h, out_w};
  cfg.validate();

  SegPrediction<T> pred;
  std::optional<std::vector<int>> gt;
  std::vector<std::string> class_names;
  if (!o.bundle.empty()) {
    Bundle b = Bundle::open(o.bundle);
    if (!b.has("logit_field"))
      throw FormatError("bundle missing required entry \"logit_field\"");
    if (b.meta().contains("class_names"))
      class_names = b.meta()["class_names"].get<std::vector<std::string>>();
    Tensor<T> field = b.get_as<T>("logit_field");
    if (field.rank() != 3 || int(field.dim(0)) != out_h || int(field.dim(1)) != out_w)
      throw DimensionError("tensor \"logit_field\" must be out_h x out_w x N_C");
    const int n_c = int(field.dim(2));
    WindowFn<T> window = [&](int oy, int ox, int k) {
      Tensor<T> block({std::size_t(k), std::size_t(k), std::size_t(n_c)});
      for (int y = 0; y < k; ++y)
        for (int x = 0; x < k; ++x)
          for (int c = 0; c < n_c; ++c)
            block(std::size_t(y), std::size_t(x), std::size_t(c)) =
                field(std::size_t(oy + y), std::size_t(ox + x), std::size_t(c));
      return block;
    };
    pred = tiled_infer(window, cfg, n_c);
    if (b.has("gt_labels")) {
      Tensor<T> g = b.get_as<T>("gt_labels");
      gt.emplace(g.size());
      for (std::size_t i = 0; i < g.size(); ++i) (*gt)[i] = int(g.data()[i]);
    }
  } else {
    // Constant-logit stub; argmax ties resolve to class 0 everywhere.
    WindowFn<T> window = [&](int, int, int k) {
      return Tensor<T>::full({std::size_t(k), std::size_t(k), std::size_t(stub_classes)}, T(1));
    };
    pred = tiled_infer(window, cfg, stub_classes);
  }

  Bundle out = Bundle::create(o.out);
  Tensor<T> label_tensor({pred.labels.size()});
  for (std::size_t i = 0; i < pred.labels.size(); ++i) label_tensor(i) = T(pred.labels[i]);
  out.put("labels", label_tensor);
  out.put("logits", pred.logits);
  out.meta()["height"] = pred.height;
  out.meta()["width"] = pred.width;
  out.save();
  if (gt) {
    IouReport iou = miou(pred.labels, *gt, pred.n_classes);
    nlohmann::json per;
    for (int c = 0; c < pred.n_classes; ++c)
      if (iou.present_in_gt[std::size_t(c)]) {
        const std::string name = std::size_t(c) < class_names.size()
                                     ? class_names[std::size_t(c)]
                                     : "class_" + std::to_string(c);
        per[name] = iou.per_class[std::size_t(c)];
      }
    nlohmann::json j = {{"per_class", per}, {"mean_iou", iou.mean}};
    std::ofstream f(std::filesystem::path(o.out) / "metrics.json", std::ios::trunc);
    f << j.dump(2) << "\n";
    std::cout << "mean IoU " << iou.mean << "\n";
  }
  return 0;
}

template <typename F32, typename F64>
int dispatch_dtype(const std::string& dtype, F32&& f32_fn, F64&& f64_fn) {
  if (dtype == "f32") return f32_fn();
  if (dtype == "f64") return f64_fn();
  throw ArgumentError("--dtype must be f32 or f64");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"selective state-space correlation refinement toolkit"};
  app.name("s2corr");
  app.set_help_all_flag("--help-all", "print help for every subcommand");
  app.require_subcommand(1);

  CommonOpts o;
  int steps = 500;
  int draws_scan = 20, draws_pipeline = 5;
  int reps = 5;
  int stub_classes = 3;
  std::string bench_kind = "vocab";
  std::string sizes_csv = "32,64,128,256";
  std::string chunk_lens_csv = "8,16,32";

  auto add_common = [&](CLI::App* cmd, bool with_grid_flags) {
    cmd->add_option("--seed", o.seed, "root RNG seed")->capture_default_str();
    cmd->add_option("--dtype", o.dtype, "compute dtype: f32 or f64")->capture_default_str();
    cmd->add_option("--threads", o.threads, "worker threads (1 = fully sequential)")
        ->capture_default_str();
    if (with_grid_flags) {
      cmd->add_option("--d-f", o.d_f, "correlation embedding dimension")->capture_default_str();
      cmd->add_option("--chunk-len", o.chunk_len, "spatial chunk length in tokens");
      cmd->add_option("--num-chunks", o.num_chunks, "total chunk count (L = HW/n)");
      cmd->add_option("--chunks-per-row", o.chunks_per_row, "chunks per grid row (L = W/n)");
      cmd->add_option("--eta-cross", o.eta_cross, "cross-row state handoff coefficient")
          ->capture_default_str();
      cmd->add_option("--snake", o.snake, "alternate scan direction between rows")
          ->capture_default_str();
      cmd->add_option("--gamma", o.gamma, "geometric decay prior in (0,1)")
          ->capture_default_str();
      cmd->add_option("--heads", o.heads, "decay-prior head count (divides d_f)")
          ->capture_default_str();
      cmd->add_option("--blocks", o.blocks, "stacked spatial aggregation blocks")
          ->capture_default_str();
    }
  };

  CLI::App* refine = app.add_subcommand("refine", "refine a feature bundle to logits and labels");
  refine->add_option("--bundle", o.bundle, "input feature bundle directory")->required();
  refine->add_option("--params", o.params, "pipeline parameter bundle (random init if absent)");
  refine->add_option("--out", o.out, "output bundle directory")->required();
  add_common(refine, true);

  CLI::App* gradcheck = app.add_subcommand("gradcheck", "finite-difference gradient suites");
  gradcheck->add_option("--draws-scan", draws_scan, "random draws for the scan suite")
      ->capture_default_str();
  gradcheck->add_option("--draws-pipeline", draws_pipeline, "random draws for the pipeline suite")
      ->capture_default_str();
  add_common(gradcheck, false);

  double bundle_noise = 0.5;
  int bundle_patches = 3;
  CLI::App* make_bundle =
      app.add_subcommand("make-bundle", "export a synthetic feature bundle with ground truth");
  make_bundle->add_option("--out", o.out, "bundle output directory")->required();
  make_bundle->add_option("--noise", bundle_noise, "feature noise sigma")->capture_default_str();
  make_bundle->add_option("--patches", bundle_patches, "spurious wrong-class patches")
      ->capture_default_str();
  add_common(make_bundle, false);

  CLI::App* train = app.add_subcommand("train-synth", "synthetic denoising training loop");
  train->add_option("--steps", steps, "optimizer steps")->capture_default_str();
  train->add_option("--out", o.out, "report output directory")->required();
  add_common(train, false);

  CLI::App* bench = app.add_subcommand("bench", "scaling and throughput benchmarks");
  bench->add_option("--kind", bench_kind, "vocab or chunk")->capture_default_str();
  bench->add_option("--sizes", sizes_csv, "vocabulary sizes (>=3, increasing)")
      ->capture_default_str();
  bench->add_option("--chunk-lens", chunk_lens_csv, "chunk lengths for --kind chunk")
      ->capture_default_str();
  bench->add_option("--reps", reps, "timing repetitions (min 5 applied)")->capture_default_str();
  bench->add_option("--out", o.out, "report output directory")->required();
  add_common(bench, false);

  CLI::App* tile = app.add_subcommand("tile-infer", "sliding-window tiled inference");
  tile->add_option("--bundle", o.bundle, "bundle with a logit_field tensor (stub if absent)");
  tile->add_option("--out", o.out, "output bundle directory")->required();
  tile->add_option("--kernel", o.kernel, "window side in pixels")->capture_default_str();
  tile->add_option("--overlap", o.overlap, "window overlap fraction in [0,1)")
      ->capture_default_str();
  tile->add_option("--out-res", o.out_res, "output resolution HxW")->capture_default_str();
  tile->add_option("--stub-classes", stub_classes, "class count for the constant-logit stub")
      ->capture_default_str();
  add_common(tile, false);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);  // --help and friends
    app.exit(e);
    return 4;
  }

  try {
    if (refine->parsed())
      return dispatch_dtype(o.dtype, [&] { return run_refine<float>(o); },
                            [&] { return run_refine<double>(o); });
    if (gradcheck->parsed())
      return dispatch_dtype(
          o.dtype, [&] { return run_gradcheck<float>(o, draws_scan, draws_pipeline); },
          [&] { return run_gradcheck<double>(o, draws_scan, draws_pipeline); });
    if (make_bundle->parsed())
      return dispatch_dtype(
          o.dtype, [&] { return run_make_bundle<float>(o, bundle_noise, bundle_patches); },
          [&] { return run_make_bundle<double>(o, bundle_noise, bundle_patches); });
    if (train->parsed())
      return dispatch_dtype(o.dtype, [&] { return run_train_synth<float>(o, steps); },
                            [&] { return run_train_synth<double>(o, steps); });
    if (bench->parsed()) return run_bench(o, bench_kind, sizes_csv, chunk_lens_csv, reps);
    if (tile->parsed())
      return dispatch_dtype(o.dtype, [&] { return run_tile_infer<float>(o, stub_classes); },
                            [&] { return run_tile_infer<double>(o, stub_classes); });
  } catch (const FormatError& e) {
    std::cerr << "error (input format): " << e.what() << "\n";
    return 2;
  } catch (const DimensionError& e) {
    std::cerr << "error (shape): " << e.what() << "\n";
    return 3;
  } catch (const ArgumentError& e) {
    std::cerr << "error (usage): " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
