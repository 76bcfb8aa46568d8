#pragma once

#include <functional>
#include <map>
#include <string>

#include <json.hpp>

#include "s2corr/optim.hpp"
#include "s2corr/refine.hpp"

namespace s2corr {

// Synthetic domain-shift workload: blob-shaped class regions whose clean
// features recover the labels exactly, corrupted by dense Gaussian noise and
// rectangular patches pushed toward a wrong class prototype.
struct SynthConfig {
  int height = 16;
  int width = 16;
  int n_classes = 8;
  int feat_dim = 16;   // d, the encoder-feature dimension
  int embed_dim = 16;  // d_f, the correlation-embedding dimension
  int blobs_per_class = 1;
  double noise_sigma = 0.5;
  int spurious_patches = 3;
  double spurious_gain = 1.2;
  std::uint64_t seed = 42;

  void validate() const;
};

template <typename T>
struct SynthSample {
  FeatureGrid<T> features;        // corrupted, the model input
  FeatureGrid<T> clean_features;  // before corruption
  TextEmbeddings<T> text;         // class prototypes
  std::vector<int> labels;        // HW ground truth, consistent with clean_corr argmax
  CorrelationMap<T> clean_corr;
};

template <typename T>
SynthSample<T> generate(const SynthConfig& cfg, Rng& rng);

struct MachineFingerprint {
  std::string cpu_model;
  unsigned hardware_threads = 0;
};
MachineFingerprint machine_fingerprint();

struct TrainReport {
  std::vector<double> losses;       // per-step training loss (fresh sample each step)
  std::vector<double> eval_losses;  // loss on the fixed held-out sample, pre-update
  double initial_loss = 0.0;        // training loss at step 1
  double final_loss = 0.0;          // training loss at the last step
  double initial_loss_smooth = 0.0; // mean over the first 20 steps
  double final_loss_smooth = 0.0;   // mean over the last 20 steps
  double raw_accuracy = 0.0;        // argmax of the corrupted correlation map
  double refined_accuracy_initial = 0.0;
  double refined_accuracy_final = 0.0;
  double param_max_delta = 0.0;     // max |theta_final - theta_init| over all entries
  double seconds_per_step = 0.0;
  bool diverged = false;
  int diverged_step = -1;
  MachineFingerprint machine;
  int threads = 1;

  nlohmann::json to_json() const;
  std::string to_csv() const;  // one row per step: step, loss, eval_loss
};

// Trains the pipeline on freshly generated corrupted samples (one per step,
// derived from cfg.seed by fixed stream splitting) and scores a held-out
// sample before and after.
template <typename T>
TrainReport train_denoise(const SynthConfig& cfg, int steps, const AdamWConfig& optim,
                          int threads = 1);

struct BenchRow {
  std::string method;
  int n = 0;              // vocabulary size or chunk length
  double median_seconds = 0.0;
  int inner_iters = 1;
  double throughput = 0.0;  // tokens/s where meaningful
  int threads = 1;
};

struct BenchReport {
  std::vector<BenchRow> rows;
  std::map<std::string, double> slopes;  // method -> fitted log-log slope
  MachineFingerprint machine;
  bool inconclusive = false;
  bool parallel_outputs_identical = true;

  nlohmann::json to_json() const;
  std::string to_csv() const;
};

using BenchMethod = std::pair<std::string, std::function<void(int)>>;

// Times each method at each size (median of >= 5 reps after 2 warmups) and
// fits a log-log slope per method. sizes must be >= 3 and strictly increasing.
BenchReport bench_vocab_scaling(const std::vector<int>& sizes, int reps,
                                const std::vector<BenchMethod>& methods);

// Default comparison arms: the class-dimension scan vs dense class attention
// on a fixed 16x16 grid with d_f = 32 (f32 workload).
BenchReport bench_vocab_scaling(const std::vector<int>& sizes, int reps);

// scan_chunked throughput per chunk length, single-threaded and class-parallel;
// the two modes must produce bit-identical outputs.
BenchReport bench_chunk_speed(const std::vector<int>& chunk_lens, int height, int width,
                              int n_classes, int reps, int threads);

}  // namespace s2corr
