#pragma once

#include <functional>
#include <vector>

#include "s2corr/tensor.hpp"

namespace s2corr {

// Sliding-window geometry for high-resolution prediction.
struct TileConfig {
  int kernel = 448;
  double overlap = 0.333;
  int out_h = 448;
  int out_w = 896;

  void validate() const;
};

// Window origins along one axis: stride = round((1-overlap)*kernel), the last
// window backtracked to extent-kernel so coverage is complete; strictly
// increasing.
std::vector<int> window_origins(int extent, int kernel, double overlap);

template <typename T>
struct SegPrediction {
  int height = 0;
  int width = 0;
  int n_classes = 0;
  std::vector<int> labels;  // argmax, ties to the lowest class index
  Tensor<T> logits;         // out_h × out_w × N_C
};

// Produces the kernel×kernel×N_C logit block for a window anchored at (oy, ox).
template <typename T>
using WindowFn = std::function<Tensor<T>(int oy, int ox, int kernel)>;

// Per-pixel logits are the sum over covering windows divided by the coverage
// count. Windows are evaluated in sorted origin order so runs are bit-stable.
template <typename T>
SegPrediction<T> tiled_infer(const WindowFn<T>& window_fn, const TileConfig& cfg, int n_classes);

template <typename T>
std::vector<int> argmax_labels(const Tensor<T>& logits);  // rank 2 (HW×N_C) or 3 (H×W×N_C)

struct IouReport {
  std::vector<double> per_class;  // valid only where present_in_gt
  std::vector<bool> present_in_gt;
  double mean = 0.0;
};

// IoU_c = TP/(TP+FP+FN); mean over classes present in ground truth.
IouReport miou(const std::vector<int>& pred, const std::vector<int>& gt, int num_classes,
               int ignore = 255);

// Align-corners-false bilinear interpolation of an h×w×C field; upscale only.
template <typename T>
Tensor<T> bilinear_upsample(const Tensor<T>& logits, int out_h, int out_w);

}  // namespace s2corr
