#include "s2corr/infer.hpp"

#include <algorithm>
#include <cmath>

namespace s2corr {

void TileConfig::validate() const {
  if (kernel < 1) throw ArgumentError("kernel must be >= 1");
  if (overlap < 0.0 || overlap >= 1.0) throw ArgumentError("overlap must lie in [0, 1)");
  if (kernel > out_h || kernel > out_w)
    throw ArgumentError("kernel exceeds the output resolution");
}

std::vector<int> window_origins(int extent, int kernel, double overlap) {
  if (kernel > extent) throw ArgumentError("kernel larger than extent");
  if (overlap < 0.0 || overlap >= 1.0) throw ArgumentError("overlap must lie in [0, 1)");
  // round-half-up
  int stride = int(std::floor((1.0 - overlap) * kernel + 0.5));
  stride = std::max(1, stride);
  std::vector<int> origins{0};
  while (origins.back() + kernel < extent) {
    int next = origins.back() + stride;
    if (next + kernel > extent) next = extent - kernel;  // backtrack for full coverage
    if (next <= origins.back()) break;
    origins.push_back(next);
  }
  return origins;
}

template <typename T>
SegPrediction<T> tiled_infer(const WindowFn<T>& window_fn, const TileConfig& cfg, int n_classes) {
  cfg.validate();
  if (n_classes < 1) throw ArgumentError("n_classes must be >= 1");
  const std::vector<int> ys = window_origins(cfg.out_h, cfg.kernel, cfg.overlap);
  const std::vector<int> xs = window_origins(cfg.out_w, cfg.kernel, cfg.overlap);
  const std::size_t hh = std::size_t(cfg.out_h), ww = std::size_t(cfg.out_w),
                    cc = std::size_t(n_classes);
  Tensor<T> sum({hh, ww, cc});
  std::vector<int> coverage(hh * ww, 0);
  for (int oy : ys)
    for (int ox : xs) {
      Tensor<T> block = window_fn(oy, ox, cfg.kernel);
      if (block.rank() != 3 || int(block.dim(0)) != cfg.kernel ||
          int(block.dim(1)) != cfg.kernel || int(block.dim(2)) != n_classes)
        throw ArgumentError("window produced logits of the wrong shape");
      for (int y = 0; y < cfg.kernel; ++y)
        for (int x = 0; x < cfg.kernel; ++x) {
          const std::size_t py = std::size_t(oy + y), px = std::size_t(ox + x);
          ++coverage[py * ww + px];
          for (std::size_t c = 0; c < cc; ++c)
            sum(py, px, c) += block(std::size_t(y), std::size_t(x), c);
        }
    }
  for (std::size_t p = 0; p < coverage.size(); ++p) {
    if (coverage[p] < 1) throw ArgumentError("window layout left a pixel uncovered");
    for (std::size_t c = 0; c < cc; ++c)
      sum.data()[p * cc + c] /= T(coverage[p]);
  }
  SegPrediction<T> pred;
  pred.height = cfg.out_h;
  pred.width = cfg.out_w;
  pred.n_classes = n_classes;
  pred.labels = argmax_labels(sum);
  pred.logits = std::move(sum);
  return pred;
}

template <typename T>
std::vector<int> argmax_labels(const Tensor<T>& logits) {
  if (logits.rank() != 2 && logits.rank() != 3)
    throw DimensionError("argmax_labels expects rank-2 or rank-3 logits");
  const std::size_t n_c = logits.dim(logits.rank() - 1);
  const std::size_t n = logits.size() / n_c;
  std::vector<int> labels(n);
  const T* p = logits.data().data();
  for (std::size_t i = 0; i < n; ++i) {
    int best = 0;
    T best_v = p[i * n_c];
    for (std::size_t j = 1; j < n_c; ++j)
      if (p[i * n_c + j] > best_v) {  // strict: ties keep the lowest index
        best_v = p[i * n_c + j];
        best = int(j);
      }
    labels[i] = best;
  }
  return labels;
}

IouReport miou(const std::vector<int>& pred, const std::vector<int>& gt, int num_classes,
               int ignore) {
  if (pred.size() != gt.size()) throw DimensionError("prediction/ground-truth size mismatch");
  std::vector<long long> tp(std::size_t(num_classes), 0), fp(std::size_t(num_classes), 0),
      fn(std::size_t(num_classes), 0);
  std::vector<bool> in_gt(std::size_t(num_classes), false), in_pred(std::size_t(num_classes),
                                                                    false);
  std::size_t counted = 0;
  for (std::size_t i = 0; i < gt.size(); ++i) {
    if (gt[i] == ignore) continue;
    if (gt[i] < 0 || gt[i] >= num_classes ||
        (pred[i] != ignore && (pred[i] < 0 || pred[i] >= num_classes)))
      throw ArgumentError("label outside [0, num_classes)");
    ++counted;
    in_gt[std::size_t(gt[i])] = true;
    if (pred[i] == ignore) {  // an ignored prediction at a valid pixel is a miss
      ++fn[std::size_t(gt[i])];
      continue;
    }
    in_pred[std::size_t(pred[i])] = true;
    if (pred[i] == gt[i]) {
      ++tp[std::size_t(gt[i])];
    } else {
      ++fp[std::size_t(pred[i])];
      ++fn[std::size_t(gt[i])];
    }
  }
  if (counted == 0) throw ArgumentError("no pixels remain after ignore masking");
  IouReport rep;
  rep.per_class.assign(std::size_t(num_classes), 0.0);
  rep.present_in_gt = in_gt;
  double sum = 0.0;
  int n_present = 0;
  for (int c = 0; c < num_classes; ++c) {
    const long long denom = tp[c] + fp[c] + fn[c];
    rep.per_class[std::size_t(c)] = denom > 0 ? double(tp[c]) / double(denom) : 0.0;
    if (in_gt[std::size_t(c)]) {
      sum += rep.per_class[std::size_t(c)];
      ++n_present;
    }
  }
  rep.mean = sum / double(n_present);
  return rep;
}

template <typename T>
Tensor<T> bilinear_upsample(const Tensor<T>& logits, int out_h, int out_w) {
  if (logits.rank() != 3) throw DimensionError("bilinear_upsample expects h x w x C");
  const int in_h = int(logits.dim(0)), in_w = int(logits.dim(1));
  const std::size_t cc = logits.dim(2);
  if (out_h < in_h || out_w < in_w) throw ArgumentError("bilinear_upsample does not downscale");
  Tensor<T> out({std::size_t(out_h), std::size_t(out_w), cc});
  const double sy = double(in_h) / double(out_h);
  const double sx = double(in_w) / double(out_w);
  for (int y = 0; y < out_h; ++y) {
    double fy = (double(y) + 0.5) * sy - 0.5;
    fy = std::clamp(fy, 0.0, double(in_h - 1));
    const int y0 = int(std::floor(fy));
    const int y1 = std::min(y0 + 1, in_h - 1);
    const T wy = T(fy - double(y0));
    for (int x = 0; x < out_w; ++x) {
      double fx = (double(x) + 0.5) * sx - 0.5;
      fx = std::clamp(fx, 0.0, double(in_w - 1));
      const int x0 = int(std::floor(fx));
      const int x1 = std::min(x0 + 1, in_w - 1);
      const T wx = T(fx - double(x0));
      for (std::size_t c = 0; c < cc; ++c) {
        const T top = logits(std::size_t(y0), std::size_t(x0), c) * (T(1) - wx) +
                      logits(std::size_t(y0), std::size_t(x1), c) * wx;
        const T bot = logits(std::size_t(y1), std::size_t(x0), c) * (T(1) - wx) +
                      logits(std::size_t(y1), std::size_t(x1), c) * wx;
        out(std::size_t(y), std::size_t(x), c) = top * (T(1) - wy) + bot * wy;
      }
    }
  }
  return out;
}

template SegPrediction<float> tiled_infer(const WindowFn<float>&, const TileConfig&, int);
template SegPrediction<double> tiled_infer(const WindowFn<double>&, const TileConfig&, int);
template std::vector<int> argmax_labels(const Tensor<float>&);
template std::vector<int> argmax_labels(const Tensor<double>&);
template Tensor<float> bilinear_upsample(const Tensor<float>&, int, int);
template Tensor<double> bilinear_upsample(const Tensor<double>&, int, int);

}  // namespace s2corr
