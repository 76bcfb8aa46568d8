#pragma once

#include <string>

#include "s2corr/refine.hpp"

namespace s2corr {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::string worst_param;

  bool passes(double threshold) const { return max_rel_error <= threshold; }
};

// Central finite differences against scan_backward over random short sequences
// (both gate modes, random h0, gradients flowing into every output and the
// final state). Checks all parameters plus xs and h0. fault_inject flips the
// sign of one analytic gradient entry so harness failures are detectable.
template <typename T>
GradCheckResult gradcheck_scan(int draws, std::uint64_t seed, double fd_step,
                               bool fault_inject = false);

// Same check through scan_chunked_backward, including the eta_cross gradient.
template <typename T>
GradCheckResult gradcheck_chunked(int draws, std::uint64_t seed, double fd_step,
                                  bool fault_inject = false);

// Full-pipeline cross-entropy gradients on tiny random configurations.
template <typename T>
GradCheckResult gradcheck_pipeline(int draws, std::uint64_t seed, double fd_step,
                                   bool fault_inject = false);

// The finite-difference oracle always differentiates a double-precision copy
// of the model at the same point, so one step works for both dtypes; f32 runs
// against a relaxed threshold, which callers report.
template <typename T>
constexpr double default_fd_step() {
  return 1e-6;
}
template <typename T>
constexpr double scan_grad_threshold() {
  return sizeof(T) == 8 ? 1e-5 : 1e-3;
}
template <typename T>
constexpr double pipeline_grad_threshold() {
  return sizeof(T) == 8 ? 1e-4 : 1e-3;
}

}  // namespace s2corr
