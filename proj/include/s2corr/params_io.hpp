#pragma once

#include <filesystem>

#include "s2corr/attention.hpp"
#include "s2corr/refine.hpp"
#include "s2corr/serialize.hpp"

namespace s2corr {

// Scan-plan settings carried alongside parameter bundles.
struct ScanConfig {
  int d_f = 128;
  int heads = 4;
  int chunk_len = 64;
  double eta_cross = 1.0;
  bool snake = true;
};

// ScanParams bundle: entries w_a, b_a, w_b, b_b, w_out, u_out,
// gamma_prior_logits, mix_w; the scan config rides in the manifest meta.
template <typename T>
void save_scan_params(const std::filesystem::path& dir, const ScanParams<T>& p,
                      const ScanConfig& cfg);

template <typename T>
ScanParams<T> load_scan_params(const std::filesystem::path& dir, ScanConfig* cfg = nullptr);

// PipelineParams bundle: nested bundles lift/, mod/, spatial_scan/,
// class_scan/, decoder/ plus config.json at the root.
struct PipelineConfig {
  int blocks = 2;
  ScanConfig scan;
  std::uint64_t seed = 0;
};

template <typename T>
void save_pipeline_params(const std::filesystem::path& dir, const PipelineParams<T>& p,
                          const PipelineConfig& cfg);

template <typename T>
PipelineParams<T> load_pipeline_params(const std::filesystem::path& dir,
                                       PipelineConfig* cfg = nullptr);

// Attention baseline parameters use the same bundle convention; the window
// radius rides in the manifest meta.
template <typename T>
void save_attn_params(const std::filesystem::path& dir, const AttnParams<T>& p);

template <typename T>
AttnParams<T> load_attn_params(const std::filesystem::path& dir);

}  // namespace s2corr
