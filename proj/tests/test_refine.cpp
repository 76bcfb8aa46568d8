#include <doctest.h>

#include <filesystem>

#include "s2corr/attention.hpp"
#include "s2corr/gradcheck.hpp"
#include "s2corr/params_io.hpp"
#include "s2corr/refine.hpp"
#include "s2corr/serialize.hpp"
#include "testutil.hpp"

using namespace s2corr;
namespace fs = std::filesystem;

namespace {

// Gate settings that make the scan forward its input: A ~ 0, B ~ 1,
// y = I h + 0 x ~ x.
ScanParams<double> passthrough_scan(int d_f) {
  ScanParams<double> p;
  p.heads = 1;
  p.w_a = Tensor<double>::zeros({std::size_t(d_f), std::size_t(d_f)});
  p.w_b = Tensor<double>::zeros({std::size_t(d_f), std::size_t(d_f)});
  p.b_a = Tensor<double>::full({std::size_t(d_f)}, -20.0);
  p.b_b = Tensor<double>::full({std::size_t(d_f)}, 20.0);
  p.w_out = Tensor<double>::identity(std::size_t(d_f));
  p.u_out = Tensor<double>::zeros({std::size_t(d_f), std::size_t(d_f)});
  p.gamma_logits = Tensor<double>::full({1}, logit(0.8));
  p.mix_w = Tensor<double>::full({1}, 20.0);
  return p;
}

struct TinyCase {
  FeatureGrid<double> fv;
  TextEmbeddings<double> ft;
  DomainTexts<double> dt;
  PipelineParams<double> params;
  ChunkPlan plan;
};

TinyCase make_tiny(std::uint64_t seed, int heads = 2) {
  Rng rng(seed);
  TinyCase t{FeatureGrid<double>(4, 4, rng.uniform_tensor<double>({16, 8}, -1.0, 1.0)),
             TextEmbeddings<double>(rng.uniform_tensor<double>({3, 8}, -1.0, 1.0),
                                    {"road", "sky", "car"}),
             DomainTexts<double>(rng.uniform_tensor<double>({2, 8}, -1.0, 1.0)),
             PipelineParams<double>::init(8, 6, 3, heads, 0.8, 2, rng),
             build_chunk_plan(4, 4, 2, 1.0, true)};
  return t;
}

}  // namespace

TEST_SUITE("refine") {

TEST_CASE("zero projection leaves the volume bitwise unchanged") {
  Rng rng(50);
  CorrelationVolume<double> e(2, 2, rng.uniform_tensor<double>({4, 3, 5}, -1.0, 1.0));
  FeatureGrid<double> fv(2, 2, rng.uniform_tensor<double>({4, 7}, -1.0, 1.0));
  ModulationParams<double> mp = ModulationParams<double>::zeros(5, 7);
  CHECK(testutil::bit_identical(modulate_image(e, fv, mp).values, e.values));
}

TEST_CASE("annihilating scale replaces the volume with the shift") {
  // Features are the unit vector e_0, so gamma = first projection column.
  const int d_f = 3, d = 2;
  Tensor<double> fvv = Tensor<double>::zeros({4, d});
  for (std::size_t i = 0; i < 4; ++i) fvv(i, 0) = 1.0;
  FeatureGrid<double> fv(2, 2, fvv);
  ModulationParams<double> mp = ModulationParams<double>::zeros(d_f, d);
  const double shift = 0.625;
  for (int r = 0; r < d_f; ++r) {
    mp.img_proj(std::size_t(r), 0) = -1.0;           // gamma = -1
    mp.img_proj(std::size_t(d_f + r), 0) = shift;    // beta = shift
  }
  Rng rng(51);
  CorrelationVolume<double> e(2, 2, rng.uniform_tensor<double>({4, 2, d_f}, -1.0, 1.0));
  CorrelationVolume<double> shifted = modulate_image(e, fv, mp);
  for (double v : shifted.values.data())
    CHECK(v == doctest::Approx(shift).epsilon(1e-14));
}

TEST_CASE("image modulation matches the elementwise formula oracle") {
  Rng rng(52);
  CorrelationVolume<double> e(2, 3, rng.uniform_tensor<double>({6, 2, 4}, -1.0, 1.0));
  FeatureGrid<double> fv(2, 3, rng.uniform_tensor<double>({6, 5}, -1.0, 1.0));
  ModulationParams<double> mp{rng.uniform_tensor<double>({8, 5}, -0.5, 0.5),
                              rng.uniform_tensor<double>({8, 5}, -0.5, 0.5)};
  CorrelationVolume<double> out = modulate_image(e, fv, mp);
  for (std::size_t i = 0; i < 6; ++i) {
    double gamma[4], beta[4];
    for (int r = 0; r < 4; ++r) {
      double sg = 0, sb = 0;
      for (std::size_t c = 0; c < 5; ++c) {
        sg += mp.img_proj(std::size_t(r), c) * fv.values(i, c);
        sb += mp.img_proj(std::size_t(4 + r), c) * fv.values(i, c);
      }
      gamma[r] = sg;
      beta[r] = sb;
    }
    for (std::size_t j = 0; j < 2; ++j)
      for (std::size_t k = 0; k < 4; ++k)
        CHECK(std::abs(out.values(i, j, k) -
                       (e.values(i, j, k) * (1.0 + gamma[k]) + beta[k])) <= 1e-13);
  }
}

TEST_CASE("text modulation identity and symmetric cancellation") {
  Rng rng(53);
  CorrelationVolume<double> e(2, 2, rng.uniform_tensor<double>({4, 2, 3}, -1.0, 1.0));
  {
    DomainTexts<double> dt(rng.uniform_tensor<double>({1, 5}, -1.0, 1.0));
    ModulationParams<double> mp = ModulationParams<double>::zeros(3, 5);
    CHECK(testutil::bit_identical(modulate_text(e, dt, mp).values, e.values));
  }
  {
    // Two opposite domain vectors average to zero modulation under any linear map.
    Tensor<double> v = rng.uniform_tensor<double>({1, 5}, -1.0, 1.0);
    Tensor<double> pair({2, 5});
    for (std::size_t c = 0; c < 5; ++c) {
      pair(0, c) = v(0, c);
      pair(1, c) = -v(0, c);
    }
    DomainTexts<double> dt(pair);
    ModulationParams<double> mp{rng.uniform_tensor<double>({6, 5}, -1.0, 1.0),
                                rng.uniform_tensor<double>({6, 5}, -1.0, 1.0)};
    CHECK(testutil::max_abs_diff(modulate_text(e, dt, mp).values, e.values) <= 1e-14);
  }
}

TEST_CASE("text modulation matches the mean-then-apply oracle") {
  Rng rng(54);
  CorrelationVolume<double> e(2, 2, rng.uniform_tensor<double>({4, 2, 3}, -1.0, 1.0));
  DomainTexts<double> dt(rng.uniform_tensor<double>({3, 5}, -1.0, 1.0));
  ModulationParams<double> mp{rng.uniform_tensor<double>({6, 5}, -0.5, 0.5),
                              rng.uniform_tensor<double>({6, 5}, -0.5, 0.5)};
  CorrelationVolume<double> out = modulate_text(e, dt, mp);

  double gamma[3] = {0, 0, 0}, beta[3] = {0, 0, 0};
  for (int d = 0; d < 3; ++d)
    for (int r = 0; r < 3; ++r) {
      double sg = 0, sb = 0;
      for (std::size_t c = 0; c < 5; ++c) {
        sg += mp.txt_proj(std::size_t(r), c) * dt.values(std::size_t(d), c);
        sb += mp.txt_proj(std::size_t(3 + r), c) * dt.values(std::size_t(d), c);
      }
      gamma[r] += sg / 3.0;
      beta[r] += sb / 3.0;
    }
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 2; ++j)
      for (std::size_t k = 0; k < 3; ++k)
        CHECK(std::abs(out.values(i, j, k) -
                       (e.values(i, j, k) * (1.0 + gamma[k]) + beta[k])) <= 1e-13);
}

TEST_CASE("pass-through spatial block is the identity to gate precision") {
  Rng rng(55);
  TinyCase t = make_tiny(550);
  t.params.blocks = 1;
  t.params.spatial_scan = passthrough_scan(6);
  t.params.mod = ModulationParams<double>::zeros(6, 8);
  CorrelationVolume<double> e(4, 4, rng.uniform_tensor<double>({16, 3, 6}, -1.0, 1.0));
  CorrelationVolume<double> out = spatial_aggregate(e, t.fv, t.params, t.plan);
  CHECK(testutil::max_abs_diff(out.values, e.values) <= 1e-6);
}

TEST_CASE("class-shared spatial parameters map identical slices identically") {
  Rng rng(56);
  TinyCase t = make_tiny(560);
  Tensor<double> vol({16, 2, 6});
  Tensor<double> slice = rng.uniform_tensor<double>({16, 6}, -1.0, 1.0);
  for (std::size_t i = 0; i < 16; ++i)
    for (std::size_t j = 0; j < 2; ++j)
      for (std::size_t k = 0; k < 6; ++k) vol(i, j, k) = slice(i, k);
  CorrelationVolume<double> e(4, 4, vol);
  CorrelationVolume<double> out = spatial_aggregate(e, t.fv, t.params, t.plan);
  for (std::size_t i = 0; i < 16; ++i)
    for (std::size_t k = 0; k < 6; ++k)
      CHECK(out.values(i, 0, k) == out.values(i, 1, k));
}

TEST_CASE("two blocks equal the block function composed twice") {
  Rng rng(57);
  TinyCase t = make_tiny(570);
  t.params.blocks = 2;
  CorrelationVolume<double> e(4, 4, rng.uniform_tensor<double>({16, 3, 6}, -1.0, 1.0));
  CorrelationVolume<double> out = spatial_aggregate(e, t.fv, t.params, t.plan);

  // Test-side composition: one modulate + per-class chunked scan, applied twice.
  auto one_block = [&](const CorrelationVolume<double>& in) {
    CorrelationVolume<double> m = modulate_image(in, t.fv, t.params.mod);
    Tensor<double> next(m.values.dims());
    for (int j = 0; j < 3; ++j) {
      Tensor<double> s({16, 6});
      for (std::size_t i = 0; i < 16; ++i)
        for (std::size_t k = 0; k < 6; ++k) s(i, k) = m.values(i, std::size_t(j), k);
      Tensor<double> r = scan_chunked(s, t.plan, t.params.spatial_scan);
      for (std::size_t i = 0; i < 16; ++i)
        for (std::size_t k = 0; k < 6; ++k) next(i, std::size_t(j), k) = r(i, k);
    }
    return CorrelationVolume<double>(4, 4, std::move(next));
  };
  CorrelationVolume<double> expect = one_block(one_block(e));
  CHECK(testutil::max_abs_diff(out.values, expect.values) <= 1e-12);
}

TEST_CASE("class aggregation runs the recurrence over class tokens per position") {
  Rng rng(58);
  TinyCase t = make_tiny(580);
  CorrelationVolume<double> e(4, 4, rng.uniform_tensor<double>({16, 5, 6}, -1.0, 1.0));
  DomainTexts<double> dt(rng.uniform_tensor<double>({2, 8}, -1.0, 1.0));
  CorrelationVolume<double> out = class_aggregate(e, dt, t.params);

  CorrelationVolume<double> mod = modulate_text(e, dt, t.params.mod);
  Tensor<double> h0 = Tensor<double>::zeros({6});
  for (std::size_t i = 0; i < 16; ++i) {
    Tensor<double> xs({5, 6});
    for (std::size_t j = 0; j < 5; ++j)
      for (std::size_t k = 0; k < 6; ++k) xs(j, k) = mod.values(i, j, k);
    ScanResult<double> seq = scan_sequential(xs, h0, t.params.class_scan, true);
    for (std::size_t j = 0; j < 5; ++j)
      for (std::size_t k = 0; k < 6; ++k)
        CHECK(std::abs(out.values(i, j, k) - seq.outputs(j, k)) <= 1e-12);
  }
}

TEST_CASE("positions with identical class rows refine identically") {
  Rng rng(59);
  TinyCase t = make_tiny(590);
  Tensor<double> row = rng.uniform_tensor<double>({3, 6}, -1.0, 1.0);
  Tensor<double> vol({16, 3, 6});
  for (std::size_t i = 0; i < 16; ++i)
    for (std::size_t j = 0; j < 3; ++j)
      for (std::size_t k = 0; k < 6; ++k) vol(i, j, k) = row(j, k);
  CorrelationVolume<double> out =
      class_aggregate(CorrelationVolume<double>(4, 4, vol), t.dt, t.params);
  for (std::size_t i = 1; i < 16; ++i)
    for (std::size_t j = 0; j < 3; ++j)
      for (std::size_t k = 0; k < 6; ++k)
        CHECK(out.values(i, j, k) == out.values(0, j, k));
}

TEST_CASE("single-class aggregation is a single recurrence step per position") {
  Rng rng(60);
  TinyCase t = make_tiny(600);
  CorrelationVolume<double> e(4, 4, rng.uniform_tensor<double>({16, 1, 6}, -1.0, 1.0));
  CHECK_NOTHROW(class_aggregate(e, t.dt, t.params));
}

TEST_CASE("decode cases") {
  Rng rng(61);
  TinyCase t = make_tiny(610);
  CorrelationVolume<double> e(4, 4, rng.uniform_tensor<double>({16, 3, 6}, -1.0, 1.0));

  t.params.decoder_w = Tensor<double>::zeros({1, 6});
  t.params.decoder_b = Tensor<double>::zeros({1});
  Tensor<double> zero_logits = decode(e, t.params);
  for (double v : zero_logits.data()) CHECK(v == 0.0);

  // d_f = 1, w = 1, b = 0 reads the single channel straight through.
  PipelineParams<double> p1 = t.params;
  p1.decoder_w = Tensor<double>::full({1, 1}, 1.0);
  CorrelationVolume<double> e1(4, 4, rng.uniform_tensor<double>({16, 3, 1}, -1.0, 1.0));
  Tensor<double> lg = decode(e1, p1);
  for (std::size_t i = 0; i < 16; ++i)
    for (std::size_t j = 0; j < 3; ++j) CHECK(lg(i, j) == e1.values(i, j, 0));

  t.params.decoder_w = rng.uniform_tensor<double>({1, 6}, -1.0, 1.0);
  t.params.decoder_b = Tensor<double>::full({1}, 0.37);
  Tensor<double> out = decode(e, t.params);
  for (std::size_t i = 0; i < 16; ++i)
    for (std::size_t j = 0; j < 3; ++j) {
      double acc = 0.37;
      for (std::size_t k = 0; k < 6; ++k) acc += t.params.decoder_w(0, k) * e.values(i, j, k);
      CHECK(std::abs(out(i, j) - acc) <= 1e-14);
    }
}

TEST_CASE("engineered identity settings reduce the pipeline to an affine map of C") {
  TinyCase t = make_tiny(620);
  const int d_f = 6;
  t.params.spatial_scan = passthrough_scan(d_f);
  t.params.class_scan = passthrough_scan(d_f);
  t.params.mod = ModulationParams<double>::zeros(d_f, 8);
  // Every class lifts onto e_0; the decoder reads channel 0 and shifts.
  t.params.lift.p = Tensor<double>::zeros({std::size_t(d_f), 3});
  for (std::size_t j = 0; j < 3; ++j) t.params.lift.p(0, j) = 1.0;
  t.params.decoder_w = Tensor<double>::zeros({1, std::size_t(d_f)});
  t.params.decoder_w(0, 0) = 1.0;
  t.params.decoder_b = Tensor<double>::full({1}, 0.5);

  Tensor<double> logits = forward(t.fv, t.ft, t.dt, t.params, t.plan);
  CorrelationMap<double> c = initial_correlation(t.fv, t.ft);
  for (std::size_t i = 0; i < 16; ++i)
    for (std::size_t j = 0; j < 3; ++j)
      CHECK(std::abs(logits(i, j) - (c.values(i, j) + 0.5)) <= 1e-6);
}

TEST_CASE("permuting class order permutes logit columns under a pass-through class scan") {
  TinyCase t = make_tiny(630);
  t.params.class_scan = passthrough_scan(6);
  // A shared lift column keeps class identity purely positional.
  Tensor<double> col = Rng(631).uniform_tensor<double>({6, 1}, -1.0, 1.0);
  for (std::size_t j = 0; j < 3; ++j)
    for (std::size_t k = 0; k < 6; ++k) t.params.lift.p(k, j) = col(k, 0);

  Tensor<double> base = forward(t.fv, t.ft, t.dt, t.params, t.plan);

  const int perm[3] = {2, 0, 1};
  Tensor<double> shuffled({3, 8});
  std::vector<std::string> names(3);
  for (int j = 0; j < 3; ++j) {
    for (std::size_t c = 0; c < 8; ++c)
      shuffled(std::size_t(j), c) = t.ft.values(std::size_t(perm[j]), c);
    names[std::size_t(j)] = t.ft.class_names[std::size_t(perm[j])];
  }
  Tensor<double> permuted =
      forward(t.fv, TextEmbeddings<double>(shuffled, names), t.dt, t.params, t.plan);
  for (std::size_t i = 0; i < 16; ++i)
    for (int j = 0; j < 3; ++j)
      CHECK(std::abs(permuted(i, std::size_t(j)) - base(i, std::size_t(perm[j]))) <= 1e-6);
}

TEST_CASE("forward is deterministic and thread-count independent") {
  TinyCase t = make_tiny(7);
  Tensor<double> a = forward(t.fv, t.ft, t.dt, t.params, t.plan, 1);
  Tensor<double> b = forward(t.fv, t.ft, t.dt, t.params, t.plan, 1);
  Tensor<double> c = forward(t.fv, t.ft, t.dt, t.params, t.plan, 4);
  CHECK(testutil::bit_identical(a, b));
  CHECK(testutil::bit_identical(a, c));
}

TEST_CASE("tiny-config logits match the recorded golden tensor bit-exactly") {
  TinyCase t = make_tiny(7);
  Tensor<double> logits = forward(t.fv, t.ft, t.dt, t.params, t.plan);
  const fs::path golden = fs::path(S2CORR_TEST_DATA_DIR) / "golden_forward_logits.s2ct";
  if (!fs::exists(golden)) {
    save_tensor(golden, logits);
    MESSAGE("golden capture written to ", golden.string());
  }
  CHECK(testutil::bit_identical(load_tensor<double>(golden), logits));
}

TEST_CASE("uniform logits give ln N_C and engineered one-hot logits give ~0 loss") {
  TinyCase t = make_tiny(640);
  std::vector<int> labels(16, 1);
  labels[3] = kIgnoreLabel;
  {
    PipelineParams<double> p = t.params;
    p.decoder_w = Tensor<double>::zeros({1, 6});
    p.decoder_b = Tensor<double>::full({1}, 2.5);
    LossAndGrads<double> lg = forward_backward(t.fv, t.ft, t.dt, labels, p, t.plan);
    CHECK(std::abs(lg.loss - std::log(3.0)) <= 1e-12);
  }
  {
    // Orthonormal features equal to the text rows make C one-hot; the
    // pass-through pipeline with a large decoder gain saturates the softmax.
    Tensor<double> basis = Tensor<double>::zeros({3, 8});
    basis(0, 0) = basis(1, 1) = basis(2, 2) = 1.0;
    TextEmbeddings<double> ft(basis, {"a", "b", "c"});
    Tensor<double> fvv = Tensor<double>::zeros({16, 8});
    std::vector<int> hard_labels(16);
    for (std::size_t i = 0; i < 16; ++i) {
      hard_labels[i] = int(i % 3);
      fvv(i, std::size_t(i % 3)) = 1.0;
    }
    FeatureGrid<double> fv(4, 4, fvv);
    PipelineParams<double> p = t.params;
    p.spatial_scan = passthrough_scan(6);
    p.class_scan = passthrough_scan(6);
    p.mod = ModulationParams<double>::zeros(6, 8);
    p.lift.p = Tensor<double>::zeros({6, 3});
    for (std::size_t j = 0; j < 3; ++j) p.lift.p(0, j) = 1.0;
    p.decoder_w = Tensor<double>::zeros({1, 6});
    p.decoder_w(0, 0) = 40.0;  // +40 margin between cosine 1 and 0
    p.decoder_b = Tensor<double>::zeros({1});
    LossAndGrads<double> lg = forward_backward(fv, ft, t.dt, hard_labels, p, t.plan);
    CHECK(lg.loss <= 1e-8);
  }
}

TEST_CASE("forward_backward validates labels") {
  TinyCase t = make_tiny(650);
  std::vector<int> all_ignored(16, kIgnoreLabel);
  CHECK_THROWS_AS(forward_backward(t.fv, t.ft, t.dt, all_ignored, t.params, t.plan),
                  ArgumentError);
  std::vector<int> out_of_range(16, 0);
  out_of_range[5] = 7;
  CHECK_THROWS_AS(forward_backward(t.fv, t.ft, t.dt, out_of_range, t.params, t.plan),
                  ArgumentError);
}

TEST_CASE("pipeline gradients agree with central finite differences") {
  GradCheckResult r = gradcheck_pipeline<double>(5, 905, 1e-6);
  CAPTURE(r.worst_param);
  CHECK(r.max_rel_error <= 1e-4);
}

TEST_CASE("forward_backward is bitwise identical across thread counts") {
  TinyCase t = make_tiny(660);
  std::vector<int> labels(16);
  for (std::size_t i = 0; i < 16; ++i) labels[i] = int(i % 3);
  LossAndGrads<double> a = forward_backward(t.fv, t.ft, t.dt, labels, t.params, t.plan, 1);
  LossAndGrads<double> b = forward_backward(t.fv, t.ft, t.dt, labels, t.params, t.plan, 4);
  CHECK(a.loss == b.loss);
  CHECK(testutil::bit_identical(a.grads.lift_p, b.grads.lift_p));
  CHECK(testutil::bit_identical(a.grads.spatial_scan.w_a, b.grads.spatial_scan.w_a));
  CHECK(testutil::bit_identical(a.grads.class_scan.w_out, b.grads.class_scan.w_out));
  CHECK(testutil::bit_identical(a.grads.img_proj, b.grads.img_proj));
}

TEST_CASE("pipeline parameter bundle round-trips bitwise") {
  TinyCase t = make_tiny(670);
  const fs::path dir = fs::temp_directory_path() / "s2corr_test_params";
  fs::remove_all(dir);
  PipelineConfig cfg;
  cfg.blocks = t.params.blocks;
  cfg.scan = ScanConfig{6, 2, 2, 1.0, true};
  cfg.seed = 670;
  save_pipeline_params(dir, t.params, cfg);

  PipelineConfig loaded_cfg;
  PipelineParams<double> loaded = load_pipeline_params<double>(dir, &loaded_cfg);
  CHECK(testutil::bit_identical(loaded.lift.p, t.params.lift.p));
  CHECK(testutil::bit_identical(loaded.mod.img_proj, t.params.mod.img_proj));
  CHECK(testutil::bit_identical(loaded.spatial_scan.w_a, t.params.spatial_scan.w_a));
  CHECK(testutil::bit_identical(loaded.class_scan.gamma_logits,
                                t.params.class_scan.gamma_logits));
  CHECK(testutil::bit_identical(loaded.decoder_w, t.params.decoder_w));
  CHECK(loaded.blocks == t.params.blocks);
  CHECK(loaded_cfg.scan.heads == 2);

  // The scan bundle uses the documented entry names.
  Bundle sb = Bundle::open(dir / "spatial_scan");
  for (const char* name :
       {"w_a", "b_a", "w_b", "b_b", "w_out", "u_out", "gamma_prior_logits", "mix_w"})
    CHECK(sb.has(name));
}

TEST_CASE("attention parameter bundle round-trips bitwise") {
  Rng rng(680);
  AttnParams<double> p = AttnParams<double>::init(6, 2, rng);
  const fs::path dir = fs::temp_directory_path() / "s2corr_test_attn_params";
  fs::remove_all(dir);
  save_attn_params(dir, p);
  AttnParams<double> loaded = load_attn_params<double>(dir);
  CHECK(testutil::bit_identical(loaded.spatial_wq, p.spatial_wq));
  CHECK(testutil::bit_identical(loaded.class_wv, p.class_wv));
  CHECK(loaded.window == 2);
}

}  // TEST_SUITE
