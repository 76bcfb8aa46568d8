#include <doctest.h>

#include "s2corr/infer.hpp"
#include "testutil.hpp"

using namespace s2corr;

TEST_SUITE("infer") {

TEST_CASE("window origins: exact fit, backtracked tail, dedupe") {
  CHECK(window_origins(448, 448, 0.333) == std::vector<int>{0});
  CHECK(window_origins(896, 448, 0.333) == std::vector<int>{0, 299, 448});
  CHECK(window_origins(10, 4, 0.5) == std::vector<int>{0, 2, 4, 6});
  CHECK_THROWS_AS(window_origins(100, 200, 0.333), ArgumentError);
  CHECK_THROWS_AS(window_origins(100, 50, 1.0), ArgumentError);
}

TEST_CASE("window origins are strictly increasing and cover the extent") {
  Rng rng(80);
  for (int trial = 0; trial < 20; ++trial) {
    const int kernel = 3 + int(rng.uniform() * 60);
    const int extent = kernel + int(rng.uniform() * 300);
    const double overlap = rng.uniform(0.0, 0.9);
    std::vector<int> origins = window_origins(extent, kernel, overlap);
    std::vector<int> covered(std::size_t(extent), 0);
    int prev = -1;
    for (int o : origins) {
      CHECK(o > prev);
      prev = o;
      CHECK(o + kernel <= extent);
      for (int i = o; i < o + kernel; ++i) ++covered[std::size_t(i)];
    }
    for (int c : covered) CHECK(c >= 1);
  }
}

TEST_CASE("single covering window is returned unchanged") {
  Rng rng(81);
  Tensor<double> block = rng.uniform_tensor<double>({8, 8, 3}, -1.0, 1.0);
  TileConfig cfg{8, 0.5, 8, 8};
  SegPrediction<double> pred = tiled_infer<double>(
      [&](int, int, int) { return block; }, cfg, 3);
  CHECK(testutil::max_abs_diff(pred.logits, block) == 0.0);
}

TEST_CASE("constant model survives accumulation unchanged") {
  TileConfig cfg{4, 0.5, 10, 6};
  SegPrediction<double> pred = tiled_infer<double>(
      [&](int, int, int k) {
        return Tensor<double>::full({std::size_t(k), std::size_t(k), 2}, 1.25);
      },
      cfg, 2);
  for (double v : pred.logits.data()) CHECK(std::abs(v - 1.25) <= 1e-12);
  for (int l : pred.labels) CHECK(l == 0);  // tie broken toward class 0
}

TEST_CASE("two half-overlapping windows average in the overlap") {
  // extent 6, kernel 4, overlap 0.5: origins 0 and 2; columns 2..3 see both.
  TileConfig cfg{4, 0.5, 4, 6};
  const double a = 2.0, b = 5.0;
  SegPrediction<double> pred = tiled_infer<double>(
      [&](int, int ox, int k) {
        return Tensor<double>::full({std::size_t(k), std::size_t(k), 1}, ox == 0 ? a : b);
      },
      cfg, 1);
  for (std::size_t y = 0; y < 4; ++y) {
    CHECK(pred.logits(y, 0, 0) == a);
    CHECK(pred.logits(y, 1, 0) == a);
    CHECK(pred.logits(y, 2, 0) == doctest::Approx((a + b) / 2).epsilon(1e-14));
    CHECK(pred.logits(y, 3, 0) == doctest::Approx((a + b) / 2).epsilon(1e-14));
    CHECK(pred.logits(y, 4, 0) == b);
    CHECK(pred.logits(y, 5, 0) == b);
  }
}

TEST_CASE("tiled accumulation is linear in the window model") {
  Rng rng(82);
  TileConfig cfg{4, 0.333, 9, 7};
  auto field = [&](std::uint64_t seed) {
    Rng r(seed);
    return r.uniform_tensor<double>({9, 7, 2}, -1.0, 1.0);
  };
  Tensor<double> f = field(1), g = field(2);
  auto crop = [&](const Tensor<double>& src, int oy, int ox, int k) {
    Tensor<double> block({std::size_t(k), std::size_t(k), 2});
    for (int y = 0; y < k; ++y)
      for (int x = 0; x < k; ++x)
        for (std::size_t c = 0; c < 2; ++c)
          block(std::size_t(y), std::size_t(x), c) =
              src(std::size_t(oy + y), std::size_t(ox + x), c);
    return block;
  };
  const double alpha = 1.7, beta = -0.4;
  SegPrediction<double> lhs = tiled_infer<double>(
      [&](int oy, int ox, int k) {
        Tensor<double> bf = crop(f, oy, ox, k), bg = crop(g, oy, ox, k);
        Tensor<double> mix(bf.dims());
        for (std::size_t i = 0; i < mix.size(); ++i)
          mix.data()[i] = alpha * bf.data()[i] + beta * bg.data()[i];
        return mix;
      },
      cfg, 2);
  SegPrediction<double> pf =
      tiled_infer<double>([&](int oy, int ox, int k) { return crop(f, oy, ox, k); }, cfg, 2);
  SegPrediction<double> pg =
      tiled_infer<double>([&](int oy, int ox, int k) { return crop(g, oy, ox, k); }, cfg, 2);
  for (std::size_t i = 0; i < lhs.logits.size(); ++i)
    CHECK(std::abs(lhs.logits.data()[i] -
                   (alpha * pf.logits.data()[i] + beta * pg.logits.data()[i])) <= 1e-10);
}

TEST_CASE("wrong window shape is rejected") {
  TileConfig cfg{4, 0.5, 8, 8};
  CHECK_THROWS_AS(tiled_infer<double>(
                      [&](int, int, int) { return Tensor<double>::zeros({3, 4, 1}); }, cfg, 1),
                  ArgumentError);
}

TEST_CASE("argmax ties break to the lowest class index") {
  Tensor<double> logits({2, 3}, {1.0, 1.0, 1.0, 0.2, 0.9, 0.9});
  std::vector<int> labels = argmax_labels(logits);
  CHECK(labels[0] == 0);
  CHECK(labels[1] == 1);
}

TEST_CASE("miou identity, disjoint, and the 2x2 hand case") {
  std::vector<int> a = {0, 1, 2, 1};
  CHECK(miou(a, a, 3).mean == doctest::Approx(1.0).epsilon(1e-15));

  std::vector<int> left = {0, 0, 1, 1}, right = {1, 1, 0, 0};
  IouReport disjoint = miou(right, left, 2);
  CHECK(disjoint.mean == doctest::Approx(0.0).epsilon(1e-15));

  std::vector<int> gt = {0, 0, 1, 1}, pred = {0, 1, 1, 1};
  IouReport rep = miou(pred, gt, 2);
  CHECK(std::abs(rep.per_class[0] - 0.5) <= 1e-12);
  CHECK(std::abs(rep.per_class[1] - 2.0 / 3.0) <= 1e-12);
  CHECK(std::abs(rep.mean - 7.0 / 12.0) <= 1e-12);
}

TEST_CASE("miou ignores 255 and excludes classes absent from ground truth") {
  std::vector<int> gt = {0, 0, 255, 1}, pred = {0, 2, 2, 1};
  IouReport rep = miou(pred, gt, 3);
  CHECK(rep.present_in_gt[0]);
  CHECK(rep.present_in_gt[1]);
  CHECK_FALSE(rep.present_in_gt[2]);
  // class 0: tp 1 fn 1 -> 1/2; class 1: tp 1 -> 1; class 2 not in gt
  CHECK(std::abs(rep.mean - 0.75) <= 1e-12);

  std::vector<int> all_ignored = {255, 255};
  std::vector<int> p2 = {0, 1};
  CHECK_THROWS_AS(miou(p2, all_ignored, 2), ArgumentError);
}

TEST_CASE("an ignored prediction at a valid pixel counts as a miss") {
  std::vector<int> gt = {0, 0, 1, 1}, pred = {0, 255, 1, 1};
  IouReport rep = miou(pred, gt, 2);
  CHECK(std::abs(rep.per_class[0] - 0.5) <= 1e-12);  // tp 1, fn 1
  CHECK(std::abs(rep.per_class[1] - 1.0) <= 1e-12);

  std::vector<int> bad = {0, 7, 1, 1};
  CHECK_THROWS_AS(miou(bad, gt, 2), ArgumentError);
}

TEST_CASE("miou is invariant under a consistent label swap") {
  Rng rng(83);
  std::vector<int> gt(64), pred(64);
  for (std::size_t i = 0; i < 64; ++i) {
    gt[i] = int(rng.uniform() * 3);
    pred[i] = int(rng.uniform() * 3);
  }
  auto swap01 = [](std::vector<int> v) {
    for (int& x : v) x = (x == 0) ? 1 : (x == 1 ? 0 : x);
    return v;
  };
  IouReport base = miou(pred, gt, 3);
  IouReport swapped = miou(swap01(pred), swap01(gt), 3);
  CHECK(std::abs(base.mean - swapped.mean) <= 1e-15);
}

TEST_CASE("bilinear upsample identity, constant, and the pinned 2x2 grid") {
  Rng rng(84);
  Tensor<double> x = rng.uniform_tensor<double>({3, 4, 2}, -1.0, 1.0);
  CHECK(testutil::max_abs_diff(bilinear_upsample(x, 3, 4), x) == 0.0);

  Tensor<double> c = Tensor<double>::full({2, 2, 1}, 0.7);
  Tensor<double> cup = bilinear_upsample(c, 5, 7);
  for (double v : cup.data()) CHECK(std::abs(v - 0.7) <= 1e-15);

  Tensor<double> grid({2, 2, 1}, {0.0, 1.0, 2.0, 3.0});
  Tensor<double> up = bilinear_upsample(grid, 4, 4);
  const double expected[4][4] = {{0.0, 0.25, 0.75, 1.0},
                                 {0.5, 0.75, 1.25, 1.5},
                                 {1.5, 1.75, 2.25, 2.5},
                                 {2.0, 2.25, 2.75, 3.0}};
  for (std::size_t y = 0; y < 4; ++y)
    for (std::size_t x2 = 0; x2 < 4; ++x2)
      CHECK(up(y, x2, 0) == doctest::Approx(expected[y][x2]).epsilon(1e-13));

  CHECK_THROWS_AS(bilinear_upsample(x, 2, 4), ArgumentError);
}

}  // TEST_SUITE
