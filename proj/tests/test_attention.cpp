#include <doctest.h>

#include "s2corr/attention.hpp"
#include "testutil.hpp"

using namespace s2corr;

namespace {

// Dense reference: explicit q/k/v projection, score matrix, softmax, weighted
// sum. score_shift exercises softmax shift invariance.
Tensor<double> spatial_oracle(const CorrelationVolume<double>& e, const AttnParams<double>& p,
                              double score_shift = 0.0) {
  const int h = e.height, w = e.width, n_c = e.num_classes(), d = e.feat_dim();
  Tensor<double> out(e.values.dims());
  auto proj = [&](const Tensor<double>& m, std::size_t i, std::size_t j, std::vector<double>& o) {
    for (int r = 0; r < d; ++r) {
      double s = 0;
      for (int c = 0; c < d; ++c) s += m(std::size_t(r), std::size_t(c)) * e.values(i, j, std::size_t(c));
      o[std::size_t(r)] = s;
    }
  };
  std::vector<double> q(static_cast<std::size_t>(d));
  std::vector<double> k(static_cast<std::size_t>(d));
  std::vector<double> v(static_cast<std::size_t>(d));
  for (int j = 0; j < n_c; ++j)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        const std::size_t qi = std::size_t(y * w + x);
        proj(p.spatial_wq, qi, std::size_t(j), q);
        std::vector<std::pair<std::size_t, double>> scored;
        for (int ny = std::max(0, y - p.window); ny <= std::min(h - 1, y + p.window); ++ny)
          for (int nx = std::max(0, x - p.window); nx <= std::min(w - 1, x + p.window); ++nx) {
            const std::size_t ki = std::size_t(ny * w + nx);
            proj(p.spatial_wk, ki, std::size_t(j), k);
            double s = 0;
            for (int c = 0; c < d; ++c) s += q[std::size_t(c)] * k[std::size_t(c)];
            scored.emplace_back(ki, s / std::sqrt(double(d)) + score_shift);
          }
        double m = scored[0].second;
        for (auto& [ki, s] : scored) m = std::max(m, s);
        double z = 0;
        for (auto& [ki, s] : scored) z += std::exp(s - m);
        double wsum = 0.0;
        for (int c = 0; c < d; ++c) out(qi, std::size_t(j), std::size_t(c)) = 0.0;
        for (auto& [ki, s] : scored) {
          const double wgt = std::exp(s - m) / z;
          wsum += wgt;
          proj(p.spatial_wv, ki, std::size_t(j), v);
          for (int c = 0; c < d; ++c)
            out(qi, std::size_t(j), std::size_t(c)) += wgt * v[std::size_t(c)];
        }
        CHECK(std::abs(wsum - 1.0) <= 1e-12);  // weights sum to one at every query
      }
  return out;
}

}  // namespace

TEST_SUITE("attention") {

TEST_CASE("radius zero attends to self only") {
  Rng rng(70);
  CorrelationVolume<double> e(2, 3, rng.uniform_tensor<double>({6, 2, 4}, -1.0, 1.0));
  AttnParams<double> p = AttnParams<double>::init(4, 0, rng);
  CorrelationVolume<double> out = spatial_attention(e, p);
  // softmax over one element is 1, so the output is just W_v applied per token.
  for (std::size_t i = 0; i < 6; ++i)
    for (std::size_t j = 0; j < 2; ++j)
      for (std::size_t r = 0; r < 4; ++r) {
        double s = 0;
        for (std::size_t c = 0; c < 4; ++c) s += p.spatial_wv(r, c) * e.values(i, j, c);
        CHECK(std::abs(out.values(i, j, r) - s) <= 1e-13);
      }
}

TEST_CASE("constant input field stays constant under attention") {
  Rng rng(71);
  Tensor<double> vol({12, 2, 4});
  Tensor<double> token = rng.uniform_tensor<double>({2, 4}, -1.0, 1.0);
  for (std::size_t i = 0; i < 12; ++i)
    for (std::size_t j = 0; j < 2; ++j)
      for (std::size_t c = 0; c < 4; ++c) vol(i, j, c) = token(j, c);
  CorrelationVolume<double> e(3, 4, vol);
  AttnParams<double> p = AttnParams<double>::init(4, 1, rng);
  CorrelationVolume<double> out = spatial_attention(e, p);
  for (std::size_t i = 1; i < 12; ++i)
    for (std::size_t j = 0; j < 2; ++j)
      for (std::size_t c = 0; c < 4; ++c)
        CHECK(std::abs(out.values(i, j, c) - out.values(0, j, c)) <= 1e-12);
}

TEST_CASE("windowed attention matches the dense oracle and is shift invariant") {
  Rng rng(72);
  CorrelationVolume<double> e(3, 3, rng.uniform_tensor<double>({9, 2, 4}, -1.0, 1.0));
  AttnParams<double> p = AttnParams<double>::init(4, 1, rng);
  CorrelationVolume<double> out = spatial_attention(e, p);
  CHECK(testutil::max_abs_diff(out.values, spatial_oracle(e, p)) <= 1e-12);
  CHECK(testutil::max_abs_diff(out.values, spatial_oracle(e, p, 17.5)) <= 1e-10);
}

TEST_CASE("single class token reduces class attention to the value map") {
  Rng rng(73);
  CorrelationVolume<double> e(2, 2, rng.uniform_tensor<double>({4, 1, 4}, -1.0, 1.0));
  AttnParams<double> p = AttnParams<double>::init(4, 1, rng);
  CorrelationVolume<double> out = class_attention(e, p);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t r = 0; r < 4; ++r) {
      double s = 0;
      for (std::size_t c = 0; c < 4; ++c) s += p.class_wv(r, c) * e.values(i, 0, c);
      CHECK(std::abs(out.values(i, 0, r) - s) <= 1e-13);
    }
}

TEST_CASE("duplicated class tokens produce identical outputs") {
  Rng rng(74);
  Tensor<double> vol({4, 3, 4});
  for (std::size_t i = 0; i < 4; ++i) {
    Tensor<double> tok = rng.uniform_tensor<double>({4}, -1.0, 1.0);
    Tensor<double> other = rng.uniform_tensor<double>({4}, -1.0, 1.0);
    for (std::size_t c = 0; c < 4; ++c) {
      vol(i, 0, c) = tok(c);
      vol(i, 1, c) = other(c);
      vol(i, 2, c) = tok(c);  // duplicate of class 0
    }
  }
  CorrelationVolume<double> e(2, 2, vol);
  AttnParams<double> p = AttnParams<double>::init(4, 1, rng);
  CorrelationVolume<double> out = class_attention(e, p);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t c = 0; c < 4; ++c) CHECK(out.values(i, 0, c) == out.values(i, 2, c));
}

TEST_CASE("class attention matches the dense oracle") {
  Rng rng(75);
  CorrelationVolume<double> e(2, 2, rng.uniform_tensor<double>({4, 4, 5}, -1.0, 1.0));
  AttnParams<double> p = AttnParams<double>::init(5, 0, rng);
  CorrelationVolume<double> out = class_attention(e, p);
  for (std::size_t i = 0; i < 4; ++i) {
    // project all tokens
    double q[4][5], k[4][5], v[4][5];
    for (std::size_t j = 0; j < 4; ++j)
      for (std::size_t r = 0; r < 5; ++r) {
        double sq = 0, sk = 0, sv = 0;
        for (std::size_t c = 0; c < 5; ++c) {
          sq += p.class_wq(r, c) * e.values(i, j, c);
          sk += p.class_wk(r, c) * e.values(i, j, c);
          sv += p.class_wv(r, c) * e.values(i, j, c);
        }
        q[j][r] = sq;
        k[j][r] = sk;
        v[j][r] = sv;
      }
    for (std::size_t j = 0; j < 4; ++j) {
      double scores[4];
      double m = -1e300;
      for (std::size_t l = 0; l < 4; ++l) {
        double s = 0;
        for (std::size_t c = 0; c < 5; ++c) s += q[j][c] * k[l][c];
        scores[l] = s / std::sqrt(5.0);
        m = std::max(m, scores[l]);
      }
      double z = 0;
      for (double s : scores) z += std::exp(s - m);
      for (std::size_t r = 0; r < 5; ++r) {
        double acc = 0;
        for (std::size_t l = 0; l < 4; ++l) acc += std::exp(scores[l] - m) / z * v[l][r];
        CHECK(std::abs(out.values(i, j, r) - acc) <= 1e-12);
      }
    }
  }
}

}  // TEST_SUITE
