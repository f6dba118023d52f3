#include <catch_amalgamated.hpp>

#include <algorithm>

#include "kvembed/geometry_metrics.hpp"
#include "test_util.hpp"

using namespace kvembed;

namespace {

RealVector axis(std::size_t dim, std::size_t k, double sign = 1.0) {
  RealVector v(dim, 0.0);
  v[k] = sign;
  return v;
}

double alignment_oracle(const PairSet& pairs, double alpha) {
  double s = 0.0;
  for (const auto& [x, y] : pairs) {
    double d2 = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
      d2 += (x[i] - y[i]) * (x[i] - y[i]);
    }
    s += std::pow(d2, alpha / 2.0);
  }
  return s / static_cast<double>(pairs.size());
}

double uniformity_oracle(const std::vector<RealVector>& pts, double t) {
  double s = 0.0;
  std::size_t c = 0;
  for (std::size_t i = 0; i < pts.size(); ++i) {
    for (std::size_t j = 0; j < pts.size(); ++j) {
      if (i == j) continue;
      double d2 = 0.0;
      for (std::size_t k = 0; k < pts[i].size(); ++k) {
        d2 += (pts[i][k] - pts[j][k]) * (pts[i][k] - pts[j][k]);
      }
      s += std::exp(-t * d2);
      ++c;
    }
  }
  return std::log(s / static_cast<double>(c));
}

}  // namespace

TEST_CASE("alignment closed forms") {
  const RealVector e = axis(4, 0);
  PairSet identical = {{e, e}, {axis(4, 2), axis(4, 2)}};
  CHECK(alignment(identical) == 0.0);

  PairSet antipodal = {{e, axis(4, 0, -1.0)}};
  CHECK(alignment(antipodal, 2.0) == 4.0);

  CHECK_THROWS_AS(alignment({}), Error);
  PairSet not_unit = {{RealVector{2.0, 0.0}, RealVector{1.0, 0.0}}};
  CHECK_THROWS_AS(alignment(not_unit), Error);
}

TEST_CASE("alignment matches per-pair recomputation on random unit pairs") {
  std::mt19937_64 rng(800);
  for (double alpha : {1.0, 2.0, 3.0}) {
    PairSet pairs;
    for (int i = 0; i < 40; ++i) {
      pairs.emplace_back(testutil::random_unit(rng, 6),
                         testutil::random_unit(rng, 6));
    }
    CHECK(alignment(pairs, alpha) ==
          Catch::Approx(alignment_oracle(pairs, alpha)).margin(1e-12));
  }
}

TEST_CASE("uniformity closed forms and spreading behaviour") {
  const RealVector e = axis(3, 1);
  CHECK(uniformity({e, e}) == Catch::Approx(0.0).margin(1e-15));

  const double anti = uniformity({e, axis(3, 1, -1.0)}, 2.0);
  CHECK(anti == Catch::Approx(-8.0).margin(1e-12));

  // spreading a cluster to antipodal points drives uniformity down
  CHECK(anti < uniformity({e, e}));

  CHECK_THROWS_AS(uniformity({e}), Error);
}

TEST_CASE("uniformity matches the double-loop oracle on seeded points") {
  std::mt19937_64 rng(801);
  std::vector<RealVector> pts;
  for (int i = 0; i < 100; ++i) pts.push_back(testutil::random_unit(rng, 8));
  CHECK(uniformity(pts, 2.0) ==
        Catch::Approx(uniformity_oracle(pts, 2.0)).margin(1e-12));
  CHECK(uniformity(pts, 0.5) ==
        Catch::Approx(uniformity_oracle(pts, 0.5)).margin(1e-12));

  // permutation invariance
  auto shuffled = pts;
  std::shuffle(shuffled.begin(), shuffled.end(), rng);
  CHECK(uniformity(shuffled, 2.0) ==
        Catch::Approx(uniformity(pts, 2.0)).margin(1e-12));

  PairSet pairs;
  for (int i = 0; i + 1 < 100; i += 2) pairs.emplace_back(pts[i], pts[i + 1]);
  auto pair_shuffled = pairs;
  std::shuffle(pair_shuffled.begin(), pair_shuffled.end(), rng);
  CHECK(alignment(pair_shuffled) ==
        Catch::Approx(alignment(pairs)).margin(1e-12));
}

TEST_CASE("cosine basics") {
  std::mt19937_64 rng(802);
  const RealVector unit = axis(5, 2);
  RealVector neg_unit = axis(5, 2, -1.0);
  CHECK(cosine(unit, unit) == 1.0);
  CHECK(cosine(unit, neg_unit) == -1.0);

  const RealVector e = testutil::random_unit(rng, 5);
  RealVector neg = e;
  for (double& v : neg) v = -v;
  CHECK(cosine(e, e) == Catch::Approx(1.0).margin(1e-12));
  CHECK(cosine(e, neg) == Catch::Approx(-1.0).margin(1e-12));

  const RealVector a = testutil::random_unit(rng, 5);
  const RealVector b = testutil::random_unit(rng, 5);
  double d = 0.0;
  for (std::size_t i = 0; i < 5; ++i) d += a[i] * b[i];
  CHECK(cosine(a, b) == Catch::Approx(d).margin(1e-12));
  CHECK(cosine(a, b) <= 1.0);
  CHECK(cosine(a, b) >= -1.0);

  CHECK_THROWS_AS(cosine(RealVector{1.0}, RealVector{1.0, 0.0}), Error);
}
