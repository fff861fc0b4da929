#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "leanq/grids.hpp"
#include "support/oracles.hpp"

using namespace leanq::grids;

namespace {
using V = std::vector<double>;
}

TEST(MinMax, Examples) {
  auto g = minmax_affine(V{-1, 0, 2}, 2);
  EXPECT_DOUBLE_EQ(g.scale, 1.0);
  EXPECT_EQ(g.zero_point, 1);
  auto g2 = minmax_affine(V{0, 1}, 2);
  EXPECT_DOUBLE_EQ(g2.scale, 1.0 / 3.0);
  EXPECT_EQ(g2.zero_point, 0);
  auto g3 = minmax_affine(V{5, 5, 5}, 4);
  EXPECT_EQ(g3.scale, 1e-12);
  EXPECT_EQ(g3.zero_point, 0);
  const int c = quant_aff(5.0, g3).code;
  EXPECT_EQ(quant_aff(5.0, g3).code, c);
}

TEST(MinMax, ZeroClampedForPositiveRange) {
  auto g = minmax_affine(V{2, 3}, 2);
  EXPECT_EQ(g.zero_point, 0);
  auto h = minmax_affine(V{-3, -2}, 2);
  EXPECT_EQ(h.zero_point, 3);
}

TEST(QuantAff, Examples) {
  AffineGridParams g{1.0, 1, 2};
  auto q = quant_aff(2.0, g);
  EXPECT_EQ(q.code, 3);
  EXPECT_EQ(q.value, 2.0);
  EXPECT_EQ(quant_aff(-1.0, g).value, -1.0);
  auto c = quant_aff(10.0, g);
  EXPECT_EQ(c.code, 3);
  EXPECT_EQ(c.value, 2.0);
}

TEST(QuantAff, HalfToEven) {
  AffineGridParams g{1.0, 0, 4};
  EXPECT_EQ(quant_aff(0.5, g).code, 0);
  EXPECT_EQ(quant_aff(1.5, g).code, 2);
  EXPECT_EQ(quant_aff(2.5, g).code, 2);
}

TEST(QuantNu, Examples) {
  NonUniformGrid g{{0, 1}, 1};
  auto q = quant_nu(0.4, g);
  EXPECT_EQ(q.code, 0);
  EXPECT_EQ(q.value, 0.0);
  EXPECT_EQ(quant_nu(1.0, g).code, 1);
  EXPECT_EQ(quant_nu(0.5, g).code, 0);
  NonUniformGrid g4{{-1, 0, 0.5, 1}, 2};
  EXPECT_EQ(quant_nu(-5, g4).code, 0);
  EXPECT_EQ(quant_nu(5, g4).code, 3);
  EXPECT_EQ(quant_nu(0.75, g4).code, 2);
  EXPECT_EQ(dequantize(2, Grid{g4}), 0.5);
}

TEST(UniformInit, Examples) {
  auto l = uniform_init(V{-1, 1}, 2);
  ASSERT_EQ(l.size(), 4u);
  EXPECT_DOUBLE_EQ(l[0], -1);
  EXPECT_DOUBLE_EQ(l[1], -1.0 / 3);
  EXPECT_DOUBLE_EQ(l[2], 1.0 / 3);
  EXPECT_DOUBLE_EQ(l[3], 1);
  EXPECT_EQ(uniform_init(V{0, 0}, 1), (V{0, 1e-12}));
  EXPECT_EQ(uniform_init(V{0, 10}, 1), (V{0, 10}));
}

TEST(Validate, Grids) {
  EXPECT_THROW((AffineGridParams{0.0, 0, 2}.validate()), std::invalid_argument);
  EXPECT_THROW((AffineGridParams{1.0, 4, 2}.validate()), std::invalid_argument);
  EXPECT_THROW((NonUniformGrid{{0, 0}, 1}.validate()), std::invalid_argument);
  EXPECT_THROW((NonUniformGrid{{0, 1, 2}, 1}.validate()), std::invalid_argument);
  EXPECT_THROW((GridSearchConfig{3, 1}.validate()), std::invalid_argument);
  EXPECT_THROW((GridSearchConfig{0, 1}.validate()), std::invalid_argument);
}

TEST(KMeans, PerfectlyClusterable) {
  auto r = weighted_kmeans(V{0, 0, 1, 1}, V{1, 1, 1, 1}, 1);
  EXPECT_EQ(r.grid.levels, (V{0, 1}));
  EXPECT_EQ(r.objective, 0.0);
}

TEST(KMeans, WeightedExample) {
  auto r = weighted_kmeans(V{0, 0.4, 1}, V{100, 1, 100}, 1);
  EXPECT_NEAR(r.grid.levels[0], 0.4 / 101, 1e-12);
  EXPECT_DOUBLE_EQ(r.grid.levels[1], 1.0);
  EXPECT_NEAR(r.objective, 0.15841584158, 1e-9);
  EXPECT_NEAR(oracle::best_partition_objective(V{0, 0.4, 1}, V{100, 1, 100}, 2), r.objective,
              1e-12);
}

TEST(KMeans, LengthMismatch) {
  EXPECT_THROW(weighted_kmeans(V{0, 1}, V{1}, 1), std::invalid_argument);
}

TEST(KMeans, TraceMonotoneAndLevelCount) {
  std::mt19937_64 rng(9);
  for (int t = 0; t < 50; ++t) {
    const int bits = 1 + t % 4;
    auto w = oracle::normal_vec(40, rng);
    auto cw = oracle::positive_vec(40, rng);
    auto r = weighted_kmeans(w, cw, bits);
    EXPECT_EQ(r.grid.levels.size(), std::size_t{1} << bits);
    EXPECT_NO_THROW(r.grid.validate());
    for (std::size_t i = 1; i < r.trace.size(); ++i) {
      EXPECT_LE(r.trace[i], r.trace[i - 1] * (1 + 1e-12));
    }
    EXPECT_NEAR(r.objective, grid_objective(w, cw, r.grid), 1e-9 * (1 + r.objective));
  }
}

TEST(KMeans, UnitWeightsGiveUnweightedObjective) {
  std::mt19937_64 rng(21);
  auto w = oracle::normal_vec(30, rng);
  auto r = weighted_kmeans(w, V(30, 1.0), 2);
  double direct = 0.0;
  for (double x : w) {
    const double q = quant_nu(x, r.grid).value;
    direct += (q - x) * (q - x);
  }
  EXPECT_NEAR(r.objective, direct, 1e-12);
}

TEST(KMeans, SmallInstanceOptimality) {
  std::mt19937_64 rng(33);
  int agree = 0;
  const int trials = 200;
  for (int t = 0; t < trials; ++t) {
    const std::size_t n = 2 + t % 9;
    auto w = oracle::normal_vec(n, rng);
    auto cw = oracle::positive_vec(n, rng);
    auto r = weighted_kmeans(w, cw, 1);
    const double best = oracle::best_partition_objective(w, cw, 2);
    EXPECT_LE(best, r.objective * (1 + 1e-9) + 1e-15);
    if (r.objective <= best * (1 + 1e-9) + 1e-15) ++agree;
  }
  EXPECT_GE(agree, trials * 95 / 100) << "Lloyd reached the optimum in " << agree << "/" << trials;
}

TEST(KMeans, ScaleInvariance) {
  std::mt19937_64 rng(12);
  auto w = oracle::normal_vec(50, rng);
  auto cw = oracle::positive_vec(50, rng);
  auto cw3 = cw;
  for (auto& c : cw3) c *= 3.0;
  auto a = weighted_kmeans(w, cw, 3);
  auto b = weighted_kmeans(w, cw3, 3);
  ASSERT_EQ(a.grid.levels.size(), b.grid.levels.size());
  for (std::size_t i = 0; i < a.grid.levels.size(); ++i) {
    EXPECT_NEAR(a.grid.levels[i], b.grid.levels[i], 1e-12 * std::abs(a.grid.levels[i]) + 1e-15);
  }
}

TEST(KMeans, EmptyClusterRepairKeepsLevelCount) {
  // Eight identical values and two outliers, 2 bits: uniform init leaves
  // middle clusters empty.
  V w = {0, 0, 0, 0, 0, 0, 0, 0, 10, 10.5};
  auto r = weighted_kmeans(w, V(w.size(), 1.0), 2);
  EXPECT_EQ(r.grid.levels.size(), 4u);
  EXPECT_NO_THROW(r.grid.validate());
}

TEST(KMeansPP, Examples) {
  for (std::uint64_t seed : {0ull, 1ull, 99ull}) {
    auto l = kmeanspp_init(V{0, 10}, V{1, 1}, 1, seed);
    std::sort(l.begin(), l.end());
    EXPECT_EQ(l, (V{0, 10}));
  }
  V w = {1, 2, 3, 2, 1};
  auto l = kmeanspp_init(w, V(5, 1.0), 2, 4);
  auto r = lloyd_kmeans(w, V(5, 1.0), l, 2);
  EXPECT_EQ(r.objective, 0.0);
  std::mt19937_64 rng(1);
  auto wr = oracle::normal_vec(64, rng);
  auto cr = oracle::positive_vec(64, rng);
  EXPECT_EQ(kmeanspp_init(wr, cr, 3, 17), kmeanspp_init(wr, cr, 3, 17));
}

TEST(GridObjective, Examples) {
  NonUniformGrid g{{0, 0.4}, 1};
  EXPECT_EQ(grid_objective(V{0, 0.4, 0.4}, V{1, 2, 3}, g), 0.0);
  NonUniformGrid h{{0.5, 1.0}, 1};
  EXPECT_NEAR(grid_objective(V{0.4}, V{2}, h), 0.02, 1e-15);
  std::mt19937_64 rng(4);
  auto w = oracle::normal_vec(20, rng);
  auto cw = oracle::positive_vec(20, rng);
  auto cw2 = cw;
  for (auto& c : cw2) c *= 2;
  auto a = minmax_affine(w, 3);
  EXPECT_DOUBLE_EQ(grid_objective(w, cw2, a), 2 * grid_objective(w, cw, a));
}

TEST(AffineSearch, OnGridInput) {
  auto r = affine_grid_search_detailed(V{0, 1, 2, 3}, V{1, 1, 1, 1}, 2);
  EXPECT_EQ(r.t_min, 0);
  EXPECT_EQ(r.t_max, 0);
  EXPECT_EQ(r.params.scale, 1.0);
  EXPECT_EQ(r.params.zero_point, 0);
  EXPECT_EQ(r.objective, 0.0);
}

TEST(AffineSearch, BeatsMinMaxWithOutlier) {
  V w = {0, 1, 2, 3, 100};
  V cw(5, 1.0);
  auto g = affine_grid_search(w, cw, 2);
  EXPECT_LE(grid_objective(w, cw, g), grid_objective(w, cw, minmax_affine(w, 2)));
}

TEST(AffineSearch, ZeroRangeFallsBack) {
  auto r = affine_grid_search_detailed(V{3, 3, 3}, V{1, 1, 1}, 4);
  EXPECT_TRUE(r.fallback);
  EXPECT_EQ(r.params, minmax_affine(V{3, 3, 3}, 4));
}

TEST(AffineSearch, MatchesExhaustiveOracle) {
  std::mt19937_64 rng(8);
  for (int t = 0; t < 30; ++t) {
    const int bits = 2 + t % 3;
    const int T = 2 * (1 + t % 32);
    auto w = oracle::normal_vec(5 + t, rng);
    auto cw = oracle::positive_vec(w.size(), rng, 1e-3, 1e3);
    auto r = affine_grid_search_detailed(w, cw, bits, {T, 1});
    auto o = oracle::affine_search(w, cw, bits, T);
    EXPECT_EQ(r.params.scale, o.scale);
    EXPECT_EQ(r.params.zero_point, o.zero);
    EXPECT_EQ(r.t_min, o.t_min);
    EXPECT_EQ(r.t_max, o.t_max);
    EXPECT_EQ(r.objective, o.err);
  }
}

TEST(AffineSearch, ScheduleIndependent) {
  std::mt19937_64 rng(10);
  auto w = oracle::normal_vec(64, rng);
  auto cw = oracle::positive_vec(64, rng);
  auto a = affine_grid_search_detailed(w, cw, 3, {256, 1});
  for (unsigned workers : {2u, 3u, 7u}) {
    auto b = affine_grid_search_detailed(w, cw, 3, {256, workers});
    EXPECT_EQ(a.params, b.params);
    EXPECT_EQ(a.t_min, b.t_min);
    EXPECT_EQ(a.t_max, b.t_max);
  }
}

TEST(AffineSearch, TiesGoToSmallestPair) {
  // Every candidate quantizes a two-point input exactly; (0,0) must win.
  auto r = affine_grid_search_detailed(V{-1, 1}, V{1, 1}, 8, {64, 3});
  EXPECT_EQ(r.t_min, 0);
  EXPECT_EQ(r.t_max, 0);
}

TEST(AffineSearch, ScaleInvariance) {
  std::mt19937_64 rng(13);
  auto w = oracle::normal_vec(40, rng);
  auto cw = oracle::positive_vec(40, rng);
  auto cw5 = cw;
  for (auto& c : cw5) c *= 5.0;
  EXPECT_EQ(affine_grid_search(w, cw, 3, {128, 1}), affine_grid_search(w, cw5, 3, {128, 1}));
}

TEST(AffineSearch, NestedTNeverWorse) {
  std::mt19937_64 rng(14);
  for (int t = 0; t < 10; ++t) {
    auto w = oracle::normal_vec(48, rng);
    auto cw = oracle::positive_vec(48, rng);
    const double o64 = grid_objective(w, cw, affine_grid_search(w, cw, 2, {64, 1}));
    const double o256 = grid_objective(w, cw, affine_grid_search(w, cw, 2, {256, 1}));
    const double o2048 = grid_objective(w, cw, affine_grid_search(w, cw, 2, {2048, 1}));
    EXPECT_LE(o256, o64);
    EXPECT_LE(o2048, o256);
  }
}

TEST(AffineSearch, BatchMatchesPerGroup) {
  std::mt19937_64 rng(15);
  auto w = oracle::normal_vec(96, rng);
  auto cw = oracle::positive_vec(96, rng);
  auto batch = affine_grid_search_batch(w, cw, 32, 4, {64, 3});
  ASSERT_EQ(batch.size(), 3u);
  for (std::size_t g = 0; g < 3; ++g) {
    EXPECT_EQ(batch[g], affine_grid_search(std::span(w).subspan(g * 32, 32),
                                           std::span(cw).subspan(g * 32, 32), 4, {64, 1}));
  }
  EXPECT_THROW(affine_grid_search_batch(w, cw, 40, 4), std::invalid_argument);
}

TEST(Dominance, LeanAffineNeverWorseThanMinMax) {
  std::mt19937_64 rng(16);
  for (int t = 0; t < 40; ++t) {
    auto w = oracle::normal_vec(32, rng);
    auto cw = oracle::positive_vec(32, rng, 1e-4, 1e4);
    const int bits = 2 + t % 3;
    EXPECT_LE(grid_objective(w, cw, affine_grid_search(w, cw, bits, {128, 1})),
              grid_objective(w, cw, minmax_affine(w, bits)));
  }
}
