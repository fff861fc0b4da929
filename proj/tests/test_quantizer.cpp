#include <gtest/gtest.h>

#include <random>

#include "leanq/error.hpp"
#include "leanq/half.hpp"
#include "leanq/quantizer.hpp"
#include "support/oracles.hpp"

using namespace leanq;
using namespace leanq::quant;

namespace {

struct Instance {
  Matrix w;
  Matrix x;
  calib::HessianState hs;
};

Instance make_instance(std::size_t rows, std::size_t cols, std::uint64_t seed, double p = 4.0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd;
  Matrix w(rows, cols);
  for (auto& v : w.flat()) v = nd(rng);
  Matrix x(cols, 2 * cols + 8);
  for (std::size_t f = 0; f < cols; ++f) {
    const double s = f % 5 == 0 ? 0.05 : 1.0;
    for (auto& v : x.row(f)) v = s * nd(rng);
  }
  calib::HessianAccumulator acc;
  acc.accumulate(x);
  auto hs = calib::finalize(acc, 0.01, p);
  return Instance{std::move(w), std::move(x), std::move(hs)};
}

QuantConfig cfg_for(GridType g, int bits) {
  QuantConfig c;
  c.grid = g;
  c.bits = bits;
  c.search_T = 64;
  c.block_size = 3;
  return c;
}

}  // namespace

TEST(LossError, Examples) {
  EXPECT_NEAR(loss_error(0.4, 0.5, 0.5), 0.01, 1e-15);
  EXPECT_EQ(loss_error(0.3, 0.3, 2.0), 0.0);
  EXPECT_DOUBLE_EQ(loss_error(0.0, 0.2, 1.0) * 4, loss_error(0.0, 0.4, 1.0));
  EXPECT_THROW(loss_error(0.0, 1.0, 0.0), NumericalError);
  EXPECT_THROW(loss_error(0.0, 1.0, -1.0), NumericalError);
}

TEST(OptimalPerturbation, Examples) {
  linalg::SymMatrix id(Matrix::identity(3));
  EXPECT_EQ(optimal_perturbation(0.7, 0.7, id, 1), (std::vector<double>{0, 0, 0}));
  EXPECT_EQ(optimal_perturbation(0.2, 0.5, id, 1), (std::vector<double>{0, 0.3, 0}));
  linalg::SymMatrix h(Matrix{{2, 1}, {1, 1}});
  auto d = optimal_perturbation(0.0, 0.5, h, 0);
  EXPECT_DOUBLE_EQ(d[0], 0.5);
  EXPECT_DOUBLE_EQ(d[1], 0.25);
  EXPECT_THROW(optimal_perturbation(0, 1, linalg::SymMatrix(Matrix{{0.0}}), 0), NumericalError);
}

TEST(OptimalPerturbation, RealizedLossEqualsEps) {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> nd;
  for (int t = 0; t < 20; ++t) {
    const std::size_t n = 3 + t % 5;
    Matrix x(n, 3 * n);
    for (auto& v : x.flat()) v = nd(rng);
    auto h = linalg::gram_from_inputs(x);
    auto hinv = linalg::invert_pd(h);
    auto w = oracle::normal_vec(n, rng);
    const std::size_t i = t % n;
    const double q = w[i] + 0.3 * nd(rng);
    auto delta = optimal_perturbation(w[i], q, hinv, i);
    std::vector<double> w2(n);
    for (std::size_t k = 0; k < n; ++k) w2[k] = w[k] + delta[k];
    const double realized = oracle::row_loss(w, w2, x);
    const double eps = loss_error(w[i], q, hinv(i, i));
    EXPECT_NEAR(realized, eps, 1e-6 * eps);
  }
}

TEST(ActOrder, Examples) {
  auto hs = calib::finalize(linalg::SymMatrix(Matrix{{1, 0, 0}, {0, 5, 0}, {0, 0, 3}}), 0.0, 4.0);
  EXPECT_EQ(act_order_permutation(hs), (std::vector<std::size_t>{1, 2, 0}));
  auto sorted = calib::finalize(linalg::SymMatrix(Matrix{{3, 0}, {0, 1}}), 0.0, 4.0);
  EXPECT_EQ(act_order_permutation(sorted), (std::vector<std::size_t>{0, 1}));
}

TEST(Config, Validation) {
  QuantConfig c;
  EXPECT_NO_THROW(c.validate());
  c.bits = 5;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = {};
  c.block_size = 0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = {};
  c.search_T = 7;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = {};
  c.group_size = 3;
  EXPECT_THROW(c.validate_for(8), std::invalid_argument);
  EXPECT_NO_THROW(c.validate_for(9));
  c.grid = GridType::LeanNonUniform;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  EXPECT_EQ(parse_grid_type("lean-nu"), GridType::LeanNonUniform);
  EXPECT_EQ(to_string(GridType::MinMaxAffine), "minmax");
  EXPECT_THROW(parse_grid_type("nf4"), std::invalid_argument);
}

TEST(Block, DimensionMismatch) {
  auto in = make_instance(2, 6, 1);
  EXPECT_THROW(quantize_layer_block(Matrix(2, 5, 0.5), in.hs, QuantConfig{}), DataError);
}

TEST(Block, OnGridWeightsUnchanged) {
  auto in = make_instance(3, 8, 2);
  // Quantize once, then feed the dequantized weights back in on the same grids.
  auto cfg = cfg_for(GridType::LeanAffine, 4);
  auto first = quantize_layer_block(in.w, in.hs, cfg);
  Matrix on_grid = first.w_hat.cast<double>();
  auto again = quantize_layer_block(on_grid, in.hs, cfg, first.grids);
  EXPECT_EQ(again.w_hat, first.w_hat);
  EXPECT_EQ(again.eps_total, 0.0);
  EXPECT_EQ(again.max_drift, 0.0);
}

TEST(Block, DiagonalHessianIsPlainRounding) {
  std::mt19937_64 rng(4);
  const std::size_t cols = 10;
  Matrix h(cols, cols);
  for (std::size_t i = 0; i < cols; ++i) h(i, i) = 0.5 + i;
  auto hs = calib::finalize(linalg::SymMatrix(h), 0.0, 4.0);
  Matrix w(4, cols);
  for (auto& v : w.flat()) v = std::normal_distribution<double>()(rng);
  for (auto g : {GridType::MinMaxAffine, GridType::LeanAffine, GridType::LeanNonUniform}) {
    auto cfg = cfg_for(g, 3);
    auto res = quantize_layer_block(w, hs, cfg);
    EXPECT_EQ(res.w_hat, round_to_grids(w, res.grids));
  }
}

TEST(Block, MatchesReference) {
  for (int t = 0; t < 12; ++t) {
    auto in = make_instance(1 + t % 6, 4 + 3 * t, 100 + t);
    const auto g = static_cast<GridType>(t % 3);
    auto cfg = cfg_for(g, 2 + t % 3);
    cfg.act_order = t % 4 == 1;
    cfg.block_size = 1 + t % 5;
    if (g == GridType::LeanAffine && in.w.cols() % 4 == 0) cfg.group_size = in.w.cols() / 2;
    auto grids = learn_grids(in.w, in.hs, cfg);
    auto a = quantize_layer_block(in.w, in.hs, cfg, grids);
    auto b = reference_quantize(in.w, in.hs, cfg, grids);
    EXPECT_EQ(a.codes, b.codes) << "trial " << t;
    EXPECT_LT(linalg::max_abs_diff(a.w_hat.cast<double>(), b.w_hat.cast<double>()), 1e-6);
    ASSERT_EQ(a.eps_per_step.size(), b.eps_per_step.size());
    for (std::size_t j = 0; j < a.eps_per_step.size(); ++j) {
      EXPECT_NEAR(a.eps_per_step[j], b.eps_per_step[j], 1e-8 * (1 + b.eps_per_step[j]));
    }
  }
}

TEST(Block, ResultInvariants) {
  auto in = make_instance(5, 16, 7);
  for (auto g : {GridType::MinMaxAffine, GridType::LeanAffine, GridType::LeanNonUniform}) {
    auto cfg = cfg_for(g, 3);
    auto res = quantize_layer_block(in.w, in.hs, cfg);
    double sum = 0.0;
    for (double e : res.eps_per_step) {
      EXPECT_GE(e, 0.0);
      sum += e;
    }
    EXPECT_EQ(sum, res.eps_total);
    for (std::size_t r = 0; r < res.rows; ++r) {
      for (std::size_t c = 0; c < res.cols; ++c) {
        EXPECT_EQ(res.w_hat(r, c),
                  static_cast<float>(res.grids.dequantize(r, c, res.code(r, c))));
      }
    }
  }
}

TEST(Block, WorkerCountDoesNotChangeResult) {
  auto in = make_instance(9, 24, 8);
  auto cfg = cfg_for(GridType::LeanNonUniform, 3);
  cfg.workers = 1;
  auto a = quantize_layer_block(in.w, in.hs, cfg);
  cfg.workers = 4;
  auto b = quantize_layer_block(in.w, in.hs, cfg);
  EXPECT_EQ(a.codes, b.codes);
  EXPECT_EQ(a.w_hat, b.w_hat);
  EXPECT_EQ(a.eps_per_step, b.eps_per_step);
}

TEST(Block, ActOrderKeepsOriginalColumnLayout) {
  auto in = make_instance(3, 12, 9);
  auto cfg = cfg_for(GridType::LeanAffine, 4);
  cfg.act_order = true;
  auto res = quantize_layer_block(in.w, in.hs, cfg);
  EXPECT_EQ(res.order, act_order_permutation(in.hs));
  // Codes are stored by original column: dequantizing them reproduces w_hat.
  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t c = 0; c < 12; ++c)
      EXPECT_EQ(res.w_hat(r, c), static_cast<float>(res.grids.dequantize(r, c, res.code(r, c))));
}

TEST(Grids, StorageSnapping) {
  auto in = make_instance(4, 16, 10);
  for (auto g : {GridType::LeanAffine, GridType::LeanNonUniform, GridType::MinMaxAffine}) {
    auto grids = learn_grids(in.w, in.hs, cfg_for(g, 4));
    for (const auto& a : grids.affine) {
      EXPECT_EQ(a.scale, round_to_half(a.scale));
      EXPECT_GT(a.scale, 0.0);
    }
    for (const auto& nu : grids.nonuniform) {
      EXPECT_NO_THROW(nu.validate());
      for (double l : nu.levels) EXPECT_EQ(l, round_to_half(l));
    }
  }
  LayerGrids tiny;
  tiny.kind = GridKind::NonUniform;
  tiny.nonuniform.push_back({{1.0, 1.0000001, 1.0000002, 1.0000003}, 2});
  snap_to_storage(tiny);
  EXPECT_NO_THROW(tiny.nonuniform[0].validate());
}

TEST(Grids, GroupWiseSlicesOriginalColumns) {
  auto in = make_instance(2, 16, 11);
  auto cfg = cfg_for(GridType::LeanAffine, 3);
  cfg.group_size = 4;
  auto grids = learn_grids(in.w, in.hs, cfg);
  ASSERT_EQ(grids.affine.size(), 8u);
  EXPECT_EQ(grids.groups_per_row(), 4u);
  for (std::size_t r = 0; r < 2; ++r) {
    for (std::size_t g = 0; g < 4; ++g) {
      auto ws = in.w.row(r).subspan(g * 4, 4);
      auto cs = std::span<const double>(in.hs.cluster_weights).subspan(g * 4, 4);
      LayerGrids one;
      one.affine = {grids::affine_grid_search(ws, cs, 3, {64, 1})};
      snap_to_storage(one);
      EXPECT_EQ(grids.affine[r * 4 + g], one.affine[0]);
    }
  }
}

TEST(Exact, TwoWeightExample) {
  linalg::SymMatrix hinv(Matrix{{1, 0}, {0, 4}});
  grids::NonUniformGrid g{{0, 1}, 1};
  auto r = quantize_row_exact(std::vector<double>{0.4, 0.4}, hinv, g);
  ASSERT_EQ(r.order.size(), 2u);
  EXPECT_EQ(r.order[0], 1u);
  EXPECT_NEAR(r.eps_trace[0], 0.02, 1e-15);
  EXPECT_NEAR(r.eps_trace[1], 0.08, 1e-15);
}

TEST(Exact, OnGridIsIndexOrder) {
  std::mt19937_64 rng(12);
  auto hinv = linalg::invert_pd(linalg::SymMatrix(oracle::random_pd(5, rng)));
  grids::NonUniformGrid g{{-1, 0, 0.5, 1}, 2};
  std::vector<double> w = {0.5, -1, 1, 0, 0.5};
  auto r = quantize_row_exact(w, hinv, g);
  EXPECT_EQ(r.order, (std::vector<std::size_t>{0, 1, 2, 3, 4}));
  EXPECT_EQ(r.w_hat, w);
  for (double e : r.eps_trace) EXPECT_EQ(e, 0.0);
}

TEST(Exact, EachStepMatchesRealizedLoss) {
  // Quantizing coordinates one at a time with optimal compensation: the loss
  // after step k, measured directly, minus the loss before equals eps_k.
  std::mt19937_64 rng(13);
  std::normal_distribution<double> nd;
  const std::size_t n = 6;
  Matrix x(n, 40);
  for (auto& v : x.flat()) v = nd(rng);
  auto hinv = linalg::invert_pd(linalg::gram_from_inputs(x));
  auto w = oracle::normal_vec(n, rng);
  grids::AffineGridParams g = grids::minmax_affine(w, 2);
  auto r = quantize_row_exact(w, hinv, g);
  double total = 0.0;
  for (double e : r.eps_trace) {
    EXPECT_GE(e, 0.0);
    total += e;
  }
  // Every coordinate fixed by the end and compensation is exact for a
  // quadratic objective, so the final loss is the sum of the steps.
  const double realized = oracle::row_loss(w, r.w_hat, x);
  EXPECT_NEAR(realized, total, 1e-6 * realized);
  std::vector<bool> seen(n, false);
  for (auto i : r.order) seen[i] = true;
  for (bool s : seen) EXPECT_TRUE(s);
}

TEST(Exact, LayerUsesRowGrids) {
  auto in = make_instance(3, 8, 14);
  auto cfg = cfg_for(GridType::LeanNonUniform, 2);
  auto res = quantize_layer_exact(in.w, in.hs, cfg);
  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t c = 0; c < 8; ++c)
      EXPECT_EQ(res.w_hat(r, c), static_cast<float>(res.grids.dequantize(r, c, res.code(r, c))));
  cfg.grid = GridType::LeanAffine;
  cfg.group_size = 4;
  EXPECT_THROW(quantize_layer_exact(in.w, in.hs, cfg), std::invalid_argument);
}
