#include "leanq/quantizer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>

#include "leanq/error.hpp"
#include "leanq/half.hpp"
#include "leanq/parallel.hpp"
#include "leanq/random.hpp"

namespace leanq::quant {

namespace {

constexpr double kHalfMax = 65504.0;
constexpr double kHalfMinSubnormal = 0x1.0p-24;
constexpr double kDegenerateDiag = 1e-12;

double snap_level(double v) { return round_to_half(std::clamp(v, -kHalfMax, kHalfMax)); }

// Smallest binary16 value strictly greater than v (v itself representable).
double next_half_above(double v) {
  if (v >= kHalfMax) return kHalfMax;
  std::uint16_t h = float_to_half(static_cast<float>(v));
  if (h == 0x8000u) h = 0;  // -0
  if (h & 0x8000u) {
    --h;
  } else {
    ++h;
  }
  return half_to_float(h);
}

void check_shapes(const Matrix& w, const calib::HessianState& hs) {
  if (w.rows() == 0 || w.cols() == 0) throw DataError("empty weight matrix");
  if (w.cols() != hs.dim()) {
    throw DataError("weight matrix has " + std::to_string(w.cols()) +
                    " columns but the Hessian has dim " + std::to_string(hs.dim()));
  }
}

struct Ordering {
  std::vector<std::size_t> order;  // position -> original column
  linalg::SymMatrix hinv;          // inverse Hessian in quantization order
};

Ordering make_ordering(const calib::HessianState& hs, const QuantConfig& cfg) {
  if (!cfg.act_order) {
    std::vector<std::size_t> id(hs.dim());
    std::iota(id.begin(), id.end(), std::size_t{0});
    return {std::move(id), hs.hinv};
  }
  auto order = act_order_permutation(hs);
  auto hinv = linalg::permute(hs.hinv, order);
  return {std::move(order), std::move(hinv)};
}

LayerQuantResult make_result(const Matrix& w, const LayerGrids& grids,
                             std::vector<std::size_t> order) {
  LayerQuantResult res;
  res.rows = w.rows();
  res.cols = w.cols();
  res.codes.assign(w.rows() * w.cols(), 0);
  res.grids = grids;
  res.w_hat = MatrixF(w.rows(), w.cols());
  res.eps_per_step.assign(w.cols(), 0.0);
  res.order = std::move(order);
  return res;
}

void sum_eps(LayerQuantResult& res, const Matrix& eps_rows, const std::vector<double>& drift) {
  for (std::size_t r = 0; r < eps_rows.rows(); ++r) {
    for (std::size_t j = 0; j < eps_rows.cols(); ++j) res.eps_per_step[j] += eps_rows(r, j);
  }
  res.eps_total = 0.0;
  for (double e : res.eps_per_step) res.eps_total += e;
  res.max_drift = drift.empty() ? 0.0 : *std::max_element(drift.begin(), drift.end());
}

}  // namespace

std::string_view to_string(GridType t) {
  switch (t) {
    case GridType::MinMaxAffine: return "minmax";
    case GridType::LeanAffine: return "lean-affine";
    case GridType::LeanNonUniform: return "lean-nu";
  }
  return "unknown";
}

GridType parse_grid_type(std::string_view name) {
  if (name == "minmax" || name == "minmax_affine") return GridType::MinMaxAffine;
  if (name == "lean-affine" || name == "lean_affine") return GridType::LeanAffine;
  if (name == "lean-nu" || name == "lean_nonuniform") return GridType::LeanNonUniform;
  throw std::invalid_argument("unknown grid type '" + std::string(name) + "'");
}

void QuantConfig::validate() const {
  if (bits != 2 && bits != 3 && bits != 4 && bits != 8) {
    throw std::invalid_argument("bits must be one of 2, 3, 4, 8");
  }
  if (block_size == 0) throw std::invalid_argument("block size must be >= 1");
  if (!(damp >= 0.0)) throw std::invalid_argument("dampening must be >= 0");
  if (!(p >= 0.0)) throw std::invalid_argument("p must be >= 0");
  grids::GridSearchConfig{search_T, 1}.validate();
  if (group_size) {
    if (*group_size == 0) throw std::invalid_argument("group size must be positive");
    if (grid == GridType::LeanNonUniform) {
      throw std::invalid_argument("non-uniform grids are learned per row; drop --group-size");
    }
  }
}

void QuantConfig::validate_for(std::size_t cols) const {
  validate();
  if (group_size && cols % *group_size != 0) {
    throw std::invalid_argument("group size " + std::to_string(*group_size) +
                                " does not divide column count " + std::to_string(cols));
  }
}

grids::Quantized LayerGrids::quantize(std::size_t row, std::size_t col, double w) const {
  if (kind == GridKind::NonUniform) return grids::quant_nu(w, nonuniform[row]);
  return grids::quant_aff(w, affine[row * groups_per_row() + col / group_size]);
}

double LayerGrids::dequantize(std::size_t row, std::size_t col, int code) const {
  if (kind == GridKind::NonUniform) {
    return nonuniform[row].levels[static_cast<std::size_t>(code)];
  }
  return grids::affine_dequant(code, affine[row * groups_per_row() + col / group_size]);
}

void snap_to_storage(LayerGrids& g) {
  for (auto& a : g.affine) {
    double s = round_to_half(std::min(a.scale, kHalfMax));
    if (!(s > 0.0)) s = kHalfMinSubnormal;
    a.scale = s;
  }
  for (auto& nu : g.nonuniform) {
    for (double& l : nu.levels) l = snap_level(l);
    for (std::size_t i = 1; i < nu.levels.size(); ++i) {
      if (!(nu.levels[i] > nu.levels[i - 1])) nu.levels[i] = next_half_above(nu.levels[i - 1]);
    }
  }
}

double loss_error(double w, double q, double hinv_ii) {
  if (!(hinv_ii > 0.0)) throw NumericalError("inverse Hessian diagonal must be positive");
  const double d = q - w;
  return 0.5 * d * d / hinv_ii;
}

std::vector<double> optimal_perturbation(double w, double q, const linalg::SymMatrix& hinv,
                                         std::size_t i) {
  if (i >= hinv.dim()) throw std::out_of_range("perturbation index out of range");
  const double d = hinv(i, i);
  if (!(d > 0.0)) throw NumericalError("inverse Hessian diagonal must be positive");
  const double coef = (q - w) / d;
  std::vector<double> delta(hinv.dim());
  for (std::size_t k = 0; k < delta.size(); ++k) delta[k] = coef * hinv(k, i);
  delta[i] = q - w;
  return delta;
}

std::vector<std::size_t> act_order_permutation(const calib::HessianState& hs) {
  std::vector<std::size_t> order(hs.dim());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return hs.h(a, a) > hs.h(b, b); });
  return order;
}

LayerGrids learn_grids(const Matrix& w, const calib::HessianState& hs, const QuantConfig& cfg) {
  check_shapes(w, hs);
  cfg.validate_for(w.cols());
  LayerGrids g;
  g.bits = cfg.bits;
  g.rows = w.rows();
  g.cols = w.cols();
  g.group_size = cfg.group_size.value_or(w.cols());
  const std::span<const double> cw = hs.cluster_weights;

  if (cfg.grid == GridType::LeanNonUniform) {
    g.kind = GridKind::NonUniform;
    g.nonuniform.resize(w.rows());
    std::vector<double> objectives(w.rows());
    parallel_for(w.rows(), cfg.workers, [&](std::size_t r) {
      const auto row = w.row(r);
      std::vector<double> init =
          cfg.init == GridInit::Uniform
              ? grids::uniform_init(row, cfg.bits)
              : grids::kmeanspp_init(row, cw, cfg.bits, mix64(cfg.seed) ^ mix64(r + 1));
      auto km = grids::lloyd_kmeans(row, cw, std::move(init), cfg.bits, cfg.kmeans);
      objectives[r] = km.objective;
      g.nonuniform[r] = std::move(km.grid);
    });
    for (double o : objectives) g.cluster_objective += o;
  } else {
    g.kind = GridKind::Affine;
    const std::size_t per_row = g.groups_per_row();
    g.affine.resize(w.rows() * per_row);
    std::vector<double> objectives(g.affine.size());
    const grids::GridSearchConfig serial{cfg.search_T, 1};
    parallel_for(g.affine.size(), cfg.workers, [&](std::size_t task) {
      const std::size_t r = task / per_row;
      const std::size_t off = (task % per_row) * g.group_size;
      const auto ws = w.row(r).subspan(off, g.group_size);
      const auto cs = cw.subspan(off, g.group_size);
      g.affine[task] = cfg.grid == GridType::MinMaxAffine
                           ? grids::minmax_affine(ws, cfg.bits)
                           : grids::affine_grid_search(ws, cs, cfg.bits, serial);
      objectives[task] = grids::grid_objective(ws, cs, g.affine[task]);
    });
    for (double o : objectives) g.cluster_objective += o;
  }
  snap_to_storage(g);
  return g;
}

LayerQuantResult quantize_layer_block(const Matrix& w, const calib::HessianState& hs,
                                      const QuantConfig& cfg) {
  return quantize_layer_block(w, hs, cfg, learn_grids(w, hs, cfg));
}

LayerQuantResult quantize_layer_block(const Matrix& w, const calib::HessianState& hs,
                                      const QuantConfig& cfg, const LayerGrids& grids) {
  check_shapes(w, hs);
  cfg.validate_for(w.cols());
  auto ordering = make_ordering(hs, cfg);
  const linalg::CholeskyFactor u =
      cfg.act_order ? linalg::cholesky_upper(ordering.hinv) : hs.chol;
  const std::size_t rows = w.rows();
  const std::size_t cols = w.cols();
  const std::size_t block = cfg.block_size;
  const auto& order = ordering.order;

  LayerQuantResult res = make_result(w, grids, order);
  Matrix eps_rows(rows, cols);
  std::vector<double> drift(rows, 0.0);

  // Rows never interact, so each row runs the full block loop on its own.
  parallel_for(rows, cfg.workers, [&](std::size_t r) {
    std::vector<double> cur(cols);
    for (std::size_t j = 0; j < cols; ++j) cur[j] = w(r, order[j]);
    std::vector<double> err(block);
    for (std::size_t i = 0; i < cols; i += block) {
      const std::size_t end = std::min(i + block, cols);
      for (std::size_t j = i; j < end; ++j) {
        const std::size_t oc = order[j];
        const auto q = grids.quantize(r, oc, cur[j]);
        res.codes[r * cols + oc] = static_cast<std::uint8_t>(q.code);
        res.w_hat(r, oc) = static_cast<float>(q.value);
        drift[r] = std::max(drift[r], std::abs(cur[j] - w(r, oc)));
        const double d = u(j, j);
        const double diff = cur[j] - q.value;
        const double e = diff / d;
        eps_rows(r, j) = 0.5 * diff * diff / (d * d);
        for (std::size_t k = j + 1; k < end; ++k) cur[k] -= e * u(j, k);
        err[j - i] = e;
      }
      // Lazy update of the columns right of the block.
      for (std::size_t jj = 0; jj < end - i; ++jj) {
        const double e = err[jj];
        const auto urow = u.upper().row(i + jj);
        for (std::size_t k = end; k < cols; ++k) cur[k] -= e * urow[k];
      }
    }
  });
  sum_eps(res, eps_rows, drift);
  return res;
}

LayerQuantResult reference_quantize(const Matrix& w, const calib::HessianState& hs,
                                        const QuantConfig& cfg) {
  return reference_quantize(w, hs, cfg, learn_grids(w, hs, cfg));
}

LayerQuantResult reference_quantize(const Matrix& w, const calib::HessianState& hs,
                                        const QuantConfig& cfg, const LayerGrids& grids) {
  check_shapes(w, hs);
  cfg.validate_for(w.cols());
  auto ordering = make_ordering(hs, cfg);
  const std::size_t rows = w.rows();
  const std::size_t cols = w.cols();
  const auto& order = ordering.order;

  LayerQuantResult res = make_result(w, grids, order);
  Matrix cur(rows, cols);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t j = 0; j < cols; ++j) cur(r, j) = w(r, order[j]);
  }
  Matrix eps_rows(rows, cols);
  std::vector<double> drift(rows, 0.0);

  // Remaining columns j..cols-1 map to indices 0.. of the shrinking inverse.
  linalg::SymMatrix hcur = ordering.hinv;
  for (std::size_t j = 0; j < cols; ++j) {
    for (std::size_t r = 0; r < rows; ++r) {
      const std::size_t oc = order[j];
      const double wj = cur(r, j);
      const auto q = grids.quantize(r, oc, wj);
      res.codes[r * cols + oc] = static_cast<std::uint8_t>(q.code);
      res.w_hat(r, oc) = static_cast<float>(q.value);
      drift[r] = std::max(drift[r], std::abs(wj - w(r, oc)));
      eps_rows(r, j) = loss_error(wj, q.value, hcur(0, 0));
      const auto delta = optimal_perturbation(wj, q.value, hcur, 0);
      for (std::size_t t = 0; t < delta.size(); ++t) cur(r, j + t) += delta[t];
    }
    if (j + 1 < cols) hcur = linalg::downdate_inverse(hcur, 0);
  }
  sum_eps(res, eps_rows, drift);
  return res;
}

ExactRowResult quantize_row_exact(std::span<const double> w, const linalg::SymMatrix& hinv,
                                  const grids::Grid& grid) {
  const std::size_t n = w.size();
  if (n != hinv.dim()) throw DataError("row length does not match the inverse Hessian");
  Matrix h = hinv.matrix();
  std::vector<double> cur(w.begin(), w.end());
  std::vector<bool> done(n, false);
  ExactRowResult out;
  out.w_hat.assign(n, 0.0);
  out.codes.assign(n, 0);

  for (std::size_t step = 0; step < n; ++step) {
    std::size_t best = n;
    double best_eps = 0.0;
    grids::Quantized best_q;
    for (std::size_t i = 0; i < n; ++i) {
      if (done[i]) continue;
      const double d = h(i, i);
      if (!(d > kDegenerateDiag)) throw NumericalError("degenerate diagonal in downdate");
      const auto q = grids::quantize(cur[i], grid);
      const double diff = q.value - cur[i];
      const double eps = diff * diff / (2.0 * d);
      if (best == n || eps < best_eps) {
        best = i;
        best_eps = eps;
        best_q = q;
      }
    }
    const std::size_t i = best;
    const double d = h(i, i);
    const double coef = (cur[i] - best_q.value) / d;
    for (std::size_t k = 0; k < n; ++k) {
      if (!done[k] && k != i) cur[k] -= coef * h(k, i);
    }
    cur[i] = best_q.value;
    out.w_hat[i] = best_q.value;
    out.codes[i] = best_q.code;

    // Full-size downdate; row and column i become zero.
    std::vector<double> col(n);
    for (std::size_t a = 0; a < n; ++a) col[a] = h(a, i);
    for (std::size_t a = 0; a < n; ++a) {
      if (done[a]) continue;
      for (std::size_t b = 0; b < n; ++b) {
        if (!done[b]) h(a, b) -= col[a] * col[b] / d;
      }
    }
    for (std::size_t a = 0; a < n; ++a) {
      h(a, i) = 0.0;
      h(i, a) = 0.0;
    }
    done[i] = true;
    out.order.push_back(i);
    out.eps_trace.push_back(best_eps);
  }
  return out;
}

LayerQuantResult quantize_layer_exact(const Matrix& w, const calib::HessianState& hs,
                                      const QuantConfig& cfg) {
  check_shapes(w, hs);
  if (cfg.group_size) throw std::invalid_argument("exact quantization uses row-wise grids");
  if (cfg.act_order) throw std::invalid_argument("exact quantization picks its own order");
  const LayerGrids grids = learn_grids(w, hs, cfg);
  const std::size_t rows = w.rows();
  const std::size_t cols = w.cols();
  std::vector<std::size_t> id(cols);
  std::iota(id.begin(), id.end(), std::size_t{0});
  LayerQuantResult res = make_result(w, grids, std::move(id));
  Matrix eps_rows(rows, cols);
  std::vector<double> drift(rows, 0.0);

  parallel_for(rows, cfg.workers, [&](std::size_t r) {
    const grids::Grid grid = grids.kind == GridKind::NonUniform
                                 ? grids::Grid{grids.nonuniform[r]}
                                 : grids::Grid{grids.affine[r]};
    const auto row = quantize_row_exact(w.row(r), hs.hinv, grid);
    for (std::size_t c = 0; c < cols; ++c) {
      res.codes[r * cols + c] = static_cast<std::uint8_t>(row.codes[c]);
      res.w_hat(r, c) = static_cast<float>(row.w_hat[c]);
      eps_rows(r, c) = row.eps_trace[c];
    }
  });
  sum_eps(res, eps_rows, drift);
  return res;
}

MatrixF round_to_grids(const Matrix& w, const LayerGrids& grids) {
  MatrixF out(w.rows(), w.cols());
  for (std::size_t r = 0; r < w.rows(); ++r) {
    for (std::size_t c = 0; c < w.cols(); ++c) {
      out(r, c) = static_cast<float>(grids.quantize(r, c, w(r, c)).value);
    }
  }
  return out;
}

}  // namespace leanq::quant
