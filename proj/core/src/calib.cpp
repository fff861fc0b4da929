#include "leanq/calib.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

#include "leanq/error.hpp"
#include "leanq/parallel.hpp"

namespace leanq::calib {

void HessianAccumulator::accumulate(const CalibrationBatch& batch) {
  accumulate(batch.x.cast<double>());
}

void HessianAccumulator::accumulate(const Matrix& x) {
  if (x.rows() == 0 || x.cols() == 0) throw DataError("empty calibration input");
  if (dim_ == 0) {
    dim_ = x.rows();
    sum_ = Matrix(dim_, dim_);
  } else if (x.rows() != dim_) {
    throw DataError("calibration batch has " + std::to_string(x.rows()) +
                    " features but the accumulator expects " + std::to_string(dim_));
  }
  const linalg::SymMatrix g = linalg::gram_from_inputs(x);
  for (std::size_t k = 0; k < sum_.flat().size(); ++k) sum_.flat()[k] += g.matrix().flat()[k];
  tokens_ += x.cols();
}

void HessianAccumulator::merge(const HessianAccumulator& other) {
  if (other.dim_ == 0) return;
  if (dim_ == 0) {
    *this = other;
    return;
  }
  if (other.dim_ != dim_) {
    throw DataError("cannot merge accumulators of dims " + std::to_string(dim_) + " and " +
                    std::to_string(other.dim_));
  }
  for (std::size_t k = 0; k < sum_.flat().size(); ++k) sum_.flat()[k] += other.sum_.flat()[k];
  tokens_ += other.tokens_;
}

HessianAccumulator accumulate_parallel(std::span<const CalibrationBatch> batches,
                                       unsigned workers) {
  workers = resolve_workers(workers);
  workers = static_cast<unsigned>(std::min<std::size_t>(workers, std::max<std::size_t>(batches.size(), 1)));
  std::vector<HessianAccumulator> partial(workers);
  const std::size_t n = batches.size();
  parallel_for(workers, workers, [&](std::size_t w) {
    const std::size_t begin = n * w / workers;
    const std::size_t end = n * (w + 1) / workers;
    for (std::size_t b = begin; b < end; ++b) partial[w].accumulate(batches[b]);
  });
  HessianAccumulator total;
  for (const auto& p : partial) total.merge(p);
  return total;
}

std::vector<double> cluster_weights_from(std::span<const double> inv_diag, double p) {
  if (!(p >= 0.0)) throw std::invalid_argument("p must be >= 0");
  std::vector<double> w(inv_diag.size());
  for (std::size_t i = 0; i < w.size(); ++i) {
    w[i] = std::pow(std::max(inv_diag[i], kInverseDiagClamp), -p);
  }
  return w;
}

HessianState finalize(const linalg::SymMatrix& h, double df, double p,
                      std::uint64_t token_count) {
  auto damped = linalg::dampen(h, df);
  linalg::SymMatrix hd = damped.degenerate ? linalg::add_to_diagonal(h, kAbsoluteDamping)
                                           : std::move(damped.h);
  linalg::SymMatrix hinv = linalg::invert_pd(hd);
  linalg::CholeskyFactor chol = linalg::cholesky_upper(hinv);
  std::vector<double> inv_diag(hinv.dim());
  for (std::size_t i = 0; i < inv_diag.size(); ++i) {
    inv_diag[i] = hinv(i, i);
    if (!(inv_diag[i] > 0.0)) throw NumericalError("non-positive inverse Hessian diagonal");
  }
  auto weights = cluster_weights_from(inv_diag, p);
  for (double w : weights) {
    if (!(w > 0.0) || !std::isfinite(w)) throw NumericalError("cluster weight is not finite");
  }
  return HessianState{std::move(hd),       std::move(hinv), std::move(chol),
                      std::move(inv_diag), std::move(weights), p,
                      df,                  token_count,     damped.degenerate};
}

HessianState finalize(const HessianAccumulator& acc, double df, double p) {
  if (acc.token_count() == 0) throw DataError("no calibration tokens accumulated");
  return finalize(linalg::SymMatrix::symmetrized(acc.sum()), df, p, acc.token_count());
}

}  // namespace leanq::calib
