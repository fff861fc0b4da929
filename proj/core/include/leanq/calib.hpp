#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "leanq/linalg.hpp"
#include "leanq/matrix.hpp"

namespace leanq::calib {

// Floor applied to inverse diagonals before raising them to -p.
inline constexpr double kInverseDiagClamp = 1e-10;
// Absolute dampening used when the average Hessian diagonal is ~0.
inline constexpr double kAbsoluteDamping = 1e-6;
// Default relative dampening (fraction of the average diagonal).
inline constexpr double kDefaultDamping = 0.01;

struct CalibrationBatch {
  std::string layer_id;
  MatrixF x;  // features x tokens
};

// Running sum of 2 X X^T over calibration batches for one layer.
class HessianAccumulator {
 public:
  HessianAccumulator() = default;
  explicit HessianAccumulator(std::size_t dim) : dim_(dim), sum_(dim, dim) {}

  // Adds 2 X X^T. An empty accumulator adopts the batch's feature count.
  // Throws DataError naming both dims on mismatch.
  void accumulate(const CalibrationBatch& batch);
  void accumulate(const Matrix& x);

  // Adds another partial sum (same dim, or either side empty).
  void merge(const HessianAccumulator& other);

  std::size_t dim() const noexcept { return dim_; }
  std::uint64_t token_count() const noexcept { return tokens_; }
  const Matrix& sum() const noexcept { return sum_; }

 private:
  std::size_t dim_ = 0;
  std::uint64_t tokens_ = 0;
  Matrix sum_;
};

// Splits batches into `workers` contiguous slices, accumulates each slice on
// its own thread, then merges the partial sums in worker order. Bit-identical
// for a fixed worker count.
HessianAccumulator accumulate_parallel(std::span<const CalibrationBatch> batches,
                                       unsigned workers);

// Second-order information for one layer.
struct HessianState {
  linalg::SymMatrix h;             // damped Hessian
  linalg::SymMatrix hinv;          // its inverse
  linalg::CholeskyFactor chol;     // upper factor of hinv
  std::vector<double> inv_diag;    // diag(hinv)
  std::vector<double> cluster_weights;  // max(inv_diag, clamp)^-p
  double p = 0.0;
  double df = 0.0;
  std::uint64_t token_count = 0;
  bool degenerate = false;  // absolute dampening floor was used

  std::size_t dim() const noexcept { return h.dim(); }
};

// Dampens, inverts and factors the accumulated Hessian, then derives the
// clustering weights.
HessianState finalize(const HessianAccumulator& acc, double df = kDefaultDamping,
                      double p = 4.0);

// Same, starting from an explicit (undamped) Hessian.
HessianState finalize(const linalg::SymMatrix& h, double df, double p,
                      std::uint64_t token_count = 0);

// (max(d, clamp))^-p for every entry.
std::vector<double> cluster_weights_from(std::span<const double> inv_diag, double p);

}  // namespace leanq::calib
