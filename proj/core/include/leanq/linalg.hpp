#pragma once

#include <cstddef>

#include "leanq/matrix.hpp"

namespace leanq::linalg {

// Square matrix whose symmetry is checked on construction. Holds the
// calibration Hessian and its (damped) inverse.
class SymMatrix {
 public:
  // Throws std::invalid_argument unless m is non-empty, square and exactly
  // symmetric.
  explicit SymMatrix(Matrix m);

  // Averages the two triangles first; for products that are symmetric only up
  // to rounding.
  static SymMatrix symmetrized(Matrix m);

  std::size_t dim() const noexcept { return m_.rows(); }
  double operator()(std::size_t i, std::size_t j) const noexcept { return m_(i, j); }
  const Matrix& matrix() const noexcept { return m_; }

  friend bool operator==(const SymMatrix&, const SymMatrix&) = default;

 private:
  struct Unchecked {};
  SymMatrix(Matrix m, Unchecked) : m_(std::move(m)) {}
  Matrix m_;
};

// Upper-triangular U with positive diagonal such that U^T U equals the
// factored matrix.
class CholeskyFactor {
 public:
  // Validates triangularity and the positive diagonal.
  explicit CholeskyFactor(Matrix upper);

  std::size_t dim() const noexcept { return u_.rows(); }
  double operator()(std::size_t i, std::size_t j) const noexcept { return u_(i, j); }
  const Matrix& upper() const noexcept { return u_; }

  // U^T U
  Matrix reconstruct() const;

 private:
  Matrix u_;
};

// 2 X X^T for a features x tokens input. Throws DataError("empty calibration
// input") when X has no rows or no columns.
SymMatrix gram_from_inputs(const Matrix& x);

struct DampResult {
  SymMatrix h;
  // Set when the average diagonal is ~0 and df > 0; h is returned unchanged
  // and the caller is expected to fall back to absolute dampening.
  bool degenerate = false;
};

// H + df * avg(diag(H)) * I.
DampResult dampen(const SymMatrix& h, double df);

// H + amount * I.
SymMatrix add_to_diagonal(const SymMatrix& h, double amount);

// Inverse of a positive definite matrix via its Cholesky factor. Throws
// NumericalError("matrix not positive definite; increase dampening").
SymMatrix invert_pd(const SymMatrix& h);

// Throws NumericalError("not positive definite") on a non-positive pivot.
CholeskyFactor cholesky_upper(const SymMatrix& m);

// Removes index i from an inverse Hessian:
//   (Hinv - Hinv[:,i] Hinv[i,:] / Hinv[i,i]) with row and column i deleted.
// The result is the inverse of H with row/column i deleted.
SymMatrix downdate_inverse(const SymMatrix& hinv, std::size_t i);

// Copy of m with row and column i deleted.
SymMatrix remove_row_col(const SymMatrix& m, std::size_t i);

// Symmetric permutation P M P^T, where result(a, b) = m(order[a], order[b]).
SymMatrix permute(const SymMatrix& m, const std::vector<std::size_t>& order);

double max_abs_diff(const Matrix& a, const Matrix& b);

}  // namespace leanq::linalg
