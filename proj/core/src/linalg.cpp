#include "leanq/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <optional>
#include <stdexcept>
#include <string>

#include "leanq/error.hpp"

namespace leanq::linalg {

namespace {

constexpr double kDegenerateDiag = 1e-12;
constexpr double kDowndateFloor = 1e-12;

// Lower factor L with M = L L^T, or the failing pivot index.
std::optional<Matrix> cholesky_lower(const Matrix& m, std::size_t* failed_at) {
  const std::size_t n = m.rows();
  Matrix l(n, n);
  for (std::size_t j = 0; j < n; ++j) {
    double pivot = m(j, j);
    for (std::size_t k = 0; k < j; ++k) pivot -= l(j, k) * l(j, k);
    if (!(pivot > 0.0) || !std::isfinite(pivot)) {
      if (failed_at) *failed_at = j;
      return std::nullopt;
    }
    const double d = std::sqrt(pivot);
    l(j, j) = d;
    for (std::size_t i = j + 1; i < n; ++i) {
      double s = m(i, j);
      for (std::size_t k = 0; k < j; ++k) s -= l(i, k) * l(j, k);
      l(i, j) = s / d;
    }
  }
  return l;
}

}  // namespace

SymMatrix::SymMatrix(Matrix m) : m_(std::move(m)) {
  if (m_.rows() == 0 || m_.rows() != m_.cols()) {
    throw std::invalid_argument("symmetric matrix must be square with dim >= 1");
  }
  for (std::size_t i = 0; i < m_.rows(); ++i) {
    for (std::size_t j = i + 1; j < m_.cols(); ++j) {
      if (m_(i, j) != m_(j, i)) {
        throw std::invalid_argument("matrix is not symmetric at (" + std::to_string(i) +
                                    ", " + std::to_string(j) + ")");
      }
    }
  }
}

SymMatrix SymMatrix::symmetrized(Matrix m) {
  if (m.rows() == 0 || m.rows() != m.cols()) {
    throw std::invalid_argument("symmetric matrix must be square with dim >= 1");
  }
  for (std::size_t i = 0; i < m.rows(); ++i) {
    for (std::size_t j = i + 1; j < m.cols(); ++j) {
      const double avg = 0.5 * (m(i, j) + m(j, i));
      m(i, j) = avg;
      m(j, i) = avg;
    }
  }
  return SymMatrix(std::move(m), Unchecked{});
}

CholeskyFactor::CholeskyFactor(Matrix upper) : u_(std::move(upper)) {
  if (u_.rows() == 0 || u_.rows() != u_.cols()) {
    throw std::invalid_argument("Cholesky factor must be square with dim >= 1");
  }
  for (std::size_t i = 0; i < u_.rows(); ++i) {
    if (!(u_(i, i) > 0.0)) throw std::invalid_argument("Cholesky factor has non-positive diagonal");
    for (std::size_t j = 0; j < i; ++j) {
      if (u_(i, j) != 0.0) throw std::invalid_argument("Cholesky factor is not upper triangular");
    }
  }
}

Matrix CholeskyFactor::reconstruct() const {
  const std::size_t n = dim();
  Matrix out(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i; j < n; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k <= i; ++k) s += u_(k, i) * u_(k, j);
      out(i, j) = s;
      out(j, i) = s;
    }
  }
  return out;
}

SymMatrix gram_from_inputs(const Matrix& x) {
  if (x.rows() == 0 || x.cols() == 0) throw DataError("empty calibration input");
  const std::size_t n = x.rows();
  Matrix h(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto xi = x.row(i);
    for (std::size_t j = i; j < n; ++j) {
      const auto xj = x.row(j);
      double s = 0.0;
      for (std::size_t t = 0; t < xi.size(); ++t) s += xi[t] * xj[t];
      h(i, j) = 2.0 * s;
      h(j, i) = 2.0 * s;
    }
  }
  return SymMatrix(std::move(h));
}

DampResult dampen(const SymMatrix& h, double df) {
  if (!(df >= 0.0)) throw std::invalid_argument("dampening factor must be >= 0");
  if (df == 0.0) return {h, false};
  double avg = 0.0;
  for (std::size_t i = 0; i < h.dim(); ++i) avg += h(i, i);
  avg /= static_cast<double>(h.dim());
  if (std::abs(avg) < kDegenerateDiag) return {h, true};
  return {add_to_diagonal(h, df * avg), false};
}

SymMatrix add_to_diagonal(const SymMatrix& h, double amount) {
  Matrix m = h.matrix();
  for (std::size_t i = 0; i < m.rows(); ++i) m(i, i) += amount;
  return SymMatrix(std::move(m));
}

SymMatrix invert_pd(const SymMatrix& h) {
  auto l = cholesky_lower(h.matrix(), nullptr);
  if (!l) throw NumericalError("matrix not positive definite; increase dampening");
  const std::size_t n = h.dim();

  // L^-1 by forward substitution against the identity, column by column.
  Matrix linv(n, n);
  for (std::size_t c = 0; c < n; ++c) {
    linv(c, c) = 1.0 / (*l)(c, c);
    for (std::size_t i = c + 1; i < n; ++i) {
      double s = 0.0;
      for (std::size_t k = c; k < i; ++k) s -= (*l)(i, k) * linv(k, c);
      linv(i, c) = s / (*l)(i, i);
    }
  }
  // H^-1 = L^-T L^-1; each entry computed once and mirrored.
  Matrix inv(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i; j < n; ++j) {
      double s = 0.0;
      for (std::size_t k = j; k < n; ++k) s += linv(k, i) * linv(k, j);
      inv(i, j) = s;
      inv(j, i) = s;
    }
  }
  return SymMatrix(std::move(inv));
}

CholeskyFactor cholesky_upper(const SymMatrix& m) {
  std::size_t failed = 0;
  auto l = cholesky_lower(m.matrix(), &failed);
  if (!l) throw NumericalError("not positive definite (pivot " + std::to_string(failed) + ")");
  const std::size_t n = m.dim();
  Matrix u(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i; j < n; ++j) u(i, j) = (*l)(j, i);
  }
  return CholeskyFactor(std::move(u));
}

SymMatrix downdate_inverse(const SymMatrix& hinv, std::size_t i) {
  const std::size_t n = hinv.dim();
  if (i >= n) throw std::out_of_range("downdate index out of range");
  if (n == 1) throw std::invalid_argument("cannot downdate a 1x1 matrix");
  const double d = hinv(i, i);
  if (!(d > kDowndateFloor)) throw NumericalError("degenerate diagonal in downdate");
  Matrix out(n - 1, n - 1);
  for (std::size_t a = 0, oa = 0; a < n; ++a) {
    if (a == i) continue;
    for (std::size_t b = a, ob = oa; b < n; ++b) {
      if (b == i) continue;
      const double v = hinv(a, b) - hinv(a, i) * hinv(i, b) / d;
      out(oa, ob) = v;
      out(ob, oa) = v;
      ++ob;
    }
    ++oa;
  }
  return SymMatrix(std::move(out));
}

SymMatrix remove_row_col(const SymMatrix& m, std::size_t i) {
  const std::size_t n = m.dim();
  if (i >= n) throw std::out_of_range("index out of range");
  if (n == 1) throw std::invalid_argument("cannot remove the only row/column");
  Matrix out(n - 1, n - 1);
  for (std::size_t a = 0, oa = 0; a < n; ++a) {
    if (a == i) continue;
    for (std::size_t b = 0, ob = 0; b < n; ++b) {
      if (b == i) continue;
      out(oa, ob++) = m(a, b);
    }
    ++oa;
  }
  return SymMatrix(std::move(out));
}

SymMatrix permute(const SymMatrix& m, const std::vector<std::size_t>& order) {
  const std::size_t n = m.dim();
  if (order.size() != n) throw std::invalid_argument("permutation size mismatch");
  Matrix out(n, n);
  for (std::size_t a = 0; a < n; ++a) {
    for (std::size_t b = 0; b < n; ++b) out(a, b) = m(order[a], order[b]);
  }
  return SymMatrix(std::move(out));
}

double max_abs_diff(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw std::invalid_argument("shape mismatch in max_abs_diff");
  }
  double m = 0.0;
  for (std::size_t k = 0; k < a.flat().size(); ++k) {
    m = std::max(m, std::abs(a.flat()[k] - b.flat()[k]));
  }
  return m;
}

}  // namespace leanq::linalg
