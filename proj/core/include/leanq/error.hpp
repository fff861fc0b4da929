#pragma once

#include <stdexcept>
#include <string>

namespace leanq {

// Malformed or inconsistent input data: bad files, shape mismatches.
class DataError : public std::runtime_error {
 public:
  explicit DataError(const std::string& what) : std::runtime_error(what) {}
};

// Factorization/inversion failures and other breakdowns of the numerics.
class NumericalError : public std::runtime_error {
 public:
  explicit NumericalError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace leanq
