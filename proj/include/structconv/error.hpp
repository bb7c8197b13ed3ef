#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace structconv {

/// Base for every error thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand shapes do not agree, or a geometry yields an empty output.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Malformed tensor container or sidecar file.
class FormatError : public Error {
 public:
  using Error::Error;
};

/// Malformed network description (bad JSON, missing keys).
class ParseError : public Error {
 public:
  using Error::Error;
};

/// Structure parameters violate 1 <= c <= C, 1 <= n <= N (or 1 <= R <= Q).
class ConstraintError : public Error {
 public:
  using Error::Error;
};

/// A weight tensor is too far from the structured subspace to be decomposed.
class ResidualError : public Error {
 public:
  ResidualError(const std::string& what, std::size_t worst_index, double worst_residual)
      : Error(what), worst_index_(worst_index), worst_residual_(worst_residual) {}

  std::size_t worst_index() const noexcept { return worst_index_; }
  double worst_residual() const noexcept { return worst_residual_; }

 private:
  std::size_t worst_index_;
  double worst_residual_;
};

/// Training produced a non-finite loss.
class DivergenceError : public Error {
 public:
  using Error::Error;
};

}  // namespace structconv
