#ifndef TARS_ERRORS_HPP
#define TARS_ERRORS_HPP

#include <stdexcept>

namespace tars {

/// Channel or row-count mismatch between operands.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A requested count (k, m, level size) exceeds what the input provides.
class SizeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Malformed or truncated file, bad magic, version mismatch.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Rank-deficient geometry where a rigid fit is undefined.
class DegenerateGeometryError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace tars

#endif  // TARS_ERRORS_HPP
