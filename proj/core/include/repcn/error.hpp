#pragma once

#include <stdexcept>
#include <string>

namespace repcn {

// Incompatible tensor shapes or geometry.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// A caller broke an API precondition (non-scalar loss, bad kernel size...).
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// Malformed on-disk data: checkpoints, PGM images.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Training produced a non-finite loss.
class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace repcn
