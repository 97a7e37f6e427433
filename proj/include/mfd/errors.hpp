#pragma once

#include <stdexcept>
#include <string>

namespace mfd {

// Input data or configuration that breaks a documented contract.
class ValidationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Out-of-range tuning parameter (levels, specificity, ...).
class ParameterError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// The numerics could not produce a defined estimate.
class EstimationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace mfd
