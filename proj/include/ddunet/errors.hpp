#pragma once

#include <stdexcept>
#include <string>

namespace ddunet {

// Dimension disagreement between operands of an op.
class ShapeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Invalid layer/model/trainer configuration (groups, sizes, thresholds).
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Caller broke an API precondition (non-scalar loss, missing gradient...).
class ContractError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Values outside their domain (non-binary labels, degenerate batch, empty split).
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Filesystem or codec failure; message carries the offending path.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace ddunet
