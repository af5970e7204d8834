#pragma once

#include <stdexcept>
#include <string>

namespace diffmap {

// Invalid configuration or parameters (CLI exit code 2).
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Violated call contract: shape mismatch, out-of-range index.
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// Missing or malformed on-disk data (CLI exit code 3).
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Dataset-level inconsistencies such as mismatched sample IDs (exit code 3).
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Training diverged (NaN / inf loss).
class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace diffmap
