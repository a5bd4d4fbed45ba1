#pragma once

#include <stdexcept>
#include <string>

namespace fedsim {

// Shape or width disagreement between a model, its parameters and its inputs.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// A computation produced NaN or Inf.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Invalid experiment or federation configuration. The CLI maps this to exit 2.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class DataError : public std::runtime_error {
 public:
  enum class Code {
    kMissingFile,
    kMissingColumn,
    kNonNumeric,
    kEmptyBody,
    kRaggedRow,
    kInvalidArgument,
  };

  DataError(Code code, const std::string& what)
      : std::runtime_error(what), code_(code) {}

  Code code() const noexcept { return code_; }

 private:
  Code code_;
};

}  // namespace fedsim
