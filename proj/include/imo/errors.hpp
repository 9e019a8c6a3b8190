#pragma once

#include <stdexcept>
#include <string>

namespace imo {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Violated precondition between operands, e.g. mismatched shapes.
struct ContractError : Error {
  using Error::Error;
};

/// Bad user data: out-of-range token ids, empty sequences, malformed files.
struct InputError : Error {
  using Error::Error;
};

/// Invalid configuration. `field` names the offending entry as a dotted path.
struct ConfigError : Error {
  ConfigError(std::string field_path, const std::string& what)
      : Error(field_path + ": " + what), field(std::move(field_path)) {}
  std::string field;
};

/// API misuse, e.g. running backward twice over one tape.
struct UsageError : Error {
  using Error::Error;
};

/// Failure during a run that is not attributable to configuration.
struct RunError : Error {
  using Error::Error;
};

}  // namespace imo
