#pragma once

#include <stdexcept>
#include <string>

namespace macswin {

// Error taxonomy shared by all modules. The CLI maps these onto exit codes:
// config/validation/shape/contract -> 2, numeric -> 3, io -> 4.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ShapeError : Error {
  using Error::Error;
};

struct ConfigError : Error {
  using Error::Error;
};

struct ValidationError : Error {
  using Error::Error;
};

struct ContractError : Error {
  using Error::Error;
};

struct NumericError : Error {
  using Error::Error;
};

struct IoError : Error {
  using Error::Error;
};

}  // namespace macswin
