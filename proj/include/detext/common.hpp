#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace detext {

inline constexpr const char* kVersion = "0.1.0";

// Error hierarchy shared by the library and the CLI exit-code contract:
// IoError -> 2, ValidationError -> 3, NumericError -> 4.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct IoError : Error {
  using Error::Error;
};
struct ValidationError : Error {
  using Error::Error;
};
struct NumericError : Error {
  using Error::Error;
};

}  // namespace detext

#define DETEXT_CHECK(cond, msg)                       \
  do {                                                \
    if (!(cond)) throw ::detext::ValidationError(msg); \
  } while (0)

#define DETEXT_CHECK_IO(cond, msg)              \
  do {                                          \
    if (!(cond)) throw ::detext::IoError(msg);  \
  } while (0)
