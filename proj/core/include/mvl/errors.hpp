#pragma once

#include <stdexcept>
#include <string>

namespace mvl {

// Every failure raised by the library derives from Error. The CLI maps
// ValidationError/ConfigError/SchemaError to exit code 1 and everything else
// to exit code 2.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

#define MVL_DEFINE_ERROR(Name)          \
  class Name : public Error {           \
   public:                              \
    using Error::Error;                 \
  };

MVL_DEFINE_ERROR(ShapeError)       // dimension / extent mismatch
MVL_DEFINE_ERROR(ConfigError)      // invalid hyperparameter or component choice
MVL_DEFINE_ERROR(NumericError)     // non-finite value where finite is required
MVL_DEFINE_ERROR(ContractError)    // API misuse (e.g. backward on non-scalar)
MVL_DEFINE_ERROR(SchemaError)      // view layout does not match its schema
MVL_DEFINE_ERROR(DataError)        // degenerate or inconsistent data
MVL_DEFINE_ERROR(FormatError)      // malformed file
MVL_DEFINE_ERROR(TruncationError)  // file shorter than its manifest claims
MVL_DEFINE_ERROR(MetricError)      // metric undefined for the given input
MVL_DEFINE_ERROR(ValidationError)  // experiment configuration rejected

#undef MVL_DEFINE_ERROR

}  // namespace mvl
