#ifndef CHILI_ERROR_H_
#define CHILI_ERROR_H_

#include <stdexcept>
#include <string>

namespace chili {

// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Malformed input: bad shapes, schema violations, non-finite values,
// inconsistent provenance. The CLI maps these to exit code 1.
class ValidationError : public Error {
 public:
  using Error::Error;
};

// Unreadable or unwritable files. The CLI maps these to exit code 2.
class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace chili

#endif  // CHILI_ERROR_H_
