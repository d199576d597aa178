#pragma once

#include <stdexcept>
#include <string>

namespace flowcast {

// Bad arguments, malformed config, shape mismatches. Maps to CLI exit code 2.
class UsageError : public std::runtime_error {
 public:
  explicit UsageError(const std::string& what) : std::runtime_error(what) {}
};

// Non-finite values produced during computation. Maps to CLI exit code 1.
class NumericError : public std::runtime_error {
 public:
  explicit NumericError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace flowcast
