#pragma once

#include <stdexcept>
#include <string>

namespace pasm {

// Error families map onto process exit codes at the CLI boundary:
// input/schema/config problems -> 2, numeric failures -> 3, network -> 4.
class InputError : public std::runtime_error {
 public:
  explicit InputError(const std::string& msg) : std::runtime_error(msg) {}
};

class NumericError : public std::runtime_error {
 public:
  explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

class NetworkError : public std::runtime_error {
 public:
  explicit NetworkError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace pasm
