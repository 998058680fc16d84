#pragma once

#include <stdexcept>
#include <string>

namespace evarl {

// Malformed arguments: bad indices, shape mismatches, negative coefficients.
class InvalidInput : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Inputs that are well-formed but violate a mathematical precondition
// (zero similarity mass, singular weights, etc).
class DegenerateInput : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

// Importance sampling hit an action the behavior policy never takes.
class UnsupportedAction : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

inline void require(bool ok, const std::string& message) {
  if (!ok) throw InvalidInput(message);
}

}  // namespace evarl
