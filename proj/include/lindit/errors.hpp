#pragma once

#include <stdexcept>
#include <string>

namespace lindit {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Operand shapes do not agree.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// Caller passed a value outside an operation's domain (token id, timestep, step count...).
class InputError : public Error {
 public:
  using Error::Error;
};

// API misuse: precondition on call order or object relationship violated.
class ContractError : public Error {
 public:
  using Error::Error;
};

// NaN/Inf where finite values are required.
class NumericError : public Error {
 public:
  using Error::Error;
};

// Invalid growth or prune plan.
class PlanError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

// Renderer could not place the requested objects.
class FeasibilityError : public Error {
 public:
  using Error::Error;
};

}  // namespace lindit
