#pragma once

#include <stdexcept>
#include <string>

namespace aimsim {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Malformed or non-finite input values.
class InvalidInput : public Error {
public:
    using Error::Error;
};

/// A precondition on shapes, sizes or call order was violated.
class ContractError : public Error {
public:
    using Error::Error;
};

/// NaN or Inf produced during a computation.
class NumericError : public Error {
public:
    using Error::Error;
};

class InvalidMap : public Error {
public:
    using Error::Error;
};

class InvalidScenario : public Error {
public:
    using Error::Error;
};

/// File parse failure; the message carries file, line and field context.
class ParseError : public Error {
public:
    using Error::Error;
};

}  // namespace aimsim
