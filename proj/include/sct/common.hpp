#pragma once

#include <stdexcept>
#include <string>

namespace sct {

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Malformed input text; message carries "path:line:" when known.
struct ParseError : Error {
    using Error::Error;
};

// Well-formed input that breaks a structural invariant (duplicate entry,
// index out of range, negative value, ...).
struct ValidationError : Error {
    using Error::Error;
};

// Non-finite numbers where finite ones are required.
struct NumericError : Error {
    using Error::Error;
};

struct ConfigError : Error {
    using Error::Error;
};

struct IoError : Error {
    using Error::Error;
};

} // namespace sct
