#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace safe {

// Root of every error thrown by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Shapes that do not line up.
class DimensionError : public Error {
public:
    using Error::Error;
};

class IndexError : public Error {
public:
    using Error::Error;
};

class RangeError : public Error {
public:
    using Error::Error;
};

// Invalid user configuration (bad flags, bad generator parameters, empty sets).
class ConfigError : public Error {
public:
    using Error::Error;
};

// Problems with data on disk or its contents.
class DataError : public Error {
public:
    using Error::Error;
};

// Malformed TensorFile. Carries the byte offset where parsing failed.
class FormatError : public DataError {
public:
    FormatError(const std::string& what, std::uint64_t offset)
        : DataError(what + " (at byte offset " + std::to_string(offset) + ")"), offset_(offset) {}

    std::uint64_t offset() const { return offset_; }

private:
    std::uint64_t offset_;
};

// A class has too few samples for the requested shot count.
class CapacityError : public DataError {
public:
    using DataError::DataError;
};

// Zero-norm feature where a direction is required.
class DegenerateError : public Error {
public:
    using Error::Error;
};

}  // namespace safe
