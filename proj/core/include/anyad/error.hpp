#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace anyad {

// Base class for everything this library throws on purpose.
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Tensor/operator shape disagreement. Messages carry both shapes.
class ShapeError : public Error {
public:
    using Error::Error;
};

// Violated precondition other than shape (empty index set, missing grad, ...).
class ContractError : public Error {
public:
    using Error::Error;
};

// Malformed external bytes (NIfTI, blob, checkpoint). Carries a byte offset.
class ParseError : public Error {
public:
    ParseError(const std::string& msg, std::uint64_t offset)
        : Error(msg + " (at byte offset " + std::to_string(offset) + ")"), offset_(offset) {}
    std::uint64_t offset() const { return offset_; }

private:
    std::uint64_t offset_ = 0;
};

// Bad or inconsistent configuration (unknown key, missing reference stats, ...).
class ConfigError : public Error {
public:
    using Error::Error;
};

// Metric requested on inputs where it is mathematically undefined.
class MetricUndefinedError : public Error {
public:
    using Error::Error;
};

// NaN/Inf detected where finite values are required.
class NumericError : public Error {
public:
    using Error::Error;
};

}  // namespace anyad
