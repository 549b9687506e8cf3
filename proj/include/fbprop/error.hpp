#pragma once

#include <stdexcept>
#include <string>

namespace fbprop {

// Base error; `category` is the machine-readable tag the CLI prints as
// "error: <category>: <message>".
class Error : public std::runtime_error {
public:
    Error(std::string category, const std::string& message)
        : std::runtime_error(message), category_(std::move(category)) {}

    const std::string& category() const { return category_; }

private:
    std::string category_;
};

// Tensor/layer shapes do not compose.
class ShapeError : public Error {
public:
    explicit ShapeError(const std::string& message) : Error("shape", message) {}
};

// Bad configuration: unknown layer names, invalid spec fields, bad arguments.
class ConfigError : public Error {
public:
    explicit ConfigError(const std::string& message) : Error("config", message) {}
};

// File I/O, corrupt files, version mismatches.
class IoError : public Error {
public:
    explicit IoError(const std::string& message) : Error("io", message) {}
};

// Undefined metric values, excluded labels, numeric divergence.
class ValueError : public Error {
public:
    explicit ValueError(const std::string& message) : Error("value", message) {}
};

} // namespace fbprop
