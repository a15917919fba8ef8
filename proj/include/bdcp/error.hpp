#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace bdcp {

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ParseError : Error {
    ParseError(std::size_t line, const std::string& what)
        : Error("line " + std::to_string(line) + ": " + what), line(line) {}
    std::size_t line;
};

struct InvariantError : Error {
    using Error::Error;
};

struct SamplingError : Error {
    SamplingError(std::string type, const std::string& what) : Error(what), type(std::move(type)) {}
    std::string type;
};

struct ConfigError : Error {
    using Error::Error;
};

struct CapabilityError : Error {
    using Error::Error;
};

struct NumericalError : Error {
    using Error::Error;
};

} // namespace bdcp
