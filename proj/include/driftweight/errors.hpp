#pragma once

#include <stdexcept>
#include <string>

namespace driftweight {

// Bad configuration or usage: rejected before any computation starts.
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

// Malformed or inconsistent input data (CSV ingestion, label ranges, ...).
struct DataError : std::runtime_error {
    explicit DataError(const std::string& what) : std::runtime_error(what) {}
};

// Numerical failure during computation: non-finite values, diverging series.
struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace driftweight
