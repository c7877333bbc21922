#pragma once

#include <stdexcept>
#include <string>

namespace vagam {

/// Invalid or inconsistent input data (bad CSV, dimension mismatch,
/// response/family mismatch, unknown column, ...).
class DataError : public std::runtime_error {
public:
    explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Numerical failure (loss of positive definiteness, overflow, singular
/// information matrix, ...).
class NumericalError : public std::runtime_error {
public:
    explicit NumericalError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace vagam
