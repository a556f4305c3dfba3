#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <cstring>
#include <stdexcept>
#include <string>

namespace peft {

using Matrix = Eigen::MatrixXd;
using RowVector = Eigen::RowVectorXd;
using Vector = Eigen::VectorXd;
using Index = Eigen::Index;

/// Operand shapes do not conform.
class DimensionError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// A configuration or structural mismatch (adapter set vs architecture, bad policy, unknown key).
class ConfigError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Invalid call-site input (empty data, out-of-range fold, wrong frame width).
class InputError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Malformed serialized data. `line()` is 1-based, 0 when not line-oriented.
class ParseError : public std::runtime_error {
public:
    ParseError(const std::string& what, std::size_t line = 0)
        : std::runtime_error(line ? "line " + std::to_string(line) + ": " + what : what),
          line_(line) {}
    std::size_t line() const noexcept { return line_; }

private:
    std::size_t line_;
};

/// Non-finite loss during optimisation.
class DivergenceError : public std::runtime_error {
public:
    DivergenceError(const std::string& what, int epoch, long step)
        : std::runtime_error(what + " (epoch " + std::to_string(epoch) + ", step " +
                             std::to_string(step) + ")"),
          epoch_(epoch), step_(step) {}
    int epoch() const noexcept { return epoch_; }
    long step() const noexcept { return step_; }

private:
    int epoch_;
    long step_;
};

/// A constant input vector made a correlation undefined.
class UndefinedCorrelationError : public std::domain_error {
public:
    using std::domain_error::domain_error;
};

inline std::string shape_str(const Matrix& m) {
    return std::to_string(m.rows()) + "x" + std::to_string(m.cols());
}

inline void require_shape(const Matrix& m, Index rows, Index cols, const std::string& name) {
    if (m.rows() != rows || m.cols() != cols) {
        throw DimensionError(name + ": expected " + std::to_string(rows) + "x" +
                             std::to_string(cols) + ", got " + shape_str(m));
    }
}

/// FNV-1a over the raw bytes of a matrix; used for bit-exact checkpoint comparisons.
inline std::uint64_t checksum(const Matrix& m, std::uint64_t h = 1469598103934665603ULL) {
    const auto* bytes = reinterpret_cast<const unsigned char*>(m.data());
    const std::size_t n = static_cast<std::size_t>(m.size()) * sizeof(double);
    for (std::size_t i = 0; i < n; ++i) {
        h ^= bytes[i];
        h *= 1099511628211ULL;
    }
    return h;
}

inline bool bit_identical(const Matrix& a, const Matrix& b) {
    return a.rows() == b.rows() && a.cols() == b.cols() &&
           (a.size() == 0 ||
            std::memcmp(a.data(), b.data(), static_cast<std::size_t>(a.size()) * sizeof(double)) == 0);
}

} // namespace peft
