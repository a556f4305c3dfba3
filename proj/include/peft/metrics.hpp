#pragma once

#include "peft/core.hpp"

#include <cmath>
#include <span>
#include <string>
#include <vector>

namespace peft {

/// Fraction of positions where pred equals truth.
template <typename T>
double accuracy(std::span<const T> pred, std::span<const T> truth) {
    if (pred.empty()) throw InputError("accuracy: empty input");
    if (pred.size() != truth.size()) {
        throw InputError("accuracy: " + std::to_string(pred.size()) + " predictions vs " +
                         std::to_string(truth.size()) + " labels");
    }
    std::size_t hits = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) hits += pred[i] == truth[i] ? 1 : 0;
    return static_cast<double>(hits) / static_cast<double>(pred.size());
}

template <typename T>
double accuracy(const std::vector<T>& pred, const std::vector<T>& truth) {
    return accuracy(std::span<const T>(pred), std::span<const T>(truth));
}

/// Result of a correlation-type statistic; `degenerate` marks the one-constant-vector convention.
struct Concordance {
    double value = 0.0;
    bool degenerate = false;
};

namespace detail {

struct Moments {
    double mean_a = 0, mean_p = 0, var_a = 0, var_p = 0, cov = 0;
};

/// Population (1/n) moments of annotation a and prediction p.
inline Moments moments(std::span<const double> pred, std::span<const double> truth, const char* who) {
    if (pred.size() != truth.size()) {
        throw InputError(std::string(who) + ": length mismatch " + std::to_string(pred.size()) + " vs " +
                         std::to_string(truth.size()));
    }
    if (pred.size() < 2) throw InputError(std::string(who) + ": need at least 2 samples");
    const double n = static_cast<double>(pred.size());
    Moments m;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        m.mean_a += truth[i];
        m.mean_p += pred[i];
    }
    m.mean_a /= n;
    m.mean_p /= n;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const double da = truth[i] - m.mean_a;
        const double dp = pred[i] - m.mean_p;
        m.var_a += da * da;
        m.var_p += dp * dp;
        m.cov += da * dp;
    }
    m.var_a /= n;
    m.var_p /= n;
    m.cov /= n;
    return m;
}

} // namespace detail

/// Pearson correlation. Both constant: UndefinedCorrelationError. One constant: 0, flagged.
inline Concordance pearson_checked(std::span<const double> pred, std::span<const double> truth) {
    const auto m = detail::moments(pred, truth, "pearson");
    const bool const_a = m.var_a == 0.0;
    const bool const_p = m.var_p == 0.0;
    if (const_a && const_p) throw UndefinedCorrelationError("pearson: both vectors are constant");
    if (const_a || const_p) return {0.0, true};
    return {m.cov / std::sqrt(m.var_a * m.var_p), false};
}

inline double pearson(std::span<const double> pred, std::span<const double> truth) {
    return pearson_checked(pred, truth).value;
}

/// Concordance correlation coefficient 2 rho s_a s_p / (s_a^2 + s_p^2 + (mu_a - mu_p)^2)
/// with population variances; 2 rho s_a s_p is evaluated as twice the covariance.
inline Concordance ccc_checked(std::span<const double> pred, std::span<const double> truth) {
    const auto m = detail::moments(pred, truth, "ccc");
    const bool const_a = m.var_a == 0.0;
    const bool const_p = m.var_p == 0.0;
    if (const_a && const_p) throw UndefinedCorrelationError("ccc: both vectors are constant");
    if (const_a || const_p) return {0.0, true};
    const double gap = m.mean_a - m.mean_p;
    return {2.0 * m.cov / (m.var_a + m.var_p + gap * gap), false};
}

inline double ccc(std::span<const double> pred, std::span<const double> truth) {
    return ccc_checked(pred, truth).value;
}

inline double ccc(const std::vector<double>& pred, const std::vector<double>& truth) {
    return ccc(std::span<const double>(pred), std::span<const double>(truth));
}

inline double pearson(const std::vector<double>& pred, const std::vector<double>& truth) {
    return pearson(std::span<const double>(pred), std::span<const double>(truth));
}

struct EvalResult {
    double acc = 0.0;
    double ccc_v = 0.0;
    double ccc_a = 0.0;
    double ccc_d = 0.0;
    long n = 0;
    bool degenerate = false;  // some CCC used the constant-vector convention

    double mean_ccc() const { return (ccc_v + ccc_a + ccc_d) / 3.0; }
};

/// Unweighted mean across folds; n is the total sample count.
inline EvalResult cv_mean(std::span<const EvalResult> folds) {
    if (folds.empty()) throw InputError("cv_mean: no folds");
    EvalResult out;
    for (const auto& f : folds) {
        out.acc += f.acc;
        out.ccc_v += f.ccc_v;
        out.ccc_a += f.ccc_a;
        out.ccc_d += f.ccc_d;
        out.n += f.n;
        out.degenerate = out.degenerate || f.degenerate;
    }
    const double k = static_cast<double>(folds.size());
    out.acc /= k;
    out.ccc_v /= k;
    out.ccc_a /= k;
    out.ccc_d /= k;
    return out;
}

inline EvalResult cv_mean(const std::vector<EvalResult>& folds) { return cv_mean(std::span<const EvalResult>(folds)); }

} // namespace peft
