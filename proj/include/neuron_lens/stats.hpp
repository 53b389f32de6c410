#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>

#include <neuron_lens/error.hpp>

namespace neuron_lens::stats {

// All reductions accumulate in double regardless of the element type.

template <class Vec>
double mean(const Vec& x)
{
    const auto n = static_cast<std::size_t>(x.size());
    if (n == 0) return 0.0;
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) acc += static_cast<double>(x[i]);
    return acc / static_cast<double>(n);
}

/// Population standard deviation (divides by n).
template <class Vec>
double pop_stddev(const Vec& x)
{
    const auto n = static_cast<std::size_t>(x.size());
    if (n == 0) return 0.0;
    const double mu = mean(x);
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double d = static_cast<double>(x[i]) - mu;
        acc += d * d;
    }
    return std::sqrt(acc / static_cast<double>(n));
}

/// Pearson correlation. Defined as 0 when either side has zero variance.
template <class VecA, class VecB>
double pearson(const VecA& x, const VecB& y)
{
    const auto n = static_cast<std::size_t>(x.size());
    require(n == static_cast<std::size_t>(y.size()), ErrorKind::dimension_mismatch,
            "pearson: length mismatch");
    if (n == 0) return 0.0;
    const double mx = mean(x);
    const double my = mean(y);
    double sxy = 0.0, sxx = 0.0, syy = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double dx = static_cast<double>(x[i]) - mx;
        const double dy = static_cast<double>(y[i]) - my;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if (sxx <= 0.0 || syy <= 0.0) return 0.0;
    return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

/// Sample standard error of the mean (n-1 denominator); 0 for fewer than two values.
template <class Vec>
double standard_error(const Vec& x)
{
    const auto n = static_cast<std::size_t>(x.size());
    if (n < 2) return 0.0;
    const double mu = mean(x);
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double d = static_cast<double>(x[i]) - mu;
        acc += d * d;
    }
    return std::sqrt(acc / static_cast<double>(n - 1)) / std::sqrt(static_cast<double>(n));
}

inline double sigmoid(double z)
{
    if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
    const double e = std::exp(z);
    return e / (1.0 + e);
}

/// log(1 + exp(z)) without overflow.
inline double softplus(double z)
{
    return z > 0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z));
}

} // namespace neuron_lens::stats
