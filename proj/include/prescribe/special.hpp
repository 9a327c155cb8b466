#ifndef PRESCRIBE_SPECIAL_HPP
#define PRESCRIBE_SPECIAL_HPP

#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>

/**
 * @file special.hpp
 * @brief Univariate gamma-family functions and their multivariate sums.
 *
 * The multivariate functions use the "dof" argument convention:
 * `mv_lngamma(x, N)` sums over `lnGamma((x + 1 - n) / 2)` for `n = 1..N`,
 * so `x` is the degrees of freedom of the Wishart rather than half of it.
 */

namespace prescribe {

/**
 * @brief Selects how the multivariate gamma/digamma sums are evaluated.
 */
enum class SpecialMode {
    /**
     * Stirling-style approximations for every term whose half-argument is at least 1,
     * exact univariate functions for the remaining terms.
     * This is what the training losses use.
     */
    approximate,

    /**
     * Exact univariate functions for every term.
     */
    exact
};

/**
 * Digamma function for `x > 0`, via upward recurrence and the asymptotic series.
 */
inline double digamma(double x) {
    if (!(x > 0)) {
        throw std::domain_error("digamma: argument must be positive, got " + std::to_string(x));
    }
    double acc = 0;
    while (x < 10) {
        acc -= 1 / x;
        x += 1;
    }
    const double inv = 1 / x;
    const double inv2 = inv * inv;
    const double series = inv2 * (1.0 / 12 - inv2 * (1.0 / 120 - inv2 * (1.0 / 252 - inv2 * (1.0 / 240 - inv2 * (1.0 / 132)))));
    return acc + std::log(x) - 0.5 * inv - series;
}

/**
 * Trigamma function for `x > 0`.
 */
inline double trigamma(double x) {
    if (!(x > 0)) {
        throw std::domain_error("trigamma: argument must be positive, got " + std::to_string(x));
    }
    double acc = 0;
    while (x < 12) {
        acc += 1 / (x * x);
        x += 1;
    }
    const double inv = 1 / x;
    const double inv2 = inv * inv;
    const double series = inv * (1 + inv * (0.5 + inv * (1.0 / 6 - inv2 * (1.0 / 30 - inv2 * (1.0 / 42 - inv2 * (1.0 / 30))))));
    return acc + series;
}

/**
 * Log-gamma for `x > 0`.
 */
inline double lngamma(double x) {
    if (!(x > 0)) {
        throw std::domain_error("lngamma: argument must be positive, got " + std::to_string(x));
    }
    return std::lgamma(x);
}

namespace detail {

inline void check_mv_domain(double x, int dim, const char* who) {
    if (dim < 1) {
        throw std::domain_error(std::string(who) + ": dimension must be positive");
    }
    // smallest half-argument is (x + 1 - N) / 2
    if (!(x > dim - 1)) {
        throw std::domain_error(std::string(who) + ": requires x > N - 1 (x = " + std::to_string(x) + ", N = " + std::to_string(dim) + ")");
    }
}

}

/**
 * Stirling approximation of the multivariate log-gamma sum,
 * `N(N-1)/4 ln(2 pi) + 1/2 sum_n [ln(2 pi) - (x+1-n) + (x-n) ln((x+1-n)/2)]`.
 */
inline double mv_lngamma_approx(double x, int dim) {
    detail::check_mv_domain(x, dim, "mv_lngamma_approx");
    constexpr double log2pi = 1.8378770664093453;
    double out = dim * (dim - 1) / 4.0 * log2pi;
    for (int n = 1; n <= dim; ++n) {
        out += 0.5 * (log2pi - (x + 1 - n) + (x - n) * std::log((x + 1 - n) / 2));
    }
    return out;
}

/**
 * Log-approximation of the multivariate digamma sum, `sum_n ln((x - n + 1) / 2)`.
 */
inline double mv_digamma_approx(double x, int dim) {
    detail::check_mv_domain(x, dim, "mv_digamma_approx");
    double out = 0;
    for (int n = 1; n <= dim; ++n) {
        out += std::log((x - n + 1) / 2);
    }
    return out;
}

/**
 * Exact multivariate log-gamma, `N(N-1)/4 ln(pi) + sum_n lnGamma((x+1-n)/2)`.
 */
inline double mv_lngamma_exact(double x, int dim) {
    detail::check_mv_domain(x, dim, "mv_lngamma_exact");
    double out = dim * (dim - 1) / 4.0 * std::log(std::numbers::pi);
    for (int n = 1; n <= dim; ++n) {
        out += std::lgamma((x + 1 - n) / 2);
    }
    return out;
}

/**
 * Exact multivariate digamma, `sum_n digamma((x+1-n)/2)`.
 */
inline double mv_digamma_exact(double x, int dim) {
    detail::check_mv_domain(x, dim, "mv_digamma_exact");
    double out = 0;
    for (int n = 1; n <= dim; ++n) {
        out += digamma((x + 1 - n) / 2);
    }
    return out;
}

}

#endif
