#ifndef PRESCRIBE_FLOW_HPP
#define PRESCRIBE_FLOW_HPP

#include "autodiff.hpp"
#include "matrix.hpp"

#include <cmath>
#include <numbers>
#include <span>
#include <stdexcept>

/**
 * @file flow.hpp
 * @brief Radial normalizing flow evaluated in the normalizing direction.
 *
 * Each layer maps `x -> x + beta h(r) (x - c)` with `r = |x - c|` and `h = 1 / (alpha + r)`.
 * Parameters are stored unconstrained: `alpha = softplus(a)` and `beta = -alpha + softplus(b)`,
 * which keeps every layer invertible. `a == b` gives the identity layer.
 */

namespace prescribe {

/**
 * Offsets of one radial layer inside a flat parameter vector.
 */
struct RadialLayerSpec {
    std::size_t center = 0;
    std::size_t alpha = 0;
    std::size_t beta = 0;
};

/**
 * Log-density of `z` under the flow, with a standard Gaussian base over `R^D`.
 */
template<typename T>
T flow_log_density(const Vector<T>& z, std::span<const RadialLayerSpec> layers, std::span<const T> params) {
    using std::log;
    using std::sqrt;
    const std::size_t dim = z.size();
    Vector<T> x = z;
    Vector<T> diff(dim);
    T log_det = T(0);

    for (const auto& layer : layers) {
        const T alpha = softplus(params[layer.alpha]);
        const T beta = softplus(params[layer.beta]) - alpha;
        for (std::size_t i = 0; i < dim; ++i) {
            diff[i] = x[i] - params[layer.center + i];
        }
        const T r2 = dot<T>(diff, diff);
        const T r = value_of(r2) > 0 ? sqrt(r2) : T(0);
        const T denom = alpha + r;
        const T bh = beta / denom;
        for (std::size_t i = 0; i < dim; ++i) {
            x[i] = x[i] + bh * diff[i];
        }
        const T one_bh = bh + 1.0;
        const T radial = beta * alpha / (denom * denom) + 1.0;
        if (!(value_of(one_bh) > 0) || !(value_of(radial) > 0)) {
            throw std::domain_error("flow_log_density: radial layer is not invertible");
        }
        log_det += log(one_bh) * static_cast<double>(dim - 1) + log(radial);
    }

    constexpr double log2pi = 1.8378770664093453;
    const T sq = dot<T>(x, x);
    return log_det - sq * 0.5 - 0.5 * static_cast<double>(dim) * log2pi;
}

/**
 * Applies the upper bound on the flow log-density; values above it lose their gradient.
 */
template<typename T>
T bound_log_density(const T& log_density, double bound) {
    if (value_of(log_density) > bound) {
        return T(bound);
    }
    return log_density;
}

/**
 * `ln nu = log_density + ln N_H`, capped at 700 so that `exp` stays finite.
 */
template<typename T>
T log_evidence(const T& log_density, int certainty_budget) {
    T out = log_density + std::log(static_cast<double>(certainty_budget));
    if (value_of(out) > 700) {
        return T(700);
    }
    return out;
}

/**
 * Evidence `nu = exp(log_density + ln N_H)`.
 */
template<typename T>
T evidence(const T& log_density, int certainty_budget) {
    using std::exp;
    return exp(log_evidence(log_density, certainty_budget));
}

}

#endif
