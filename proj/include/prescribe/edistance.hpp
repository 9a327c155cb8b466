#ifndef PRESCRIBE_EDISTANCE_HPP
#define PRESCRIBE_EDISTANCE_HPP

#include "matrix.hpp"
#include "random.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

/**
 * @file edistance.hpp
 * @brief Energy distance between cell populations and the banded confidence score built from it.
 */

namespace prescribe {

/**
 * Cells in rows, features in columns.
 */
using CellMatrix = Matrix<double>;

struct EDistStats {
    /** Mean distance over all cross pairs. */
    double delta_xy = 0;
    double sigma_x = 0;
    double sigma_y = 0;

    /** `2 delta_xy - sigma_x - sigma_y`. */
    double e = 0;
};

namespace detail {

inline double row_distance(const CellMatrix& a, std::size_t i, const CellMatrix& b, std::size_t j) {
    double acc = 0;
    const auto ra = a.row(i);
    const auto rb = b.row(j);
    for (std::size_t k = 0; k < ra.size(); ++k) {
        const double d = ra[k] - rb[k];
        acc += d * d;
    }
    return std::sqrt(acc);
}

inline CellMatrix take_rows(const CellMatrix& x, const std::vector<std::size_t>& rows) {
    CellMatrix out(rows.size(), x.cols());
    for (std::size_t i = 0; i < rows.size(); ++i) {
        std::copy(x.row(rows[i]).begin(), x.row(rows[i]).end(), out.row(i).begin());
    }
    return out;
}

}

/**
 * `1/(n(n-1)) sum_i sum_j ||x_i - x_j||`, summing each unordered pair twice.
 */
inline double self_distance(const CellMatrix& x) {
    const auto n = x.rows();
    if (n < 2) {
        throw std::invalid_argument("self_distance: need at least 2 cells, got " + std::to_string(n));
    }
    double acc = 0;
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = i + 1; j < n; ++j) {
            acc += detail::row_distance(x, i, x, j);
        }
    }
    return 2 * acc / (static_cast<double>(n) * static_cast<double>(n - 1));
}

/**
 * `1/(nm) sum_i sum_j ||x_i - y_j||`.
 */
inline double pairwise_distance(const CellMatrix& x, const CellMatrix& y) {
    if (x.cols() != y.cols()) {
        throw std::invalid_argument("pairwise_distance: feature dimensions differ");
    }
    if (x.rows() == 0 || y.rows() == 0) {
        throw std::invalid_argument("pairwise_distance: empty population");
    }
    double acc = 0;
    for (std::size_t i = 0; i < x.rows(); ++i) {
        for (std::size_t j = 0; j < y.rows(); ++j) {
            acc += detail::row_distance(x, i, y, j);
        }
    }
    return acc / (static_cast<double>(x.rows()) * static_cast<double>(y.rows()));
}

/**
 * Options for `e_distance()`.
 */
struct EDistanceOptions {
    /**
     * If set, both populations are subsampled without replacement to the smaller row count,
     * using this seed.
     */
    std::optional<std::uint64_t> subsample_seed;
};

inline EDistStats e_distance(const CellMatrix& x, const CellMatrix& y, const EDistanceOptions& options = {}) {
    if (options.subsample_seed && x.rows() != y.rows()) {
        const auto common = std::min(x.rows(), y.rows());
        Rng rng(*options.subsample_seed);
        auto rx = rng.sample(x.rows(), common);
        auto ry = rng.sample(y.rows(), common);
        std::sort(rx.begin(), rx.end());
        std::sort(ry.begin(), ry.end());
        return e_distance(detail::take_rows(x, rx), detail::take_rows(y, ry));
    }
    EDistStats out;
    out.delta_xy = pairwise_distance(x, y);
    out.sigma_x = self_distance(x);
    out.sigma_y = self_distance(y);
    out.e = 2 * out.delta_xy - out.sigma_x - out.sigma_y;
    return out;
}

/**
 * Affine min-max map of a fitted reference range onto `[N, 2N]`, clamping outside the range.
 */
struct BandMap {
    double min = 0;
    double max = 1;
    int dim = 1;

    /**
     * @throws std::invalid_argument if the reference values are empty or constant.
     */
    static BandMap fit(const std::vector<double>& reference, int dim) {
        if (reference.empty()) {
            throw std::invalid_argument("BandMap::fit: empty reference set");
        }
        const auto [lo, hi] = std::minmax_element(reference.begin(), reference.end());
        if (!(*hi > *lo)) {
            throw std::invalid_argument("BandMap::fit: reference set is constant");
        }
        return BandMap{ *lo, *hi, dim };
    }

    template<typename T>
    T operator()(const T& value) const {
        const double n = dim;
        const double v = value_of(value);
        if (v <= min) {
            return T(n);
        }
        if (v >= max) {
            return T(2 * n);
        }
        return (value - min) * (n / (max - min)) + n;
    }
};

/**
 * `minmax_to_band()` fitted on `values` themselves.
 */
inline std::vector<double> minmax_to_band(const std::vector<double>& values, int dim) {
    const auto band = BandMap::fit(values, dim);
    std::vector<double> out(values.size());
    for (std::size_t i = 0; i < values.size(); ++i) {
        out[i] = band(values[i]);
    }
    return out;
}

/**
 * `2 nu_tilde - h_tilde`, both inputs in `[N, 2N]`; the result lies in `[0, 3N]`.
 */
template<typename T>
T pseudo_e(const T& nu_tilde, const T& h_tilde, int dim) {
    const double n = dim;
    const double tol = 1e-9 * n;
    for (double v : { value_of(nu_tilde), value_of(h_tilde) }) {
        if (!(v >= n - tol && v <= 2 * n + tol)) {
            throw std::out_of_range("pseudo_e: input " + std::to_string(v) + " outside [N, 2N]");
        }
    }
    return nu_tilde * 2.0 - h_tilde;
}

}

#endif
