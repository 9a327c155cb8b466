#ifndef PRESCRIBE_LOSS_HPP
#define PRESCRIBE_LOSS_HPP

#include "autodiff.hpp"
#include "network.hpp"
#include "niw.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace prescribe {

/**
 * Per-term values of the composite objective, `total = -l1 - lambda1 l2 - lambda2 l3 - lambda3 l4`.
 */
template<typename T>
struct LossBreakdown {
    T l1 = T(0);
    T l2 = T(0);
    T l3 = T(0);
    T l4 = T(0);
    T total = T(0);
    double lambda1 = 0;
    double lambda2 = 0;
    double lambda3 = 0;
};

struct LossWeights {
    double lambda1 = 1e-7;
    double lambda2 = 0.1;
    double lambda3 = 1e-5;
};

enum class RankingLoss {
    /** Full-batch softmax denominator for every position. */
    full_batch,

    /** ListMLE: denominator over the remaining suffix only. */
    suffix
};

/** Expected log-likelihood of one observation. */
template<typename T>
T loss_l1(const Vector<T>& y, const NIWParams<T>& posterior, SpecialMode mode = SpecialMode::approximate) {
    return niw_expected_loglik(y, posterior, mode);
}

template<typename T>
T l1_norm_difference(const Vector<T>& y, const Vector<T>& mu0) {
    using std::abs;
    T out = T(0);
    for (std::size_t i = 0; i < y.size(); ++i) {
        out += abs(y[i] - mu0[i]);
    }
    return out;
}

/** `|y - mu0|_1 * H[NIW]`. */
template<typename T>
T loss_l2(const Vector<T>& y, const NIWParams<T>& posterior, SpecialMode mode = SpecialMode::approximate) {
    return l1_norm_difference(y, posterior.mu0) * niw_entropy(posterior, mode);
}

/**
 * Ranking term over a batch of predicted pseudo E-distances.
 * Entries are ordered by decreasing reference value (stable on ties), then
 * `mean_i [e_i - log sum_j exp(e_j)]`, the sum running over the whole batch or the suffix `j >= i`.
 */
template<typename T>
T loss_l3(std::span<const T> predicted, std::span<const double> reference, RankingLoss variant = RankingLoss::full_batch) {
    const auto b = predicted.size();
    if (b < 2 || reference.size() != b) {
        throw std::invalid_argument("loss_l3: need at least 2 paired entries");
    }
    for (double r : reference) {
        if (!std::isfinite(r)) {
            throw std::invalid_argument("loss_l3: reference values must be finite");
        }
    }
    std::vector<std::size_t> order(b);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t c) { return reference[a] > reference[c]; });
    Vector<T> sorted(b);
    for (std::size_t i = 0; i < b; ++i) {
        sorted[i] = predicted[order[i]];
    }

    T acc = T(0);
    if (variant == RankingLoss::full_batch) {
        const T lse = log_sum_exp<T>(sorted);
        for (std::size_t i = 0; i < b; ++i) {
            acc += sorted[i] - lse;
        }
    } else {
        for (std::size_t i = 0; i < b; ++i) {
            acc += sorted[i] - log_sum_exp<T>(std::span<const T>(sorted).subspan(i));
        }
    }
    return acc / static_cast<double>(b);
}

/**
 * Uncertainty regularizer `|y - mu0|_1 ln(N / (2N - nu_tilde) - 1)` with `nu_tilde` clamped into `[N + eps, 2N - eps]`, `eps = 1e-6 N`.
 */
template<typename T>
T loss_l4(const Vector<T>& y, const Vector<T>& mu0, const T& nu_tilde, int dim) {
    using std::log;
    const double n = dim;
    const double eps = 1e-6 * n;
    T clamped = nu_tilde;
    if (value_of(nu_tilde) < n + eps) {
        clamped = T(n + eps);
    } else if (value_of(nu_tilde) > 2 * n - eps) {
        clamped = T(2 * n - eps);
    }
    return l1_norm_difference(y, mu0) * log(T(n) / (T(2 * n) - clamped) - 1.0);
}

/**
 * The logarithm in `loss_l4()` rewritten through the band identity `N / (2N - nu_tilde) - 1 = nu / nu_prior`,
 * which stays finite and differentiable for any evidence.
 */
template<typename T>
T l4_log_ratio(const T& log_evidence, double nu_prior) {
    return log_evidence - std::log(nu_prior);
}

/**
 * A perturbation category with its cells in PCA space.
 */
struct CategoryTarget {
    std::string key;
    std::vector<std::string> ids;

    /** Cells in rows, N columns. */
    Matrix<double> cells;

    Vector<double> mean;

    /** Biased (1/n) covariance of the cells. */
    Matrix<double> covariance;

    /** Reference E-distance mapped onto `[N, 2N]`. */
    double reference_e = 0;

    std::size_t count() const { return cells.rows(); }
};

inline CategoryTarget make_target(std::string key, std::vector<std::string> ids, Matrix<double> cells, double reference_e = 0) {
    CategoryTarget out;
    out.key = std::move(key);
    out.ids = std::move(ids);
    out.reference_e = reference_e;
    const auto n = cells.rows();
    const auto dim = cells.cols();
    if (n == 0) {
        throw std::invalid_argument("make_target: category " + out.key + " has no cells");
    }
    out.mean.assign(dim, 0.0);
    for (std::size_t c = 0; c < n; ++c) {
        for (std::size_t i = 0; i < dim; ++i) {
            out.mean[i] += cells(c, i);
        }
    }
    for (auto& v : out.mean) {
        v /= static_cast<double>(n);
    }
    out.covariance = Matrix<double>(dim, dim);
    for (std::size_t c = 0; c < n; ++c) {
        for (std::size_t i = 0; i < dim; ++i) {
            for (std::size_t j = 0; j < dim; ++j) {
                out.covariance(i, j) += (cells(c, i) - out.mean[i]) * (cells(c, j) - out.mean[j]) / static_cast<double>(n);
            }
        }
    }
    out.cells = std::move(cells);
    return out;
}

/**
 * `mean_c |y_c - mu0|_1` over the cells of a category, recorded as one node.
 */
template<typename T>
T mean_l1_error(const Matrix<double>& cells, const Vector<T>& mu0) {
    const auto n = cells.rows();
    const auto dim = cells.cols();
    double value = 0;
    std::vector<double> partials(dim, 0.0);
    for (std::size_t c = 0; c < n; ++c) {
        for (std::size_t i = 0; i < dim; ++i) {
            const double d = cells(c, i) - value_of(mu0[i]);
            value += std::abs(d);
            partials[i] -= d > 0 ? 1.0 : (d < 0 ? -1.0 : 0.0);
        }
    }
    value /= static_cast<double>(n);
    for (auto& p : partials) {
        p /= static_cast<double>(n);
    }
    if constexpr (std::is_same_v<T, ad::Var>) {
        return ad::custom(value, mu0, partials);
    } else {
        return value;
    }
}

struct LossOptions {
    LossWeights weights;
    RankingLoss ranking = RankingLoss::full_batch;
    SpecialMode mode = SpecialMode::approximate;
};

/**
 * Composite loss over a batch of categories. Per-cell terms are averaged over all cells in the batch;
 * the ranking term is computed over the categories of the batch (skipped, i.e. zero, if fewer than two).
 */
template<typename T>
LossBreakdown<T> loss_total(std::span<const CategoryTarget* const> batch, const ModelState& state, std::span<const T> params, const LossOptions& options, std::vector<ForwardResult<T>>* forwards = nullptr) {
    LossBreakdown<T> out;
    out.lambda1 = options.weights.lambda1;
    out.lambda2 = options.weights.lambda2;
    out.lambda3 = options.weights.lambda3;
    if (batch.empty()) {
        throw std::invalid_argument("loss_total: empty batch");
    }

    const auto control = encode_control(std::span<const double>(state.control_profile), state.layout, params, state.config.leaky_slope);
    double total_cells = 0;
    for (const auto* t : batch) {
        total_cells += static_cast<double>(t->count());
    }

    Vector<T> pseudo;
    std::vector<double> reference;
    for (const auto* t : batch) {
        auto fwd = forward(t->ids, control, state, params);
        const double weight = static_cast<double>(t->count()) / total_cells;
        const T l1 = niw_expected_loglik_population(t->mean, t->covariance, fwd.posterior, options.mode);
        const T err = mean_l1_error(t->cells, fwd.posterior.mu0);
        out.l1 += l1 * weight;
        out.l2 += err * niw_entropy(fwd.posterior, options.mode) * weight;
        out.l4 += err * l4_log_ratio(fwd.log_evidence, state.prior.nu) * weight;
        pseudo.push_back(fwd.pseudo_e);
        reference.push_back(t->reference_e);
        if (forwards) {
            forwards->push_back(std::move(fwd));
        }
    }
    if (batch.size() >= 2) {
        out.l3 = loss_l3<T>(pseudo, reference, options.ranking);
    }
    out.total = -out.l1 - out.l2 * options.weights.lambda1 - out.l3 * options.weights.lambda2 - out.l4 * options.weights.lambda3;
    return out;
}

}

#endif
