#ifndef PRESCRIBE_NIW_HPP
#define PRESCRIBE_NIW_HPP

#include "matrix.hpp"
#include "special.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>

/**
 * @file niw.hpp
 * @brief Closed-form Normal-Inverse-Wishart mathematics.
 *
 * Parameterization: `L` is a lower-triangular factor of the precision scale,
 * i.e. the Wishart scale of the precision is `Psi^{-1} = nu L L^T`.
 * Consequently `E[Lambda] = nu^2 L L^T` and the sufficient statistic
 * `chi2 = mu0 mu0^T + nu^{-2} L^{-T} L^{-1}` is a second moment.
 *
 * Every function is templated on the scalar so that the training code can run it on `ad::Var`.
 */

namespace prescribe {

template<typename T>
struct NIWParams {
    /** Location. */
    Vector<T> mu0;

    /** Location pseudo-count. */
    T kappa = T(1);

    /** Degrees of freedom. */
    T nu = T(1);

    /** Lower-triangular precision-scale factor with positive diagonal. */
    Matrix<T> L;

    std::size_t dim() const { return mu0.size(); }

    /**
     * @throws std::invalid_argument if the shape, sign or triangularity invariants do not hold.
     */
    void validate() const {
        const auto n = dim();
        if (n == 0 || L.rows() != n || L.cols() != n) {
            throw std::invalid_argument("NIWParams: inconsistent dimensions");
        }
        if (!(value_of(kappa) > 0)) {
            throw std::invalid_argument("NIWParams: kappa must be positive");
        }
        if (!(value_of(nu) >= static_cast<double>(n))) {
            throw std::invalid_argument("NIWParams: nu must be at least the dimension");
        }
        for (std::size_t i = 0; i < n; ++i) {
            if (!(value_of(L(i, i)) > 0)) {
                throw std::invalid_argument("NIWParams: diagonal of L must be positive");
            }
            for (std::size_t j = i + 1; j < n; ++j) {
                if (value_of(L(i, j)) != 0) {
                    throw std::invalid_argument("NIWParams: L must be lower-triangular");
                }
            }
        }
    }
};

template<typename T>
struct SufficientStats {
    Vector<T> chi1;
    Matrix<T> chi2;

    /** Evidence attached to the statistics. */
    T nu_out = T(0);
};

/**
 * Centered second moment `chi2 - chi1 chi1^T`.
 */
template<typename T>
Matrix<T> centered_moment(const SufficientStats<T>& s) {
    Matrix<T> out = s.chi2;
    const auto n = s.chi1.size();
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            out(i, j) = out(i, j) - s.chi1[i] * s.chi1[j];
        }
    }
    return out;
}

/**
 * Multivariate log-gamma in the dof convention, see special.hpp.
 * In `SpecialMode::approximate`, terms with half-argument below 1 fall back to the exact function.
 */
template<typename T>
T mv_lngamma(const T& x, int dim, SpecialMode mode) {
    using prescribe::lngamma;
    using std::log;
    detail::check_mv_domain(value_of(x), dim, "mv_lngamma");
    constexpr double log2pi = 1.8378770664093453;
    T out = T(dim * (dim - 1) / 4.0 * (mode == SpecialMode::exact ? std::log(std::numbers::pi) : log2pi));
    for (int n = 1; n <= dim; ++n) {
        const T a = (x + (1.0 - n)) * 0.5;
        if (mode == SpecialMode::exact || value_of(a) < 1) {
            out += lngamma(a);
        } else {
            out += (log2pi - a * 2.0 + (a * 2.0 - 1.0) * log(a)) * 0.5;
        }
    }
    return out;
}

/**
 * Multivariate digamma in the dof convention, see special.hpp.
 */
template<typename T>
T mv_digamma(const T& x, int dim, SpecialMode mode) {
    using prescribe::digamma;
    using std::log;
    detail::check_mv_domain(value_of(x), dim, "mv_digamma");
    T out = T(0);
    for (int n = 1; n <= dim; ++n) {
        const T a = (x + (1.0 - n)) * 0.5;
        if (mode == SpecialMode::exact || value_of(a) < 1) {
            out += digamma(a);
        } else {
            out += log(a);
        }
    }
    return out;
}

/**
 * `ln |2 nu L L^T|`.
 */
template<typename T>
T log_det_two_nu_precision(const NIWParams<T>& p) {
    using std::log;
    const auto n = static_cast<double>(p.dim());
    return log(p.nu * 2.0) * n + log_det_from_factor(p.L);
}

/**
 * Expected log-density `E[ln N(y | mu, Sigma)]` under the NIW.
 *
 * Evaluates `-N/2 ln 2pi + 1/2 (ln|2 nu L L^T| + psi_N) - 1/2 ((y-mu0)^T nu^2 L L^T (y-mu0) + N/kappa)`,
 * where `psi_N` is the multivariate digamma at the degrees of freedom.
 * The identity-trace term is `N / kappa`, which is `N / (2 nu)` under the coupling `kappa = 2 nu`.
 */
template<typename T>
T niw_expected_loglik(const Vector<T>& y, const NIWParams<T>& p, SpecialMode mode = SpecialMode::approximate) {
    const auto n = p.dim();
    if (y.size() != n) {
        throw std::invalid_argument("niw_expected_loglik: dimension mismatch");
    }
    Vector<T> diff(n);
    for (std::size_t i = 0; i < n; ++i) {
        diff[i] = y[i] - p.mu0[i];
    }
    const auto proj = lower_transpose_times(p.L, diff);
    const T quad = dot<T>(proj, proj) * p.nu * p.nu;
    constexpr double log2pi = 1.8378770664093453;
    const T logdet = log_det_two_nu_precision(p);
    const T psi = mv_digamma(p.nu, static_cast<int>(n), mode);
    return (logdet + psi) * 0.5 - (quad + T(static_cast<double>(n)) / p.kappa) * 0.5 - 0.5 * n * log2pi;
}

/**
 * Mean of `niw_expected_loglik()` over a population with the given mean and (biased) covariance.
 * Uses `mean_c (y_c - mu)^T A (y_c - mu) = (ybar - mu)^T A (ybar - mu) + tr(A Cov)`.
 */
template<typename T>
T niw_expected_loglik_population(const Vector<double>& mean, const Matrix<double>& covariance, const NIWParams<T>& p, SpecialMode mode = SpecialMode::approximate) {
    const auto n = p.dim();
    if (mean.size() != n || covariance.rows() != n || covariance.cols() != n) {
        throw std::invalid_argument("niw_expected_loglik_population: dimension mismatch");
    }
    Vector<T> centre(mean.begin(), mean.end());
    T value = niw_expected_loglik(centre, p, mode);

    // tr(L^T Cov L), column by column
    T trace = T(0);
    Vector<T> column(n), cov_column(n);
    for (std::size_t j = 0; j < n; ++j) {
        for (std::size_t a = 0; a < n; ++a) {
            column[a] = p.L(a, j);
        }
        for (std::size_t a = 0; a < n; ++a) {
            Vector<T> cov_row(covariance.row(a).begin(), covariance.row(a).end());
            cov_column[a] = dot<T>(cov_row, column);
        }
        trace += dot<T>(column, cov_column);
    }
    return value - trace * p.nu * p.nu * 0.5;
}

/**
 * Differential entropy of the inverse-Wishart marginal,
 * `-(N+1)/2 ln|2 nu L L^T| + lnGamma_N - (nu+N+1)/2 psi_N + nu N / 2`.
 */
template<typename T>
T niw_entropy(const NIWParams<T>& p, SpecialMode mode = SpecialMode::approximate) {
    const auto n = static_cast<double>(p.dim());
    const int dim = static_cast<int>(p.dim());
    const T logdet = log_det_two_nu_precision(p);
    return -logdet * ((n + 1) / 2) + mv_lngamma(p.nu, dim, mode) - (p.nu + (n + 1)) * 0.5 * mv_digamma(p.nu, dim, mode) + p.nu * n * 0.5;
}

/**
 * `chi1 = mu0`, `chi2 = mu0 mu0^T + nu^{-2} L^{-T} L^{-1}`, `nu_out = nu`.
 */
template<typename T>
SufficientStats<T> sufficient_stats_from_params(const NIWParams<T>& p) {
    const auto n = p.dim();
    for (std::size_t i = 0; i < n; ++i) {
        if (!(value_of(p.L(i, i)) > 0)) {
            throw std::invalid_argument("sufficient_stats_from_params: L is singular");
        }
    }
    SufficientStats<T> out;
    out.chi1 = p.mu0;
    const auto inv = lower_inverse(p.L);
    out.chi2 = gram_transpose(inv);
    const T scale = T(1) / (p.nu * p.nu);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            out.chi2(i, j) = out.chi2(i, j) * scale + p.mu0[i] * p.mu0[j];
        }
    }
    out.nu_out = p.nu;
    return out;
}

/**
 * How the lower-triangular factor is recovered from a centered second moment `C`.
 */
enum class RecoveryConvention {
    /** `L L^T = (nu^2 C)^{-1}`, the exact inverse of `sufficient_stats_from_params()`. */
    inverse_moment,

    /** `L = nu * chol(nu^2 C)`, kept for comparison only; inconsistent with the closed forms. */
    literal_cholesky
};

/**
 * Recovers the factor `L` given a centered second moment and the degrees of freedom.
 */
template<typename T>
Matrix<T> recover_factor(const Matrix<T>& centered, const T& nu, RecoveryConvention convention = RecoveryConvention::inverse_moment) {
    const T nu2 = nu * nu;
    auto scaled_moment = scaled(centered, nu2);
    if (convention == RecoveryConvention::literal_cholesky) {
        auto f = cholesky_psd(scaled_moment).factor;
        return scaled(f, nu);
    }
    auto moment_factor = cholesky_psd(scaled_moment).factor;
    auto precision = gram_transpose(lower_inverse(moment_factor));
    return cholesky_psd(precision).factor;
}

/**
 * Inverse of `sufficient_stats_from_params()`, with `kappa = 2 nu`.
 */
template<typename T>
NIWParams<T> params_from_sufficient_stats(const SufficientStats<T>& s, RecoveryConvention convention = RecoveryConvention::inverse_moment) {
    NIWParams<T> out;
    out.mu0 = s.chi1;
    out.nu = s.nu_out;
    out.kappa = s.nu_out * 2.0;
    out.L = recover_factor(centered_moment(s), s.nu_out, convention);
    return out;
}

/**
 * Banded posterior evidence, `N nu / (nu + nu_prior) + N`, written as `2N - N nu_prior / (nu + nu_prior)`
 * so that it stays strictly below `2N` for any finite evidence below ~1e15.
 */
template<typename T>
T posterior_evidence(const T& nu, double nu_prior, int dim) {
    if (!(value_of(nu) >= 0) || !(nu_prior > 0)) {
        throw std::invalid_argument("posterior_evidence: requires nu >= 0 and nu_prior > 0");
    }
    const double n = dim;
    return T(2 * n) - T(n * nu_prior) / (nu + nu_prior);
}

template<typename T>
struct BayesUpdate {
    NIWParams<T> posterior;
    SufficientStats<T> stats;

    /** Weight `nu_out / (nu_out + n_prior)` given to the observation. */
    T weight = T(0);
};

/**
 * Conjugate update from centered moments, see `bayes_update()`.
 * `mu_out` and `centered_out` describe the observation, whose evidence is `nu_out`.
 */
template<typename T>
BayesUpdate<T> bayes_update_centered(
    const Vector<T>& mu_prior,
    const Matrix<T>& centered_prior,
    double n_prior,
    const Vector<T>& mu_out,
    const Matrix<T>& centered_out,
    const T& nu_out,
    RecoveryConvention convention = RecoveryConvention::inverse_moment)
{
    if (!(n_prior > 0)) {
        throw std::invalid_argument("bayes_update: prior evidence must be positive");
    }
    if (!(value_of(nu_out) >= 0)) {
        throw std::invalid_argument("bayes_update: observation evidence must be non-negative");
    }
    const auto n = mu_prior.size();
    if (mu_out.size() != n) {
        throw std::invalid_argument("bayes_update: dimension mismatch");
    }

    BayesUpdate<T> out;
    const T w = nu_out / (nu_out + n_prior);
    const T wp = T(n_prior) / (nu_out + n_prior);
    out.weight = w;

    Vector<T> mean(n), diff(n);
    for (std::size_t i = 0; i < n; ++i) {
        mean[i] = mu_prior[i] * wp + mu_out[i] * w;
        diff[i] = mu_out[i] - mu_prior[i];
    }

    // mixture of two second moments, centered on the mixed mean
    Matrix<T> centered(n, n);
    const T cross = w * wp;
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j <= i; ++j) {
            T v = centered_prior(i, j) * wp + centered_out(i, j) * w + cross * diff[i] * diff[j];
            centered(i, j) = v;
            centered(j, i) = v;
        }
    }

    out.stats.chi1 = mean;
    out.stats.chi2 = centered;
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            out.stats.chi2(i, j) = out.stats.chi2(i, j) + mean[i] * mean[j];
        }
    }

    const int dim = static_cast<int>(n);
    const T nu_post = posterior_evidence(nu_out, n_prior, dim);
    out.stats.nu_out = nu_post;
    out.posterior.mu0 = mean;
    out.posterior.nu = nu_post;
    out.posterior.kappa = nu_post * 2.0;
    out.posterior.L = recover_factor(centered, nu_post, convention);
    return out;
}

/**
 * Conjugate update `chi_post = (n_prior chi_prior + nu_out chi_out) / (n_prior + nu_out)`
 * applied to both statistics, followed by recovery of the posterior NIW parameters.
 * The posterior degrees of freedom are the banded evidence `posterior_evidence(nu_out, n_prior, N)`
 * and `kappa = 2 nu`.
 */
template<typename T>
BayesUpdate<T> bayes_update(const SufficientStats<T>& prior, double n_prior, const SufficientStats<T>& out, RecoveryConvention convention = RecoveryConvention::inverse_moment) {
    return bayes_update_centered(prior.chi1, centered_moment(prior), n_prior, out.chi1, centered_moment(out), out.nu_out, convention);
}

/**
 * Multivariate Student-t posterior predictive.
 */
template<typename T>
struct PredictiveT {
    T dof = T(1);
    Vector<T> location;

    /** Lower-triangular `F` with `F F^T` equal to the inverse of the shape matrix. */
    Matrix<T> precision_factor;

    std::size_t dim() const { return location.size(); }

    /**
     * Shape matrix, `(F F^T)^{-1}`.
     */
    Matrix<T> shape() const {
        return gram_transpose(lower_inverse(precision_factor));
    }

    T log_pdf(const Vector<T>& y) const {
        using prescribe::lngamma;
        using std::log;
        const auto n = static_cast<double>(dim());
        Vector<T> diff(dim());
        for (std::size_t i = 0; i < dim(); ++i) {
            diff[i] = y[i] - location[i];
        }
        const auto proj = lower_transpose_times(precision_factor, diff);
        const T quad = dot<T>(proj, proj);
        const T half_logdet = log_det_from_factor(precision_factor) * 0.5;
        return lngamma((dof + n) * 0.5) - lngamma(dof * 0.5) - log(dof * std::numbers::pi) * (n / 2) + half_logdet
            - (dof + n) * 0.5 * log1p_safe(quad / dof);
    }

    T entropy() const {
        using prescribe::digamma;
        using prescribe::lngamma;
        using std::log;
        const auto n = static_cast<double>(dim());
        const T half_logdet = log_det_from_factor(precision_factor) * 0.5;
        return -half_logdet + log(dof * std::numbers::pi) * (n / 2) + lngamma(dof * 0.5) - lngamma((dof + n) * 0.5)
            + (dof + n) * 0.5 * (digamma((dof + n) * 0.5) - digamma(dof * 0.5));
    }

private:
    static T log1p_safe(const T& x) {
        using std::log1p;
        return log1p(x);
    }
};

/**
 * Student-t predictive with `dof = nu - N + 1` and shape `(1 + kappa) / (kappa dof) (nu L L^T)^{-1}`.
 */
template<typename T>
PredictiveT<T> predictive_t(const NIWParams<T>& p) {
    using std::sqrt;
    const auto n = static_cast<double>(p.dim());
    PredictiveT<T> out;
    out.dof = p.nu - (n - 1);
    if (!(value_of(out.dof) > 0)) {
        throw std::domain_error("predictive_t: requires nu - N + 1 > 0");
    }
    out.location = p.mu0;
    const T scale = sqrt(out.dof * p.kappa * p.nu / (p.kappa + 1.0));
    out.precision_factor = scaled(p.L, scale);
    return out;
}

}

#endif
