#ifndef PRESCRIBE_TESTS_ORACLES_HPP
#define PRESCRIBE_TESTS_ORACLES_HPP

// Independent reference computations used by the unit and acceptance tests.
// These deliberately use Eigen, Boost and std::random instead of the library's own helpers.

#include "prescribe/niw.hpp"

#include <Eigen/Dense>
#include <boost/math/special_functions/digamma.hpp>
#include <boost/math/special_functions/gamma.hpp>

#include <cmath>
#include <numbers>
#include <random>
#include <vector>

namespace oracle {

inline Eigen::MatrixXd to_eigen(const prescribe::Matrix<double>& m) {
    Eigen::MatrixXd out(m.rows(), m.cols());
    for (std::size_t i = 0; i < m.rows(); ++i) {
        for (std::size_t j = 0; j < m.cols(); ++j) {
            out(i, j) = m(i, j);
        }
    }
    return out;
}

inline Eigen::VectorXd to_eigen(const std::vector<double>& v) {
    return Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
}

inline double mv_lngamma(double x, int n) {
    double out = n * (n - 1) / 4.0 * std::log(std::numbers::pi);
    for (int i = 1; i <= n; ++i) {
        out += boost::math::lgamma((x + 1 - i) / 2);
    }
    return out;
}

inline double mv_digamma(double x, int n) {
    double out = 0;
    for (int i = 1; i <= n; ++i) {
        out += boost::math::digamma((x + 1 - i) / 2);
    }
    return out;
}

/**
 * Bartlett sampler for the Wishart distribution with scale V and (possibly non-integer) dof.
 */
class WishartSampler {
public:
    WishartSampler(const Eigen::MatrixXd& scale, double dof, unsigned long seed) : chol_(scale.llt().matrixL()), dof_(dof), rng_(seed) {}

    Eigen::MatrixXd draw() {
        const auto n = chol_.rows();
        Eigen::MatrixXd a = Eigen::MatrixXd::Zero(n, n);
        std::normal_distribution<double> normal(0, 1);
        for (Eigen::Index i = 0; i < n; ++i) {
            std::chi_squared_distribution<double> chi(dof_ - static_cast<double>(i));
            a(i, i) = std::sqrt(chi(rng_));
            for (Eigen::Index j = 0; j < i; ++j) {
                a(i, j) = normal(rng_);
            }
        }
        const Eigen::MatrixXd la = chol_ * a;
        return la * la.transpose();
    }

    Eigen::VectorXd gaussian(const Eigen::VectorXd& mean, const Eigen::MatrixXd& precision) {
        std::normal_distribution<double> normal(0, 1);
        Eigen::VectorXd z(mean.size());
        for (Eigen::Index i = 0; i < z.size(); ++i) {
            z(i) = normal(rng_);
        }
        // x = mean + U^{-1} z where precision = U^T U
        Eigen::MatrixXd u = precision.llt().matrixU();
        return mean + u.triangularView<Eigen::Upper>().solve(z);
    }

    std::mt19937_64& rng() { return rng_; }

private:
    Eigen::MatrixXd chol_;
    double dof_;
    std::mt19937_64 rng_;
};

struct McEstimate {
    double mean = 0;
    double standard_error = 0;
};

inline McEstimate summarize(const std::vector<double>& xs) {
    double mean = 0;
    for (double x : xs) {
        mean += x;
    }
    mean /= static_cast<double>(xs.size());
    double var = 0;
    for (double x : xs) {
        var += (x - mean) * (x - mean);
    }
    var /= static_cast<double>(xs.size() - 1);
    return { mean, std::sqrt(var / static_cast<double>(xs.size())) };
}

/**
 * Monte-Carlo E[ln N(y | mu, Lambda^{-1})] with Lambda ~ W(nu L L^T, nu), mu | Lambda ~ N(mu0, (kappa Lambda)^{-1}).
 */
inline McEstimate mc_expected_loglik(const std::vector<double>& y, const prescribe::NIWParams<double>& p, int samples, unsigned long seed) {
    const auto l = to_eigen(p.L);
    const Eigen::MatrixXd scale = p.nu * l * l.transpose();
    const auto n = static_cast<double>(p.dim());
    WishartSampler sampler(scale, p.nu, seed);
    const auto yy = to_eigen(y);
    const auto mu0 = to_eigen(p.mu0);
    std::vector<double> draws(samples);
    for (int s = 0; s < samples; ++s) {
        const Eigen::MatrixXd lambda = sampler.draw();
        const Eigen::VectorXd mu = sampler.gaussian(mu0, p.kappa * lambda);
        const Eigen::VectorXd d = yy - mu;
        draws[s] = -0.5 * n * std::log(2 * std::numbers::pi) + 0.5 * std::log(lambda.determinant()) - 0.5 * d.dot(lambda * d);
    }
    return summarize(draws);
}

/**
 * Monte-Carlo differential entropy of Sigma = Lambda^{-1}, i.e. the inverse-Wishart with scale (nu L L^T)^{-1}.
 */
inline McEstimate mc_inverse_wishart_entropy(const prescribe::NIWParams<double>& p, int samples, unsigned long seed) {
    const auto l = to_eigen(p.L);
    const Eigen::MatrixXd scale = p.nu * l * l.transpose();
    const Eigen::MatrixXd psi = scale.inverse();
    const int n = static_cast<int>(p.dim());
    const double nu = p.nu;
    const double log_norm = nu / 2 * std::log(psi.determinant()) - nu * n / 2.0 * std::log(2.0) - mv_lngamma(nu, n);
    WishartSampler sampler(scale, p.nu, seed);
    std::vector<double> draws(samples);
    for (int s = 0; s < samples; ++s) {
        const Eigen::MatrixXd lambda = sampler.draw();
        const Eigen::MatrixXd sigma = lambda.inverse();
        const double logp = log_norm - (nu + n + 1) / 2 * std::log(sigma.determinant()) - 0.5 * (psi * lambda).trace();
        draws[s] = -logp;
    }
    return summarize(draws);
}

/**
 * Brute-force energy distance over explicit double loops, with the n(n-1) self-distance convention.
 */
inline double brute_e_distance(const prescribe::Matrix<double>& x, const prescribe::Matrix<double>& y) {
    auto dist = [](std::span<const double> a, std::span<const double> b) {
        long double acc = 0;
        for (std::size_t k = 0; k < a.size(); ++k) {
            acc += static_cast<long double>(a[k] - b[k]) * (a[k] - b[k]);
        }
        return std::sqrt(static_cast<double>(acc));
    };
    long double cross = 0, sx = 0, sy = 0;
    for (std::size_t i = 0; i < x.rows(); ++i) {
        for (std::size_t j = 0; j < y.rows(); ++j) {
            cross += dist(x.row(i), y.row(j));
        }
    }
    for (std::size_t i = 0; i < x.rows(); ++i) {
        for (std::size_t j = 0; j < x.rows(); ++j) {
            sx += dist(x.row(i), x.row(j));
        }
    }
    for (std::size_t i = 0; i < y.rows(); ++i) {
        for (std::size_t j = 0; j < y.rows(); ++j) {
            sy += dist(y.row(i), y.row(j));
        }
    }
    const double nx = static_cast<double>(x.rows());
    const double ny = static_cast<double>(y.rows());
    return static_cast<double>(2 * cross / (nx * ny) - sx / (nx * (nx - 1)) - sy / (ny * (ny - 1)));
}

/**
 * Random NIW parameters with dimension n and dof at least n.
 */
inline prescribe::NIWParams<double> random_params(int n, std::mt19937_64& rng, double nu_min = 0, double nu_max = 0) {
    std::normal_distribution<double> normal(0, 1);
    std::uniform_real_distribution<double> unif(0.5, 2.0);
    prescribe::NIWParams<double> p;
    p.mu0.resize(n);
    for (auto& v : p.mu0) {
        v = normal(rng);
    }
    if (nu_max <= 0) {
        nu_min = n + 0.5;
        nu_max = n + 20.0;
    }
    p.nu = std::uniform_real_distribution<double>(nu_min, nu_max)(rng);
    p.kappa = 2 * p.nu;
    p.L = prescribe::Matrix<double>(n, n);
    for (int i = 0; i < n; ++i) {
        p.L(i, i) = unif(rng);
        for (int j = 0; j < i; ++j) {
            p.L(i, j) = 0.5 * normal(rng);
        }
    }
    return p;
}

}

#endif
