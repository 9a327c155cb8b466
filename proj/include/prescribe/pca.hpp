#ifndef PRESCRIBE_PCA_HPP
#define PRESCRIBE_PCA_HPP

#include "matrix.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

namespace prescribe {

/**
 * Principal-component projection fitted on a set of rows.
 */
struct Pca {
    /** Column means of the fitted rows, length G. */
    Vector<double> mean;

    /** Orthonormal components in rows, `N x G`, ordered by decreasing variance. */
    Matrix<double> components;

    /** All eigenvalues of the (1/n) covariance in decreasing order, length G. */
    Vector<double> eigenvalues;

    /** Set when fewer than N eigenvalues are numerically nonzero. */
    bool rank_deficient = false;

    std::size_t dim() const { return components.rows(); }
    std::size_t genes() const { return components.cols(); }

    Vector<double> project(std::span<const double> row) const {
        if (row.size() != genes()) {
            throw std::invalid_argument("Pca::project: expected " + std::to_string(genes()) + " features, got " + std::to_string(row.size()));
        }
        Vector<double> out(dim(), 0.0);
        for (std::size_t k = 0; k < dim(); ++k) {
            double acc = 0;
            const auto comp = components.row(k);
            for (std::size_t g = 0; g < row.size(); ++g) {
                acc += comp[g] * (row[g] - mean[g]);
            }
            out[k] = acc;
        }
        return out;
    }

    Matrix<double> project(const Matrix<double>& rows) const {
        Matrix<double> out(rows.rows(), dim());
        for (std::size_t i = 0; i < rows.rows(); ++i) {
            const auto p = project(rows.row(i));
            std::copy(p.begin(), p.end(), out.row(i).begin());
        }
        return out;
    }

    /** Maps PCA coordinates back to gene space. */
    Vector<double> reconstruct(std::span<const double> coords) const {
        if (coords.size() != dim()) {
            throw std::invalid_argument("Pca::reconstruct: dimension mismatch");
        }
        Vector<double> out = mean;
        for (std::size_t k = 0; k < dim(); ++k) {
            const auto comp = components.row(k);
            for (std::size_t g = 0; g < out.size(); ++g) {
                out[g] += coords[k] * comp[g];
            }
        }
        return out;
    }
};

/**
 * Top-`n_components` principal components of `rows` (cells x genes).
 * Each component's sign is fixed so that its largest-magnitude entry is positive.
 *
 * @throws std::invalid_argument if there are fewer rows than components.
 */
inline Pca fit_pca(const Matrix<double>& rows, std::size_t n_components) {
    const auto n = rows.rows();
    const auto g = rows.cols();
    if (n < n_components || n_components == 0 || n_components > g) {
        throw std::invalid_argument("fit_pca: need at least " + std::to_string(n_components) + " rows and columns, got " + std::to_string(n) + "x" + std::to_string(g));
    }

    Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> x(rows.data().data(), static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(g));
    const Eigen::RowVectorXd mean = x.colwise().mean();
    const Eigen::MatrixXd centered = x.rowwise() - mean;
    const Eigen::MatrixXd cov = (centered.transpose() * centered) / static_cast<double>(n);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(cov);
    if (solver.info() != Eigen::Success) {
        throw std::runtime_error("fit_pca: eigendecomposition failed");
    }

    Pca out;
    out.mean.assign(mean.data(), mean.data() + g);
    out.components = Matrix<double>(n_components, g);
    out.eigenvalues.resize(g);
    const auto& values = solver.eigenvalues();
    const auto& vectors = solver.eigenvectors();
    for (std::size_t k = 0; k < g; ++k) {
        out.eigenvalues[k] = values(static_cast<Eigen::Index>(g - 1 - k));
    }
    const double tol = std::max(1.0, out.eigenvalues.front()) * 1e-12 * static_cast<double>(g);
    std::size_t nonzero = 0;
    for (double v : out.eigenvalues) {
        nonzero += v > tol;
    }
    out.rank_deficient = nonzero < n_components;

    for (std::size_t k = 0; k < n_components; ++k) {
        const auto col = static_cast<Eigen::Index>(g - 1 - k);
        std::size_t arg = 0;
        for (std::size_t j = 1; j < g; ++j) {
            if (std::abs(vectors(static_cast<Eigen::Index>(j), col)) > std::abs(vectors(static_cast<Eigen::Index>(arg), col)) + 1e-12) {
                arg = j;
            }
        }
        const double sign = vectors(static_cast<Eigen::Index>(arg), col) < 0 ? -1.0 : 1.0;
        for (std::size_t j = 0; j < g; ++j) {
            out.components(k, j) = sign * vectors(static_cast<Eigen::Index>(j), col);
        }
    }
    return out;
}

}

#endif
