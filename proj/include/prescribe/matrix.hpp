#ifndef PRESCRIBE_MATRIX_HPP
#define PRESCRIBE_MATRIX_HPP

#include "autodiff.hpp"

#include <array>
#include <cmath>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

/**
 * @file matrix.hpp
 * @brief Small dense row-major matrices over `double` or `ad::Var`, and the factorizations used by the NIW math.
 */

namespace prescribe {

template<typename T>
using Vector = std::vector<T>;

template<typename T>
class Matrix {
public:
    Matrix() = default;
    Matrix(std::size_t rows, std::size_t cols, T fill = T(0)) : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

    static Matrix identity(std::size_t n) {
        Matrix out(n, n);
        for (std::size_t i = 0; i < n; ++i) {
            out(i, i) = T(1);
        }
        return out;
    }

    T& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
    const T& operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }

    std::span<T> row(std::size_t r) { return std::span<T>(data_.data() + r * cols_, cols_); }
    std::span<const T> row(std::size_t r) const { return std::span<const T>(data_.data() + r * cols_, cols_); }

    std::vector<T>& data() { return data_; }
    const std::vector<T>& data() const { return data_; }

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<T> data_;
};

/**
 * Thrown when a matrix expected to be positive definite is not, even after jitter.
 */
class NotPositiveDefinite : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/**
 * Diagonal jitter values tried in order by `cholesky_psd()`.
 */
inline constexpr std::array<double, 4> default_jitter_ladder{ 0.0, 1e-10, 1e-8, 1e-6 };

/**
 * Outcome of a jittered Cholesky factorization.
 */
template<typename T>
struct CholeskyResult {
    Matrix<T> factor;
    double jitter = 0;
};

namespace detail {

template<typename T>
bool try_cholesky(const Matrix<T>& m, double jitter, Matrix<T>& out) {
    using std::sqrt;
    const std::size_t n = m.rows();
    out = Matrix<T>(n, n);
    for (std::size_t j = 0; j < n; ++j) {
        T diag = m(j, j) + jitter;
        for (std::size_t k = 0; k < j; ++k) {
            diag -= out(j, k) * out(j, k);
        }
        if (!(value_of(diag) > 0) || !std::isfinite(value_of(diag))) {
            return false;
        }
        const T root = sqrt(diag);
        out(j, j) = root;
        for (std::size_t i = j + 1; i < n; ++i) {
            T acc = m(i, j);
            for (std::size_t k = 0; k < j; ++k) {
                acc -= out(i, k) * out(j, k);
            }
            out(i, j) = acc / root;
        }
    }
    return true;
}

}

/**
 * Lower-triangular factor `L` with `L L^T = M + eps I`, where `eps` is the first entry of `ladder` that succeeds.
 * Only the lower triangle of `M` is read.
 */
template<typename T>
CholeskyResult<T> cholesky_psd(const Matrix<T>& m, std::span<const double> ladder = default_jitter_ladder) {
    if (m.rows() != m.cols()) {
        throw std::invalid_argument("cholesky_psd: matrix must be square");
    }
    CholeskyResult<T> out;
    for (double eps : ladder) {
        if (detail::try_cholesky(m, eps, out.factor)) {
            out.jitter = eps;
            return out;
        }
    }
    throw NotPositiveDefinite("cholesky_psd: matrix is not positive definite after jitter " + std::to_string(ladder.empty() ? 0.0 : ladder.back()));
}

/**
 * Inverse of a lower-triangular matrix with nonzero diagonal, by forward substitution.
 */
template<typename T>
Matrix<T> lower_inverse(const Matrix<T>& l) {
    const std::size_t n = l.rows();
    Matrix<T> out(n, n);
    for (std::size_t j = 0; j < n; ++j) {
        out(j, j) = T(1) / l(j, j);
        for (std::size_t i = j + 1; i < n; ++i) {
            T acc = T(0);
            for (std::size_t k = j; k < i; ++k) {
                acc -= l(i, k) * out(k, j);
            }
            out(i, j) = acc / l(i, i);
        }
    }
    return out;
}

/**
 * `A^T A` for a square `A`, symmetric by construction.
 */
template<typename T>
Matrix<T> gram_transpose(const Matrix<T>& a) {
    const std::size_t n = a.rows();
    Matrix<T> out(n, n);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j <= i; ++j) {
            T acc = T(0);
            for (std::size_t k = 0; k < n; ++k) {
                acc += a(k, i) * a(k, j);
            }
            out(i, j) = acc;
            out(j, i) = acc;
        }
    }
    return out;
}

/**
 * `A A^T`, symmetric by construction.
 */
template<typename T>
Matrix<T> gram(const Matrix<T>& a) {
    const std::size_t n = a.rows();
    Matrix<T> out(n, n);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j <= i; ++j) {
            T acc = T(0);
            for (std::size_t k = 0; k < a.cols(); ++k) {
                acc += a(i, k) * a(j, k);
            }
            out(i, j) = acc;
            out(j, i) = acc;
        }
    }
    return out;
}

/**
 * `log |L L^T|` for a lower-triangular `L` with positive diagonal.
 */
template<typename T>
T log_det_from_factor(const Matrix<T>& l) {
    using std::log;
    T out = T(0);
    for (std::size_t i = 0; i < l.rows(); ++i) {
        out += log(l(i, i));
    }
    return out * 2.0;
}

/**
 * Symmetric positive-definite inverse via Cholesky.
 */
template<typename T>
Matrix<T> spd_inverse(const Matrix<T>& m) {
    auto chol = cholesky_psd(m);
    return gram_transpose(lower_inverse(chol.factor));
}

/**
 * `L^T v` for a lower-triangular `L`.
 */
template<typename T>
Vector<T> lower_transpose_times(const Matrix<T>& l, const Vector<T>& v) {
    const std::size_t n = l.rows();
    Vector<T> out(n, T(0));
    for (std::size_t i = 0; i < n; ++i) {
        T acc = T(0);
        for (std::size_t k = i; k < n; ++k) {
            acc += l(k, i) * v[k];
        }
        out[i] = acc;
    }
    return out;
}

template<typename T>
Matrix<T> outer(const Vector<T>& a, const Vector<T>& b) {
    Matrix<T> out(a.size(), b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        for (std::size_t j = 0; j < b.size(); ++j) {
            out(i, j) = a[i] * b[j];
        }
    }
    return out;
}

template<typename T>
Matrix<T> scaled(const Matrix<T>& m, const T& s) {
    Matrix<T> out = m;
    for (auto& v : out.data()) {
        v = v * s;
    }
    return out;
}

/**
 * Conversion of a `Matrix<double>` to any scalar type.
 */
template<typename T>
Matrix<T> cast(const Matrix<double>& m) {
    Matrix<T> out(m.rows(), m.cols());
    for (std::size_t i = 0; i < m.data().size(); ++i) {
        out.data()[i] = T(m.data()[i]);
    }
    return out;
}

template<typename T>
Vector<T> cast(const Vector<double>& v) {
    return Vector<T>(v.begin(), v.end());
}

template<typename T>
Matrix<double> values(const Matrix<T>& m) {
    Matrix<double> out(m.rows(), m.cols());
    for (std::size_t i = 0; i < m.data().size(); ++i) {
        out.data()[i] = value_of(m.data()[i]);
    }
    return out;
}

template<typename T>
Vector<double> values(const Vector<T>& v) {
    Vector<double> out(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) {
        out[i] = value_of(v[i]);
    }
    return out;
}

}

#endif
