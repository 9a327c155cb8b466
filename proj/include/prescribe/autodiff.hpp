#ifndef PRESCRIBE_AUTODIFF_HPP
#define PRESCRIBE_AUTODIFF_HPP

#include "special.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <stdexcept>
#include <vector>

/**
 * @file autodiff.hpp
 * @brief Minimal reverse-mode automatic differentiation on a flat tape.
 *
 * Every recorded node stores its value and a contiguous run of (parent, partial) edges.
 * Reductions such as dot products are recorded as a single node with many edges,
 * which keeps dense layers cheap compared to a binary-op-only tape.
 *
 * A `Var` that was not created on a tape is a constant and never records edges.
 * Recording requires an active tape on the calling thread, see `TapeScope`.
 */

namespace prescribe::ad {

using Index = std::uint32_t;

inline constexpr Index constant_index = std::numeric_limits<Index>::max();

class Tape {
public:
    Index leaf(double value) {
        nodes_.push_back(Node{ value, static_cast<Index>(parents_.size()), 0 });
        return static_cast<Index>(nodes_.size() - 1);
    }

    Index record(double value, std::span<const Index> parents, std::span<const double> partials) {
        const auto begin = static_cast<Index>(parents_.size());
        Index count = 0;
        for (std::size_t i = 0; i < parents.size(); ++i) {
            if (parents[i] == constant_index) {
                continue;
            }
            parents_.push_back(parents[i]);
            partials_.push_back(partials[i]);
            ++count;
        }
        nodes_.push_back(Node{ value, begin, count });
        return static_cast<Index>(nodes_.size() - 1);
    }

    /**
     * Back-propagates the given seeds (node index, adjoint) through the whole tape.
     * The returned adjoint vector is indexed by node.
     */
    std::vector<double> adjoints(std::span<const std::pair<Index, double>> seeds) const {
        std::vector<double> adj(nodes_.size(), 0.0);
        for (const auto& [idx, seed] : seeds) {
            if (idx != constant_index) {
                adj[idx] += seed;
            }
        }
        for (std::size_t i = nodes_.size(); i-- > 0;) {
            const double a = adj[i];
            if (a == 0) {
                continue;
            }
            const auto& node = nodes_[i];
            for (Index e = node.first_edge; e < node.first_edge + node.edge_count; ++e) {
                adj[parents_[e]] += a * partials_[e];
            }
        }
        return adj;
    }

    std::vector<double> adjoints(Index output) const {
        std::pair<Index, double> seed{ output, 1.0 };
        return adjoints(std::span<const std::pair<Index, double>>(&seed, 1));
    }

    double value(Index i) const { return nodes_[i].value; }

    std::size_t size() const { return nodes_.size(); }

    std::size_t edges() const { return parents_.size(); }

    void clear() {
        nodes_.clear();
        parents_.clear();
        partials_.clear();
    }

    static Tape*& active() {
        thread_local Tape* current = nullptr;
        return current;
    }

private:
    struct Node {
        double value;
        Index first_edge;
        Index edge_count;
    };

    std::vector<Node> nodes_;
    std::vector<Index> parents_;
    std::vector<double> partials_;
};

/**
 * Makes `tape` the recording tape of the current thread for the lifetime of the scope.
 */
class TapeScope {
public:
    explicit TapeScope(Tape& tape) : previous_(Tape::active()) { Tape::active() = &tape; }
    ~TapeScope() { Tape::active() = previous_; }
    TapeScope(const TapeScope&) = delete;
    TapeScope& operator=(const TapeScope&) = delete;

private:
    Tape* previous_;
};

class Var {
public:
    Var() = default;
    Var(double value) : value_(value) {}
    Var(double value, Index index) : value_(value), index_(index) {}

    /**
     * Creates an independent variable on the active tape.
     */
    static Var variable(double value) {
        return Var(value, tape().leaf(value));
    }

    double value() const { return value_; }
    Index index() const { return index_; }
    bool is_constant() const { return index_ == constant_index; }

    static Tape& tape() {
        auto* t = Tape::active();
        if (t == nullptr) {
            throw std::logic_error("autodiff: no active tape on this thread");
        }
        return *t;
    }

    Var& operator+=(const Var& o) { return *this = *this + o; }
    Var& operator-=(const Var& o) { return *this = *this - o; }
    Var& operator*=(const Var& o) { return *this = *this * o; }
    Var& operator/=(const Var& o) { return *this = *this / o; }

    friend Var operator+(const Var& a, const Var& b) { return binary(a.value_ + b.value_, a, 1.0, b, 1.0); }
    friend Var operator-(const Var& a, const Var& b) { return binary(a.value_ - b.value_, a, 1.0, b, -1.0); }
    friend Var operator*(const Var& a, const Var& b) { return binary(a.value_ * b.value_, a, b.value_, b, a.value_); }
    friend Var operator/(const Var& a, const Var& b) {
        const double q = a.value_ / b.value_;
        return binary(q, a, 1.0 / b.value_, b, -q / b.value_);
    }
    friend Var operator-(const Var& a) { return unary(-a.value_, a, -1.0); }

    friend bool operator<(const Var& a, const Var& b) { return a.value_ < b.value_; }
    friend bool operator>(const Var& a, const Var& b) { return a.value_ > b.value_; }
    friend bool operator<=(const Var& a, const Var& b) { return a.value_ <= b.value_; }
    friend bool operator>=(const Var& a, const Var& b) { return a.value_ >= b.value_; }

    static Var unary(double value, const Var& a, double da) {
        if (a.is_constant()) {
            return Var(value);
        }
        const Index p[1] = { a.index_ };
        const double w[1] = { da };
        return Var(value, tape().record(value, p, w));
    }

    static Var binary(double value, const Var& a, double da, const Var& b, double db) {
        if (a.is_constant() && b.is_constant()) {
            return Var(value);
        }
        const Index p[2] = { a.index_, b.index_ };
        const double w[2] = { da, db };
        return Var(value, tape().record(value, p, w));
    }

private:
    double value_ = 0;
    Index index_ = constant_index;
};

inline double value_of(const Var& v) { return v.value(); }

inline Var log(const Var& a) { return Var::unary(std::log(a.value()), a, 1.0 / a.value()); }
inline Var exp(const Var& a) {
    const double e = std::exp(a.value());
    return Var::unary(e, a, e);
}
inline Var sqrt(const Var& a) {
    const double s = std::sqrt(a.value());
    return Var::unary(s, a, 0.5 / s);
}
inline Var abs(const Var& a) {
    const double s = a.value() > 0 ? 1.0 : (a.value() < 0 ? -1.0 : 0.0);
    return Var::unary(std::abs(a.value()), a, s);
}
inline Var log1p(const Var& a) { return Var::unary(std::log1p(a.value()), a, 1.0 / (1.0 + a.value())); }
inline Var lngamma(const Var& a) { return Var::unary(prescribe::lngamma(a.value()), a, prescribe::digamma(a.value())); }
inline Var digamma(const Var& a) { return Var::unary(prescribe::digamma(a.value()), a, prescribe::trigamma(a.value())); }

/**
 * Records a node whose value and partial derivatives were computed externally.
 */
inline Var custom(double value, std::span<const Var> inputs, std::span<const double> partials) {
    bool all_constant = true;
    for (const auto& v : inputs) {
        all_constant = all_constant && v.is_constant();
    }
    if (all_constant) {
        return Var(value);
    }
    std::vector<Index> parents(inputs.size());
    for (std::size_t i = 0; i < inputs.size(); ++i) {
        parents[i] = inputs[i].index();
    }
    return Var(value, Var::tape().record(value, parents, partials));
}

}

namespace prescribe {

inline double value_of(double x) { return x; }

using ad::value_of;

/**
 * `init + sum_i a[i] * b[i]`, recorded as a single node when `T` is `ad::Var`.
 */
template<typename T>
T dot(std::span<const T> a, std::span<const T> b, T init = T(0)) {
    T out = init;
    for (std::size_t i = 0; i < a.size(); ++i) {
        out += a[i] * b[i];
    }
    return out;
}

template<>
inline ad::Var dot<ad::Var>(std::span<const ad::Var> a, std::span<const ad::Var> b, ad::Var init) {
    double value = init.value();
    std::vector<ad::Index> parents;
    std::vector<double> partials;
    parents.reserve(2 * a.size() + 1);
    partials.reserve(2 * a.size() + 1);
    parents.push_back(init.index());
    partials.push_back(1.0);
    for (std::size_t i = 0; i < a.size(); ++i) {
        value += a[i].value() * b[i].value();
        parents.push_back(a[i].index());
        partials.push_back(b[i].value());
        parents.push_back(b[i].index());
        partials.push_back(a[i].value());
    }
    bool all_constant = true;
    for (auto p : parents) {
        all_constant = all_constant && p == ad::constant_index;
    }
    if (all_constant) {
        return ad::Var(value);
    }
    return ad::Var(value, ad::Var::tape().record(value, parents, partials));
}

/**
 * Sum of a span, recorded as a single node when `T` is `ad::Var`.
 */
template<typename T>
T sum(std::span<const T> x) {
    T out = T(0);
    for (const auto& v : x) {
        out += v;
    }
    return out;
}

template<>
inline ad::Var sum<ad::Var>(std::span<const ad::Var> x) {
    double value = 0;
    for (const auto& v : x) {
        value += v.value();
    }
    std::vector<double> ones(x.size(), 1.0);
    return ad::custom(value, x, ones);
}

template<typename T>
T leaky_relu(const T& x, double slope) {
    return value_of(x) >= 0 ? x : x * slope;
}

/**
 * `log(1 + exp(x))` without overflow.
 */
template<typename T>
T softplus(const T& x) {
    using std::exp;
    using std::log1p;
    const double v = value_of(x);
    if (v > 30) {
        return x + log1p(exp(-x));
    }
    return log1p(exp(x));
}

/**
 * `log(sum_i exp(x_i))` with max-shift stabilization.
 */
template<typename T>
T log_sum_exp(std::span<const T> x) {
    using std::exp;
    using std::log;
    double shift = -std::numeric_limits<double>::infinity();
    for (const auto& v : x) {
        shift = std::max(shift, value_of(v));
    }
    T acc = T(0);
    for (const auto& v : x) {
        acc += exp(v - shift);
    }
    return log(acc) + shift;
}

}

#endif
