#ifndef PRESCRIBE_EVAL_HPP
#define PRESCRIBE_EVAL_HPP

#include "random.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

/**
 * @file eval.hpp
 * @brief Accuracy and calibration metrics, filtering and the random-filter baseline.
 */

namespace prescribe {

inline double pearson(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size() || a.empty()) {
        throw std::invalid_argument("pearson: inputs must have equal nonzero length");
    }
    const double n = static_cast<double>(a.size());
    const double ma = std::accumulate(a.begin(), a.end(), 0.0) / n;
    const double mb = std::accumulate(b.begin(), b.end(), 0.0) / n;
    double sab = 0, saa = 0, sbb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        sab += (a[i] - ma) * (b[i] - mb);
        saa += (a[i] - ma) * (a[i] - ma);
        sbb += (b[i] - mb) * (b[i] - mb);
    }
    if (!(saa > 0) || !(sbb > 0)) {
        throw std::invalid_argument("pearson: constant input");
    }
    return std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0);
}

/**
 * Pearson correlation used as a prediction score: 0 when either vector is constant
 * (a null-state prediction carries no direction).
 */
inline double prediction_pearson(std::span<const double> predicted, std::span<const double> truth) {
    if (predicted.size() != truth.size() || predicted.empty()) {
        throw std::invalid_argument("prediction_pearson: inputs must have equal nonzero length");
    }
    auto constant = [](std::span<const double> v) { return std::all_of(v.begin(), v.end(), [&](double x) { return x == v.front(); }); };
    if (constant(predicted) || constant(truth)) {
        return 0.0;
    }
    return pearson(predicted, truth);
}

/**
 * Average ranks (1-based), ties sharing the mean rank.
 */
inline std::vector<double> ranks(std::span<const double> x) {
    std::vector<std::size_t> order(x.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
    std::vector<double> out(x.size());
    std::size_t i = 0;
    while (i < order.size()) {
        std::size_t j = i;
        while (j + 1 < order.size() && x[order[j + 1]] == x[order[i]]) {
            ++j;
        }
        const double r = 0.5 * static_cast<double>(i + j) + 1;
        for (std::size_t k = i; k <= j; ++k) {
            out[order[k]] = r;
        }
        i = j + 1;
    }
    return out;
}

inline double spearman(std::span<const double> a, std::span<const double> b) {
    const auto ra = ranks(a);
    const auto rb = ranks(b);
    return pearson(ra, rb);
}

/**
 * Fraction of entries where prediction and truth share a sign; zeros only match zeros.
 */
inline double directional_accuracy(std::span<const double> pred, std::span<const double> truth) {
    if (pred.size() != truth.size() || pred.empty()) {
        throw std::invalid_argument("directional_accuracy: inputs must have equal nonzero length");
    }
    auto sign = [](double v) { return (v > 0) - (v < 0); };
    std::size_t hits = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        hits += sign(pred[i]) == sign(truth[i]);
    }
    return static_cast<double>(hits) / static_cast<double>(pred.size());
}

/**
 * Fraction of samples whose confidence quantile bucket equals their accuracy quantile bucket.
 * Bucket of the sample with 0-based rank `r` is `floor(r * buckets / n)`; ties keep input order.
 */
inline double percentile_bucket_accuracy(std::span<const double> confidence, std::span<const double> accuracy, int buckets = 5) {
    const auto n = confidence.size();
    if (accuracy.size() != n) {
        throw std::invalid_argument("percentile_bucket_accuracy: length mismatch");
    }
    if (buckets < 1 || n < static_cast<std::size_t>(buckets)) {
        throw std::invalid_argument("percentile_bucket_accuracy: need at least as many samples as buckets");
    }
    auto bucket_of = [&](std::span<const double> x) {
        std::vector<std::size_t> order(n);
        std::iota(order.begin(), order.end(), 0);
        std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
        std::vector<std::size_t> out(n);
        for (std::size_t r = 0; r < n; ++r) {
            out[order[r]] = r * static_cast<std::size_t>(buckets) / n;
        }
        return out;
    };
    const auto bc = bucket_of(confidence);
    const auto ba = bucket_of(accuracy);
    std::size_t agree = 0;
    for (std::size_t i = 0; i < n; ++i) {
        agree += bc[i] == ba[i];
    }
    return static_cast<double>(agree) / static_cast<double>(n);
}

/**
 * Expected calibration error over equal-width bins on `[0, 1]`; inputs must already be rescaled to `[0, 1]`.
 */
inline double ece(std::span<const double> confidence, std::span<const double> accuracy, int bins = 10) {
    if (confidence.empty() || confidence.size() != accuracy.size()) {
        throw std::invalid_argument("ece: inputs must have equal nonzero length");
    }
    std::vector<double> sum_conf(bins, 0.0), sum_acc(bins, 0.0);
    std::vector<std::size_t> count(bins, 0);
    for (std::size_t i = 0; i < confidence.size(); ++i) {
        const double c = std::clamp(confidence[i], 0.0, 1.0);
        const int b = std::min(bins - 1, static_cast<int>(c * bins));
        sum_conf[b] += c;
        sum_acc[b] += accuracy[i];
        ++count[b];
    }
    double out = 0;
    const double n = static_cast<double>(confidence.size());
    for (int b = 0; b < bins; ++b) {
        if (count[b] == 0) {
            continue;
        }
        const double k = static_cast<double>(count[b]);
        out += k / n * std::abs(sum_conf[b] / k - sum_acc[b] / k);
    }
    return out;
}

/**
 * One evaluated perturbation category.
 */
struct PredictionRecord {
    std::string key;

    /** Predicted and true gene-space log fold change. */
    std::vector<double> predicted;
    std::vector<double> truth;

    /** Pseudo E-distance. */
    double confidence = 0;

    double nu_tilde = 0;
    double h_tilde = 0;

    /** Top differentially expressed genes of the truth. */
    std::vector<std::size_t> degs;

    /** Number of unseen components, or -1. */
    int tier = -1;

    /** Raw reference E-distance, NaN when unknown. */
    double reference_e = std::numeric_limits<double>::quiet_NaN();
};

struct AccuracyMetrics {
    /** Mean Pearson correlation of predicted vs true logFC over all genes. */
    double pearson = 0;

    /** Mean directional accuracy over all genes. */
    double directional = 0;

    double pearson_deg = 0;
    double directional_deg = 0;
};

namespace detail {

inline std::vector<double> gather(const std::vector<double>& v, const std::vector<std::size_t>& idx) {
    std::vector<double> out;
    out.reserve(idx.size());
    for (auto i : idx) {
        out.push_back(v.at(i));
    }
    return out;
}

}

/** Pearson accuracy of a single record over all genes. */
inline double record_accuracy(const PredictionRecord& r) {
    return prediction_pearson(r.predicted, r.truth);
}

inline AccuracyMetrics accuracy_metrics(std::span<const PredictionRecord> records) {
    AccuracyMetrics out;
    if (records.empty()) {
        throw std::invalid_argument("accuracy_metrics: no records");
    }
    std::size_t deg_count = 0;
    for (const auto& r : records) {
        out.pearson += prediction_pearson(r.predicted, r.truth);
        out.directional += directional_accuracy(r.predicted, r.truth);
        if (r.degs.size() >= 2) {
            const auto p = detail::gather(r.predicted, r.degs);
            const auto t = detail::gather(r.truth, r.degs);
            out.pearson_deg += prediction_pearson(p, t);
            out.directional_deg += directional_accuracy(p, t);
            ++deg_count;
        }
    }
    const double n = static_cast<double>(records.size());
    out.pearson /= n;
    out.directional /= n;
    if (deg_count) {
        out.pearson_deg /= static_cast<double>(deg_count);
        out.directional_deg /= static_cast<double>(deg_count);
    }
    return out;
}

struct CalibrationBin {
    double lower = 0;
    double upper = 0;
    double mean_confidence = 0;
    double mean_accuracy = 0;
    std::size_t count = 0;
};

struct CalibrationReport {
    double r_perf_conf = 0;
    double rs_perf_conf = 0;
    double acc_perf_conf = 0;
    double ece = 0;
    std::vector<CalibrationBin> bins;
};

/**
 * Calibration of confidence against per-record Pearson accuracy.
 * The curve bins records by confidence percentile; ECE rescales confidence by `1/(3N)` and accuracy by `(r+1)/2`.
 */
inline CalibrationReport calibration_curve(std::span<const PredictionRecord> records, int bins, int dim) {
    const auto n = records.size();
    if (bins < 1 || n < static_cast<std::size_t>(bins)) {
        throw std::invalid_argument("calibration_curve: need at least as many records as bins");
    }
    std::vector<double> conf(n), acc(n), conf01(n), acc01(n);
    for (std::size_t i = 0; i < n; ++i) {
        conf[i] = records[i].confidence;
        acc[i] = record_accuracy(records[i]);
        conf01[i] = conf[i] / (3.0 * dim);
        acc01[i] = (acc[i] + 1) / 2;
    }
    CalibrationReport out;
    // constant confidence (collapsed model) scores as uncorrelated
    out.r_perf_conf = prediction_pearson(conf, acc);
    out.rs_perf_conf = prediction_pearson(ranks(conf), ranks(acc));
    out.acc_perf_conf = percentile_bucket_accuracy(conf, acc, std::min<int>(5, static_cast<int>(n)));
    out.ece = ece(conf01, acc01);

    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return conf[a] < conf[b]; });
    for (int b = 0; b < bins; ++b) {
        const auto lo = static_cast<std::size_t>(b) * n / static_cast<std::size_t>(bins);
        const auto hi = static_cast<std::size_t>(b + 1) * n / static_cast<std::size_t>(bins);
        CalibrationBin bin;
        bin.lower = conf[order[lo]];
        bin.upper = conf[order[hi - 1]];
        for (auto k = lo; k < hi; ++k) {
            bin.mean_confidence += conf[order[k]];
            bin.mean_accuracy += acc[order[k]];
        }
        bin.count = hi - lo;
        bin.mean_confidence /= static_cast<double>(bin.count);
        bin.mean_accuracy /= static_cast<double>(bin.count);
        out.bins.push_back(bin);
    }
    return out;
}

struct FilterResult {
    std::vector<PredictionRecord> retained;
    std::size_t dropped = 0;

    /** Keys of the dropped records, least confident first. */
    std::vector<std::string> dropped_keys;
    AccuracyMetrics before;
    AccuracyMetrics after;

    AccuracyMetrics delta() const {
        return { after.pearson - before.pearson, after.directional - before.directional, after.pearson_deg - before.pearson_deg, after.directional_deg - before.directional_deg };
    }
};

namespace detail {

inline void check_fraction(double fraction) {
    if (!(fraction >= 0 && fraction <= 0.5)) {
        throw std::invalid_argument("filter fraction must lie in [0, 0.5]");
    }
}

inline std::size_t drop_count(std::size_t n, double fraction) {
    // guard against 0.1 * 20 evaluating just below 2
    return static_cast<std::size_t>(std::floor(fraction * static_cast<double>(n) + 1e-9));
}

}

/**
 * Drops the `floor(fraction n)` least confident records (ties: earlier records dropped first) and recomputes the metrics.
 */
inline FilterResult filter_bottom(std::span<const PredictionRecord> records, double fraction) {
    detail::check_fraction(fraction);
    const auto n = records.size();
    const auto k = detail::drop_count(n, fraction);
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return records[a].confidence < records[b].confidence; });
    std::vector<bool> drop(n, false);
    FilterResult out;
    for (std::size_t i = 0; i < k; ++i) {
        drop[order[i]] = true;
        out.dropped_keys.push_back(records[order[i]].key);
    }
    out.dropped = k;
    for (std::size_t i = 0; i < n; ++i) {
        if (!drop[i]) {
            out.retained.push_back(records[i]);
        }
    }
    out.before = accuracy_metrics(records);
    out.after = accuracy_metrics(out.retained);
    return out;
}

struct RandomFilterSummary {
    AccuracyMetrics mean;
    AccuracyMetrics sd;
    std::vector<AccuracyMetrics> repeats;
};

/**
 * Repeats a uniformly random drop of `floor(fraction n)` records; sample standard deviation over repeats.
 */
inline RandomFilterSummary random_filter_baseline(std::span<const PredictionRecord> records, double fraction, int repeats, std::uint64_t seed) {
    detail::check_fraction(fraction);
    if (repeats < 1) {
        throw std::invalid_argument("random_filter_baseline: repeats must be positive");
    }
    const auto n = records.size();
    const auto k = detail::drop_count(n, fraction);
    Rng rng(derive_seed(seed, "random-filter"));
    RandomFilterSummary out;
    for (int r = 0; r < repeats; ++r) {
        auto dropped = rng.sample(n, k);
        std::vector<bool> drop(n, false);
        for (auto d : dropped) {
            drop[d] = true;
        }
        std::vector<PredictionRecord> kept;
        for (std::size_t i = 0; i < n; ++i) {
            if (!drop[i]) {
                kept.push_back(records[i]);
            }
        }
        out.repeats.push_back(accuracy_metrics(kept));
    }
    auto fields = [](AccuracyMetrics& m) { return std::array<double*, 4>{ &m.pearson, &m.directional, &m.pearson_deg, &m.directional_deg }; };
    auto mean_f = fields(out.mean);
    auto sd_f = fields(out.sd);
    for (auto& m : out.repeats) {
        auto f = fields(m);
        for (int j = 0; j < 4; ++j) {
            *mean_f[j] += *f[j] / repeats;
        }
    }
    if (repeats > 1) {
        for (auto& m : out.repeats) {
            auto f = fields(m);
            for (int j = 0; j < 4; ++j) {
                *sd_f[j] += (*f[j] - *mean_f[j]) * (*f[j] - *mean_f[j]) / (repeats - 1);
            }
        }
        for (int j = 0; j < 4; ++j) {
            *sd_f[j] = std::sqrt(*sd_f[j]);
        }
    }
    return out;
}

struct TierSummary {
    int tier = 0;
    std::size_t count = 0;
    double mean_nu_tilde = 0;
    double mean_confidence = 0;
    double mean_reference_e = 0;
    double mean_accuracy = 0;
};

/**
 * Per-tier means for tiers 0, 1 and 2.
 *
 * @throws std::invalid_argument if any tier has no records.
 */
inline std::vector<TierSummary> difficulty_report(std::span<const PredictionRecord> records) {
    std::vector<TierSummary> out(3);
    for (int t = 0; t < 3; ++t) {
        out[t].tier = t;
    }
    for (const auto& r : records) {
        if (r.tier < 0 || r.tier > 2) {
            continue;
        }
        auto& s = out[r.tier];
        ++s.count;
        s.mean_nu_tilde += r.nu_tilde;
        s.mean_confidence += r.confidence;
        s.mean_reference_e += r.reference_e;
        s.mean_accuracy += record_accuracy(r);
    }
    for (auto& s : out) {
        if (s.count == 0) {
            throw std::invalid_argument("difficulty_report: tier " + std::to_string(s.tier) + " has no records");
        }
        const double k = static_cast<double>(s.count);
        s.mean_nu_tilde /= k;
        s.mean_confidence /= k;
        s.mean_reference_e /= k;
        s.mean_accuracy /= k;
    }
    return out;
}

}

#endif
