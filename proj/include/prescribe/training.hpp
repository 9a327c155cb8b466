#ifndef PRESCRIBE_TRAINING_HPP
#define PRESCRIBE_TRAINING_HPP

#include "autodiff.hpp"
#include "data.hpp"
#include "eval.hpp"
#include "loss.hpp"
#include "network.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace prescribe {

/**
 * Raised when training diverges or produces a non-finite gradient.
 */
class NumericalError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/**
 * Optimizer and schedule settings.
 */
struct TrainConfig {
    double lr = 1e-4;
    double weight_decay = 1e-5;

    /** Target cell count per micro-batch; whole categories are added until it is reached. */
    std::size_t batch_cells = 4096;

    int grad_accum = 4;
    int epochs = 50;
    int patience = 3;
    int warmup_epochs = 5;
    double warmup_lr = 1e-3;
    double plateau_factor = 0.99;
    int plateau_patience = 2;
    double plateau_threshold = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    LossOptions loss;
    std::uint64_t seed = 42;
};

/**
 * Adam with L2 weight decay added to the gradient.
 */
class Adam {
public:
    explicit Adam(std::size_t size) : m_(size, 0.0), v_(size, 0.0) {}

    void step(std::vector<double>& params, const std::vector<double>& grad, double lr, const TrainConfig& cfg) {
        ++t_;
        const double c1 = 1 - std::pow(cfg.beta1, static_cast<double>(t_));
        const double c2 = 1 - std::pow(cfg.beta2, static_cast<double>(t_));
        for (std::size_t i = 0; i < params.size(); ++i) {
            const double g = grad[i] + cfg.weight_decay * params[i];
            m_[i] = cfg.beta1 * m_[i] + (1 - cfg.beta1) * g;
            v_[i] = cfg.beta2 * v_[i] + (1 - cfg.beta2) * g * g;
            params[i] -= lr * (m_[i] / c1) / (std::sqrt(v_[i] / c2) + cfg.adam_eps);
        }
    }

    long steps() const { return t_; }

private:
    std::vector<double> m_;
    std::vector<double> v_;
    long t_ = 0;
};

/**
 * Reduces the learning rate after `patience` consecutive evaluations without a relative improvement above `threshold`.
 */
class PlateauScheduler {
public:
    PlateauScheduler(double factor, int patience, double threshold) : factor_(factor), patience_(patience), threshold_(threshold) {}

    /** Returns the learning rate to use after observing `metric` (lower is better). */
    double observe(double metric, double lr) {
        if (!std::isfinite(best_) || metric < best_ - threshold_ * std::abs(best_)) {
            best_ = metric;
            bad_ = 0;
            return lr;
        }
        if (++bad_ >= patience_) {
            bad_ = 0;
            return lr * factor_;
        }
        return lr;
    }

private:
    double factor_;
    int patience_;
    double threshold_;
    double best_ = std::numeric_limits<double>::infinity();
    int bad_ = 0;
};

/** Name and index of the tensor that owns flat parameter `index`. */
inline std::string parameter_path(const Layout& layout, std::size_t index) {
    for (const auto& t : layout.tensors) {
        if (index >= t.offset && index < t.offset + t.size()) {
            return t.name + "[" + std::to_string(index - t.offset) + "]";
        }
    }
    return "param[" + std::to_string(index) + "]";
}

struct LossGradient {
    LossBreakdown<double> loss;
    std::vector<double> grad;
};

namespace detail {

inline LossBreakdown<double> values(const LossBreakdown<ad::Var>& b) {
    LossBreakdown<double> out;
    out.l1 = b.l1.value();
    out.l2 = b.l2.value();
    out.l3 = b.l3.value();
    out.l4 = b.l4.value();
    out.total = b.total.value();
    out.lambda1 = b.lambda1;
    out.lambda2 = b.lambda2;
    out.lambda3 = b.lambda3;
    return out;
}

}

/**
 * Loss and its gradient with respect to `params` over one batch.
 */
inline LossGradient loss_and_gradient(std::span<const CategoryTarget* const> batch, const ModelState& state, std::span<const double> params, const LossOptions& options) {
    ad::Tape tape;
    ad::TapeScope scope(tape);
    std::vector<ad::Var> vars(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
        vars[i] = ad::Var::variable(params[i]);
    }
    const auto loss = loss_total<ad::Var>(batch, state, std::span<const ad::Var>(vars), options);
    LossGradient out;
    out.loss = detail::values(loss);
    out.grad.assign(params.size(), 0.0);
    if (!std::isfinite(out.loss.total)) {
        return out;
    }
    const auto adj = tape.adjoints(loss.total.index());
    for (std::size_t i = 0; i < params.size(); ++i) {
        out.grad[i] = adj[vars[i].index()];
    }
    return out;
}

/**
 * Everything derived from a dataset before training: model state, reference E-distances and per-split targets.
 */
struct Prepared {
    ModelState state;
    ReferenceE reference;
    std::vector<CategoryTarget> train;
    std::vector<CategoryTarget> val;
    std::vector<CategoryTarget> test;
};

inline std::vector<const CategoryTarget*> pointers(const std::vector<CategoryTarget>& targets) {
    std::vector<const CategoryTarget*> out;
    for (const auto& t : targets) {
        out.push_back(&t);
    }
    return out;
}

/**
 * Band map over predictive entropies of `targets` under the current parameters.
 * A degenerate range is widened slightly so the map stays defined.
 */
inline BandMap fit_entropy_band(const ModelState& state, const std::vector<CategoryTarget>& targets) {
    if (targets.empty()) {
        throw std::invalid_argument("fit_entropy_band: no targets");
    }
    std::span<const double> params(state.params);
    const auto control = encode_control(std::span<const double>(state.control_profile), state.layout, params, state.config.leaky_slope);
    ModelState probe = state;
    probe.entropy_band = BandMap{ -1e300, 1e300, state.dim() };
    std::vector<double> entropies;
    for (const auto& t : targets) {
        entropies.push_back(forward(t.ids, control, probe, params).entropy);
    }
    const auto [lo, hi] = std::minmax_element(entropies.begin(), entropies.end());
    if (!(*hi - *lo > 1e-12 * (1 + std::abs(*hi)))) {
        const double pad = 1e-6 * (1 + std::abs(*hi));
        return BandMap{ *lo - pad, *hi + pad, state.dim() };
    }
    return BandMap::fit(entropies, state.dim());
}

/**
 * Builds the model state for `data`: PCA on training and control cells, control prior, reference band,
 * initial parameters and an entropy band fitted on the training categories.
 *
 * @throws DataError if the dataset lacks required splits.
 */
inline Prepared prepare(const PerturbationDataset& data, const ModelConfig& config, std::uint64_t seed) {
    data.validate();
    if (config.pca_dim < 1 || config.latent_dim < 1 || config.hidden_dim < 1 || config.flow_layers < 0) {
        throw std::invalid_argument("model config: dimensions must be positive");
    }
    Prepared out;
    auto& s = out.state;
    s.config = config;
    s.pca = fit_dataset_pca(data, static_cast<std::size_t>(config.pca_dim));
    out.reference = precompute_reference_e(data, s.pca, derive_seed(seed, "reference-e"), config.pca_dim);
    s.reference_band = out.reference.band;
    s.prior = control_prior(data, s.pca, config.nu_prior, config.kappa_prior);
    s.control_profile = control_mean(data);
    if (data.embeddings.width() == 0) {
        std::vector<std::string> ids;
        for (const auto& [key, split] : data.splits) {
            for (auto& id : split_key(key)) {
                ids.push_back(id);
            }
        }
        std::sort(ids.begin(), ids.end());
        ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
        s.embeddings = EmbeddingTable::random(ids, 64, derive_seed(seed, "embeddings"));
    } else {
        s.embeddings = data.embeddings;
    }
    s.layout = make_layout(config, data.genes.size(), s.embeddings.width());
    s.params = initialize_params(config, s.layout, s.prior, seed);

    out.train = make_targets(data, Split::train, s.pca, &out.reference);
    out.val = make_targets(data, Split::val, s.pca, &out.reference);
    out.test = make_targets(data, Split::test, s.pca, &out.reference);
    if (out.train.empty()) {
        throw DataError("dataset has no training categories");
    }
    s.entropy_band = fit_entropy_band(s, out.train);
    return out;
}

/**
 * Cell-weighted loss over `targets` evaluated one category at a time (no ranking term).
 */
inline LossBreakdown<double> evaluate_loss(const ModelState& state, const std::vector<CategoryTarget>& targets, const LossOptions& options) {
    LossBreakdown<double> out;
    out.lambda1 = options.weights.lambda1;
    out.lambda2 = options.weights.lambda2;
    out.lambda3 = options.weights.lambda3;
    double cells = 0;
    for (const auto& t : targets) {
        cells += static_cast<double>(t.count());
    }
    std::span<const double> params(state.params);
    for (const auto& t : targets) {
        const CategoryTarget* one[] = { &t };
        const auto b = loss_total<double>(std::span<const CategoryTarget* const>(one), state, params, options);
        const double w = static_cast<double>(t.count()) / cells;
        out.l1 += w * b.l1;
        out.l2 += w * b.l2;
        out.l4 += w * b.l4;
    }
    out.total = -out.l1 - options.weights.lambda1 * out.l2 - options.weights.lambda3 * out.l4;
    return out;
}

/**
 * Forward pass and gene-space truth for every category of a split.
 */
inline std::vector<PredictionRecord> predict_records(const ModelState& state, const PerturbationDataset& data, Split split, const ReferenceE* reference = nullptr, std::size_t n_degs = 20) {
    const auto index = data.index();
    const auto ctrl = control_mean(data);
    std::span<const double> params(state.params);
    const auto control = encode_control(std::span<const double>(state.control_profile), state.layout, params, state.config.leaky_slope);
    std::vector<PredictionRecord> out;
    for (const auto& key : data.categories(split)) {
        const auto fwd = forward(split_key(key), control, state, params);
        PredictionRecord r;
        r.key = key;
        r.predicted = predicted_logfc(fwd, state);
        r.truth = mean_logfc(data, index.at(key), ctrl);
        r.confidence = fwd.pseudo_e;
        r.nu_tilde = fwd.nu_tilde;
        r.h_tilde = fwd.h_tilde;
        r.degs = select_degs(data, key, std::min(n_degs, data.genes.size()));
        if (auto t = data.tiers.find(key); t != data.tiers.end()) {
            r.tier = t->second;
        }
        if (reference) {
            if (auto e = reference->stats.find(key); e != reference->stats.end()) {
                r.reference_e = e->second.e;
            }
        }
        out.push_back(std::move(r));
    }
    return out;
}

/**
 * One line of the training log.
 */
struct EpochRecord {
    int epoch = 0;
    double lr = 0;
    int steps = 0;

    /** Cell-weighted means over the epoch's training micro-batches. */
    LossBreakdown<double> train;

    LossBreakdown<double> val;

    /** `-val.l1`, the early-stopping metric. */
    double val_loss = 0;

    /** Spearman(pseudo E, per-category Pearson accuracy) on validation, when evaluated. */
    std::optional<double> val_calibration;

    std::optional<double> val_pearson;
    bool improved = false;
};

struct TrainResult {
    ModelState best;
    int best_epoch = -1;
    double best_val_loss = std::numeric_limits<double>::infinity();
    std::vector<EpochRecord> history;
    bool early_stopped = false;
};

/**
 * Micro-batches of whole categories in shuffled order, each filled until it holds at least `batch_cells` cells.
 */
inline std::vector<std::vector<const CategoryTarget*>> make_batches(const std::vector<CategoryTarget>& targets, std::size_t batch_cells, Rng& rng) {
    std::vector<std::size_t> order(targets.size());
    std::iota(order.begin(), order.end(), 0);
    rng.shuffle(order);
    std::vector<std::vector<const CategoryTarget*>> out;
    std::vector<const CategoryTarget*> current;
    std::size_t cells = 0;
    for (auto i : order) {
        current.push_back(&targets[i]);
        cells += targets[i].count();
        if (cells >= batch_cells) {
            out.push_back(std::move(current));
            current.clear();
            cells = 0;
        }
    }
    if (!current.empty()) {
        out.push_back(std::move(current));
    }
    return out;
}

/**
 * Trains from `prepared.state` and returns the state with the best validation loss.
 * `data`, when given, enables the per-epoch calibration snapshot on the validation split.
 *
 * @throws NumericalError on two consecutive non-finite batch losses or a non-finite gradient.
 */
inline TrainResult train(const Prepared& prepared, const TrainConfig& cfg, const std::function<void(const EpochRecord&)>& on_epoch = {}, const PerturbationDataset* data = nullptr) {
    if (cfg.grad_accum < 1 || cfg.batch_cells < 1 || cfg.epochs < 0 || cfg.patience < 1) {
        throw std::invalid_argument("train config: grad_accum, batch, patience must be positive and epochs non-negative");
    }
    const auto& val_targets = prepared.val.empty() ? prepared.train : prepared.val;
    ModelState state = prepared.state;
    Adam adam(state.params.size());
    PlateauScheduler plateau(cfg.plateau_factor, cfg.plateau_patience, cfg.plateau_threshold);
    Rng rng(derive_seed(cfg.seed, "batches"));

    TrainResult result;
    result.best = state;
    double lr = cfg.lr;
    int stale = 0;
    int nonfinite = 0;

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        const bool warm = epoch < cfg.warmup_epochs;
        const double step_lr = warm ? cfg.warmup_lr : lr;
        EpochRecord rec;
        rec.epoch = epoch;
        rec.lr = step_lr;

        const auto batches = make_batches(prepared.train, cfg.batch_cells, rng);
        std::vector<double> acc(state.params.size(), 0.0);
        int micro = 0;
        double seen_cells = 0;
        for (std::size_t b = 0; b < batches.size(); ++b) {
            const auto& batch = batches[b];
            auto lg = loss_and_gradient(batch, state, state.params, cfg.loss);
            if (!std::isfinite(lg.loss.total)) {
                if (++nonfinite >= 2) {
                    throw NumericalError("training diverged: non-finite loss on two consecutive batches (epoch " + std::to_string(epoch) + ")");
                }
            } else {
                nonfinite = 0;
                for (std::size_t i = 0; i < lg.grad.size(); ++i) {
                    if (!std::isfinite(lg.grad[i])) {
                        throw NumericalError("non-finite gradient in " + parameter_path(state.layout, i));
                    }
                    acc[i] += lg.grad[i];
                }
                double cells = 0;
                for (const auto* t : batch) {
                    cells += static_cast<double>(t->count());
                }
                rec.train.l1 += cells * lg.loss.l1;
                rec.train.l2 += cells * lg.loss.l2;
                rec.train.l3 += cells * lg.loss.l3;
                rec.train.l4 += cells * lg.loss.l4;
                rec.train.total += cells * lg.loss.total;
                seen_cells += cells;
                ++micro;
            }
            const bool last = b + 1 == batches.size();
            if (micro > 0 && (micro == cfg.grad_accum || last)) {
                for (auto& g : acc) {
                    g /= micro;
                }
                adam.step(state.params, acc, step_lr, cfg);
                std::fill(acc.begin(), acc.end(), 0.0);
                micro = 0;
                ++rec.steps;
            }
        }
        if (seen_cells > 0) {
            for (double* v : { &rec.train.l1, &rec.train.l2, &rec.train.l3, &rec.train.l4, &rec.train.total }) {
                *v /= seen_cells;
            }
        }
        rec.train.lambda1 = cfg.loss.weights.lambda1;
        rec.train.lambda2 = cfg.loss.weights.lambda2;
        rec.train.lambda3 = cfg.loss.weights.lambda3;

        state.entropy_band = fit_entropy_band(state, prepared.train);
        rec.val = evaluate_loss(state, val_targets, cfg.loss);
        rec.val_loss = -rec.val.l1;
        if (!std::isfinite(rec.val_loss)) {
            throw NumericalError("non-finite validation loss at epoch " + std::to_string(epoch));
        }
        if (data && !prepared.val.empty() && prepared.val.size() >= 3) {
            // constant predictions (null state) have no defined correlation; the snapshot is skipped then
            try {
                const auto records = predict_records(state, *data, Split::val);
                std::vector<double> conf, acc_r;
                for (const auto& r : records) {
                    conf.push_back(r.confidence);
                    acc_r.push_back(record_accuracy(r));
                }
                rec.val_pearson = accuracy_metrics(records).pearson;
                rec.val_calibration = spearman(conf, acc_r);
            } catch (const std::invalid_argument&) {
            }
        }

        if (rec.val_loss < result.best_val_loss) {
            result.best_val_loss = rec.val_loss;
            result.best = state;
            result.best_epoch = epoch;
            rec.improved = true;
            stale = 0;
        } else {
            ++stale;
        }
        if (!warm) {
            lr = plateau.observe(rec.val_loss, lr);
        }
        result.history.push_back(rec);
        if (on_epoch) {
            on_epoch(rec);
        }
        if (stale >= cfg.patience && epoch + 1 >= cfg.warmup_epochs) {
            result.early_stopped = true;
            break;
        }
    }
    return result;
}

/**
 * Hyperparameter grids for the two-phase search.
 */
struct SweepGrid {
    std::vector<double> lambda2{ 0.01, 0.1, 1.0 };
    std::vector<double> lambda1{ 1e-9, 1e-8, 1e-7, 1e-6, 1e-5, 1e-4 };
    std::vector<double> lambda3{ 1e-7, 1e-6, 1e-5, 1e-4, 1e-3, 1e-2 };

    /** Phase-2 value of lambda3. */
    double fixed_lambda3 = 1e-5;
};

struct SweepTrial {
    int phase = 1;
    LossWeights weights;
    int best_epoch = -1;
    double val_loss = 0;
    double pearson = 0;
    double directional = 0;
    double calibration = 0;
};

/**
 * Trial weights of the two-phase search. Phase 1 crosses lambda2 with lambda3 (lambda1 from `base`);
 * phase 2 scans lambda1 with `best_lambda2` and lambda3 fixed.
 */
inline std::vector<LossWeights> phase1_weights(const SweepGrid& grid, const LossWeights& base) {
    std::vector<LossWeights> out;
    for (double l2 : grid.lambda2) {
        for (double l3 : grid.lambda3) {
            out.push_back(LossWeights{ base.lambda1, l2, l3 });
        }
    }
    return out;
}

inline std::vector<LossWeights> phase2_weights(const SweepGrid& grid, double best_lambda2) {
    std::vector<LossWeights> out;
    for (double l1 : grid.lambda1) {
        out.push_back(LossWeights{ l1, best_lambda2, grid.fixed_lambda3 });
    }
    return out;
}

/** Total number of trials the search runs. */
inline std::size_t sweep_trial_count(const SweepGrid& grid) {
    return grid.lambda2.size() * grid.lambda3.size() + grid.lambda1.size();
}

/**
 * Two-phase search scored on the validation split. Phase 1 picks lambda2 by the best mean validation Pearson accuracy.
 * `on_trial` is called after every trial.
 */
inline std::vector<SweepTrial> sweep(const PerturbationDataset& data, const Prepared& prepared, const TrainConfig& base, const SweepGrid& grid, const std::function<void(const SweepTrial&)>& on_trial = {}) {
    if (grid.lambda2.empty() || grid.lambda1.empty() || grid.lambda3.empty()) {
        throw std::invalid_argument("sweep: every grid needs at least one value");
    }
    if (prepared.val.size() < 2) {
        throw DataError("sweep: need at least two validation categories");
    }
    std::vector<SweepTrial> out;
    auto run = [&](int phase, const LossWeights& w) {
        TrainConfig cfg = base;
        cfg.loss.weights = w;
        const auto res = train(prepared, cfg);
        const auto records = predict_records(res.best, data, Split::val);
        const auto metrics = accuracy_metrics(records);
        std::vector<double> conf, acc;
        for (const auto& r : records) {
            conf.push_back(r.confidence);
            acc.push_back(record_accuracy(r));
        }
        SweepTrial t;
        t.phase = phase;
        t.weights = w;
        t.best_epoch = res.best_epoch;
        t.val_loss = res.best_val_loss;
        t.pearson = metrics.pearson;
        t.directional = metrics.directional;
        try {
            t.calibration = spearman(conf, acc);
        } catch (const std::invalid_argument&) {
            t.calibration = std::numeric_limits<double>::quiet_NaN();
        }
        out.push_back(t);
        if (on_trial) {
            on_trial(t);
        }
    };
    for (const auto& w : phase1_weights(grid, base.loss.weights)) {
        run(1, w);
    }
    double best_lambda2 = out.front().weights.lambda2;
    double best_score = -std::numeric_limits<double>::infinity();
    for (const auto& t : out) {
        if (t.pearson > best_score) {
            best_score = t.pearson;
            best_lambda2 = t.weights.lambda2;
        }
    }
    for (const auto& w : phase2_weights(grid, best_lambda2)) {
        run(2, w);
    }
    return out;
}

}

#endif
