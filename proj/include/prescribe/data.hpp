#ifndef PRESCRIBE_DATA_HPP
#define PRESCRIBE_DATA_HPP

#include "edistance.hpp"
#include "loss.hpp"
#include "matrix.hpp"
#include "network.hpp"
#include "pca.hpp"
#include "random.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

/**
 * @file data.hpp
 * @brief Perturbation datasets: synthetic generation, preprocessing and reference statistics.
 */

namespace prescribe {

/**
 * Thrown for malformed or inconsistent datasets.
 */
class DataError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

enum class Split { train, val, test, control };

inline std::string to_string(Split s) {
    switch (s) {
        case Split::train: return "train";
        case Split::val: return "val";
        case Split::test: return "test";
        case Split::control: return "control";
    }
    return "unknown";
}

inline Split parse_split(const std::string& s) {
    if (s == "train") return Split::train;
    if (s == "val") return Split::val;
    if (s == "test") return Split::test;
    if (s == "control") return Split::control;
    throw DataError("unknown split '" + s + "'");
}

/**
 * Canonical category key: ids sorted and joined by '+'. The empty set is the control key "".
 */
inline std::string category_key(std::vector<std::string> ids) {
    std::sort(ids.begin(), ids.end());
    std::string out;
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (i) {
            out += '+';
        }
        out += ids[i];
    }
    return out;
}

inline std::vector<std::string> split_key(const std::string& key) {
    std::vector<std::string> out;
    if (key.empty()) {
        return out;
    }
    std::size_t start = 0;
    while (true) {
        const auto pos = key.find('+', start);
        out.push_back(key.substr(start, pos - start));
        if (pos == std::string::npos) {
            break;
        }
        start = pos + 1;
    }
    return out;
}

/**
 * Cells with perturbation labels, split assignment per category, and optional side information.
 */
struct PerturbationDataset {
    std::vector<std::string> genes;
    std::vector<std::string> cell_ids;

    /** Log-normalized expression, cells x genes. */
    Matrix<double> expressions;

    /** Perturbation ids per cell; empty for controls. */
    std::vector<std::vector<std::string>> labels;

    /** Split per category key. */
    std::map<std::string, Split> splits;

    /** Difficulty tier (number of unseen components) per held-out category, when known. */
    std::map<std::string, int> tiers;

    EmbeddingTable embeddings;

    /** Free-form key/value metadata, including seeds. */
    std::map<std::string, std::string> meta;

    /** Category key -> row indices. */
    std::map<std::string, std::vector<std::size_t>> index() const {
        std::map<std::string, std::vector<std::size_t>> out;
        for (std::size_t c = 0; c < labels.size(); ++c) {
            out[category_key(labels[c])].push_back(c);
        }
        return out;
    }

    std::vector<std::string> categories(Split split) const {
        std::vector<std::string> out;
        for (const auto& [key, s] : splits) {
            if (s == split) {
                out.push_back(key);
            }
        }
        return out;
    }

    Matrix<double> rows(const std::vector<std::size_t>& idx) const {
        Matrix<double> out(idx.size(), expressions.cols());
        for (std::size_t i = 0; i < idx.size(); ++i) {
            const auto r = expressions.row(idx[i]);
            std::copy(r.begin(), r.end(), out.row(i).begin());
        }
        return out;
    }

    /**
     * @throws DataError if labels, splits and matrix shapes disagree.
     */
    void validate() const {
        if (expressions.rows() != labels.size() || cell_ids.size() != labels.size()) {
            throw DataError("dataset: cell count mismatch between expressions, ids and labels");
        }
        if (expressions.cols() != genes.size()) {
            throw DataError("dataset: gene count mismatch");
        }
        bool has_control = false;
        for (const auto& l : labels) {
            if (l.empty()) {
                has_control = true;
                continue;
            }
            if (!splits.count(category_key(l))) {
                throw DataError("dataset: category " + category_key(l) + " has no split");
            }
        }
        if (!has_control) {
            throw DataError("dataset: no control cells");
        }
        for (double v : expressions.data()) {
            if (!std::isfinite(v)) {
                throw DataError("dataset: non-finite expression value");
            }
        }
    }
};

/**
 * Per-cell scaling to a library size of 1e4 followed by `ln(1 + x)`.
 */
inline Matrix<double> lognormalize(const Matrix<double>& raw, double library_size = 1e4) {
    Matrix<double> out(raw.rows(), raw.cols());
    for (std::size_t c = 0; c < raw.rows(); ++c) {
        double total = 0;
        for (double v : raw.row(c)) {
            if (v < 0) {
                throw DataError("lognormalize: negative count in cell " + std::to_string(c));
            }
            total += v;
        }
        if (!(total > 0)) {
            throw DataError("lognormalize: cell " + std::to_string(c) + " has zero total count");
        }
        for (std::size_t g = 0; g < raw.cols(); ++g) {
            out(c, g) = std::log1p(raw(c, g) * library_size / total);
        }
    }
    return out;
}

/**
 * PCA fitted on training-split and control cells only.
 */
inline Pca fit_dataset_pca(const PerturbationDataset& data, std::size_t n_components) {
    std::vector<std::size_t> rows;
    for (std::size_t c = 0; c < data.labels.size(); ++c) {
        if (data.labels[c].empty()) {
            rows.push_back(c);
            continue;
        }
        auto it = data.splits.find(category_key(data.labels[c]));
        if (it != data.splits.end() && it->second == Split::train) {
            rows.push_back(c);
        }
    }
    return fit_pca(data.rows(rows), n_components);
}

/**
 * Reference E-distances of categories against controls in PCA space.
 */
struct ReferenceE {
    std::map<std::string, EDistStats> stats;

    /** Fitted on training categories. */
    BandMap band;
};

/**
 * E-distance of every labelled category (training ones mandatory) to the controls, in PCA space,
 * with both groups subsampled to the smaller size using a per-category seed derived from `seed`.
 * The band map is fitted on training categories only.
 */
inline ReferenceE precompute_reference_e(const PerturbationDataset& data, const Pca& pca, std::uint64_t seed, int dim) {
    const auto index = data.index();
    auto control_it = index.find("");
    if (control_it == index.end() || control_it->second.size() < 2) {
        throw DataError("precompute_reference_e: need at least 2 control cells");
    }
    const auto controls = pca.project(data.rows(control_it->second));
    ReferenceE out;
    std::vector<double> train_values;
    for (const auto& [key, rows] : index) {
        if (key.empty()) {
            continue;
        }
        if (rows.size() < 2) {
            throw DataError("precompute_reference_e: category " + key + " has fewer than 2 cells");
        }
        const auto cells = pca.project(data.rows(rows));
        EDistanceOptions options;
        options.subsample_seed = derive_seed(seed, key);
        out.stats[key] = e_distance(cells, controls, options);
        if (data.splits.at(key) == Split::train) {
            train_values.push_back(out.stats[key].e);
        }
    }
    if (train_values.empty()) {
        throw DataError("precompute_reference_e: no training categories");
    }
    out.band = BandMap::fit(train_values, dim);
    return out;
}

/**
 * Mean gene-space log fold change of a category against the control mean.
 */
inline Vector<double> mean_logfc(const PerturbationDataset& data, const std::vector<std::size_t>& rows, const Vector<double>& control_mean) {
    Vector<double> out(data.genes.size(), 0.0);
    for (auto r : rows) {
        const auto row = data.expressions.row(r);
        for (std::size_t g = 0; g < out.size(); ++g) {
            out[g] += row[g];
        }
    }
    for (std::size_t g = 0; g < out.size(); ++g) {
        out[g] = out[g] / static_cast<double>(rows.size()) - control_mean[g];
    }
    return out;
}

inline Vector<double> control_mean(const PerturbationDataset& data) {
    const auto index = data.index();
    auto it = index.find("");
    if (it == index.end()) {
        throw DataError("dataset has no control cells");
    }
    Vector<double> out(data.genes.size(), 0.0);
    for (auto r : it->second) {
        const auto row = data.expressions.row(r);
        for (std::size_t g = 0; g < out.size(); ++g) {
            out[g] += row[g];
        }
    }
    for (auto& v : out) {
        v /= static_cast<double>(it->second.size());
    }
    return out;
}

/**
 * Top-`k` genes by absolute mean log fold change against controls; ties go to the lower gene index.
 */
inline std::vector<std::size_t> select_degs(const PerturbationDataset& data, const std::string& key, std::size_t k = 20) {
    const auto index = data.index();
    auto it = index.find(key);
    if (it == index.end()) {
        throw DataError("select_degs: unknown category " + key);
    }
    if (it->second.size() < 2) {
        throw DataError("select_degs: category " + key + " has fewer than 2 cells");
    }
    const auto lfc = mean_logfc(data, it->second, control_mean(data));
    std::vector<std::size_t> order(lfc.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return std::abs(lfc[a]) > std::abs(lfc[b]); });
    order.resize(std::min(k, order.size()));
    return order;
}

/**
 * Control-state prior in PCA space: mean and (1/n) covariance of projected control cells.
 */
inline Prior control_prior(const PerturbationDataset& data, const Pca& pca, double nu_prior = 0.5, double kappa_prior = 1) {
    const auto index = data.index();
    const auto cells = pca.project(data.rows(index.at("")));
    const auto target = make_target("", {}, cells);
    Prior out;
    out.mean = target.mean;
    out.centered = target.covariance;
    out.nu = nu_prior;
    out.kappa = kappa_prior;
    return out;
}

/**
 * PCA-space targets for every category of a split; reference values are band-mapped where available.
 */
inline std::vector<CategoryTarget> make_targets(const PerturbationDataset& data, Split split, const Pca& pca, const ReferenceE* reference = nullptr) {
    const auto index = data.index();
    std::vector<CategoryTarget> out;
    for (const auto& key : data.categories(split)) {
        auto it = index.find(key);
        if (it == index.end()) {
            throw DataError("category " + key + " has a split but no cells");
        }
        double ref = 0;
        if (reference) {
            auto r = reference->stats.find(key);
            if (r != reference->stats.end()) {
                ref = reference->band(r->second.e);
            }
        }
        out.push_back(make_target(key, split_key(key), pca.project(data.rows(it->second)), ref));
    }
    return out;
}

/**
 * Parameters of the synthetic perturbation generator.
 */
struct SynthSpec {
    int genes = 200;
    int clusters = 5;
    int cells_per_perturbation = 40;
    int control_cells = 200;

    /** Within-perturbation noise standard deviation (aleatoric dial). */
    double noise = 1.5;

    /** Effect magnitude per cluster program; cycled if shorter than the number of clusters. */
    std::vector<double> effect_magnitudes{ 1.0 };

    /** Genes in each cluster's response program. */
    int program_genes = 30;

    /** Relative size of each gene's private deviation from its cluster program. */
    double gene_specific = 0.5;

    /** Each perturbation gene's whole effect is scaled by a strength drawn uniformly from this range. */
    double strength_min = 0.3;
    double strength_max = 1.5;

    /** Interaction strength for two-gene combinations. */
    double interaction = 0.0;

    int train_singles = 40;
    int train_combos = 20;

    /** Held-out categories per tier (0, 1, 2 unseen components) in each of val and test. */
    int heldout_per_tier = 5;

    int embed_dim = 64;
    double embed_noise = 0.3;

    /** Embedding noise multiplier for genes never seen in training. */
    double ood_multiplier = 8.0;

    /** PCA dimension used to match held-out effect sizes. */
    int pca_dim = 10;

    std::uint64_t seed = 42;
};

namespace detail {

inline std::string gene_name(int g) {
    std::string s = std::to_string(g);
    return "G" + std::string(s.size() < 3 ? 3 - s.size() : 0, '0') + s;
}

inline double norm(const std::vector<double>& v) {
    double acc = 0;
    for (double x : v) {
        acc += x * x;
    }
    return std::sqrt(acc);
}

}

/**
 * Draws a synthetic dataset.
 *
 * Every perturbation gene belongs to a cluster; its effect is the cluster's response program plus a private
 * sparse deviation plus a knockdown of the gene itself. Embeddings are the cluster centre plus noise, with
 * a larger noise for genes that never occur in training. Combinations add member effects (plus an optional
 * interaction). Each held-out tier is rescaled by one factor so that its mean PCA-space shift matches the mean
 * training combination shift, which keeps reference E-distances comparable across tiers.
 */
inline PerturbationDataset generate(const SynthSpec& spec) {
    if (spec.genes < 2 || spec.clusters < 1 || spec.cells_per_perturbation < 2 || spec.control_cells < 2 || spec.noise < 0 || spec.embed_dim < 1) {
        throw std::invalid_argument("generate: invalid synthetic spec");
    }
    const int unseen_needed = 2 * spec.heldout_per_tier * (1 + 2);
    const int pert_genes = spec.train_singles + unseen_needed;
    if (pert_genes > spec.genes) {
        throw std::invalid_argument("generate: not enough genes for the requested perturbations");
    }
    const auto G = static_cast<std::size_t>(spec.genes);
    Rng rng(derive_seed(spec.seed, "synth"));

    PerturbationDataset data;
    for (int g = 0; g < spec.genes; ++g) {
        data.genes.push_back(detail::gene_name(g));
    }
    std::vector<double> baseline(G);
    for (auto& b : baseline) {
        b = rng.uniform(0.5, 3.0);
    }

    // cluster programs and embedding centres
    std::vector<std::vector<double>> programs(spec.clusters, std::vector<double>(G, 0.0));
    std::vector<std::vector<double>> centres(spec.clusters, std::vector<double>(spec.embed_dim));
    for (int k = 0; k < spec.clusters; ++k) {
        const double mag = spec.effect_magnitudes.empty() ? 1.0 : spec.effect_magnitudes[k % spec.effect_magnitudes.size()];
        for (auto g : rng.sample(G, static_cast<std::size_t>(std::min(spec.program_genes, spec.genes)))) {
            programs[k][g] = mag * rng.normal();
        }
        for (auto& c : centres[k]) {
            c = rng.normal();
        }
    }

    // perturbation genes: a random subset, first train_singles seen, rest unseen
    auto chosen = rng.sample(G, static_cast<std::size_t>(pert_genes));
    std::vector<int> cluster_of(G, -1);
    std::map<std::string, std::vector<double>> effects;
    for (std::size_t i = 0; i < chosen.size(); ++i) {
        const auto g = chosen[i];
        const int k = static_cast<int>(i % spec.clusters);
        cluster_of[g] = k;
        std::vector<double> eff = programs[k];
        for (auto j : rng.sample(G, 10)) {
            eff[j] += spec.gene_specific * rng.normal();
        }
        eff[g] -= 0.8 * baseline[g];
        const double strength = rng.uniform(spec.strength_min, spec.strength_max);
        for (auto& v : eff) {
            v *= strength;
        }
        effects[data.genes[g]] = std::move(eff);
    }
    std::vector<std::string> seen, unseen;
    for (std::size_t i = 0; i < chosen.size(); ++i) {
        (static_cast<int>(i) < spec.train_singles ? seen : unseen).push_back(data.genes[chosen[i]]);
    }

    data.embeddings = EmbeddingTable(static_cast<std::size_t>(spec.embed_dim));
    for (std::size_t i = 0; i < chosen.size(); ++i) {
        const auto g = chosen[i];
        const bool is_seen = static_cast<int>(i) < spec.train_singles;
        const double scale = spec.embed_noise * (is_seen ? 1.0 : spec.ood_multiplier);
        std::vector<double> e = centres[cluster_of[g]];
        for (auto& v : e) {
            v += scale * rng.normal();
        }
        data.embeddings.set(data.genes[g], std::move(e));
    }

    auto combo_effect = [&](const std::string& a, const std::string& b) {
        std::vector<double> eff(G);
        for (std::size_t g = 0; g < G; ++g) {
            eff[g] = effects[a][g] + effects[b][g];
        }
        if (spec.interaction != 0) {
            for (auto j : rng.sample(G, 5)) {
                eff[j] += spec.interaction * rng.normal();
            }
        }
        return eff;
    };

    // category plan
    struct Planned {
        std::vector<std::string> ids;
        Split split;
        int tier;
        std::vector<double> effect;
    };
    std::vector<Planned> plan;
    for (const auto& s : seen) {
        plan.push_back({ { s }, Split::train, -1, effects[s] });
    }
    std::set<std::pair<std::string, std::string>> used_pairs;
    auto draw_seen_pair = [&]() {
        while (true) {
            auto a = seen[rng.index(seen.size())];
            auto b = seen[rng.index(seen.size())];
            if (a == b) {
                continue;
            }
            if (b < a) {
                std::swap(a, b);
            }
            if (used_pairs.insert({ a, b }).second) {
                return std::make_pair(a, b);
            }
        }
    };
    for (int i = 0; i < spec.train_combos; ++i) {
        auto [a, b] = draw_seen_pair();
        plan.push_back({ { a, b }, Split::train, -1, combo_effect(a, b) });
    }
    std::size_t next_unseen = 0;
    for (Split split : { Split::val, Split::test }) {
        for (int tier = 0; tier <= 2; ++tier) {
            for (int i = 0; i < spec.heldout_per_tier; ++i) {
                std::string a, b;
                if (tier == 0) {
                    std::tie(a, b) = draw_seen_pair();
                } else if (tier == 1) {
                    a = seen[rng.index(seen.size())];
                    b = unseen[next_unseen++];
                } else {
                    a = unseen[next_unseen++];
                    b = unseen[next_unseen++];
                }
                plan.push_back({ { a, b }, split, tier, combo_effect(a, b) });
            }
        }
    }

    // cell generation
    std::vector<double> flat;
    auto add_cells = [&](const std::vector<std::string>& ids, const std::vector<double>& effect, int count, const std::string& prefix) {
        for (int c = 0; c < count; ++c) {
            data.labels.push_back(ids);
            data.cell_ids.push_back(prefix + "_" + std::to_string(c));
            for (std::size_t g = 0; g < G; ++g) {
                flat.push_back(std::max(0.0, baseline[g] + effect[g] + spec.noise * rng.normal()));
            }
        }
    };
    auto rebuild = [&]() {
        data.expressions = Matrix<double>(data.labels.size(), G);
        std::copy(flat.begin(), flat.end(), data.expressions.data().begin());
    };

    std::vector<double> zero(G, 0.0);
    add_cells({}, zero, spec.control_cells, "ctrl");
    for (const auto& p : plan) {
        data.splits[category_key(p.ids)] = p.split;
        if (p.tier >= 0) {
            data.tiers[category_key(p.ids)] = p.tier;
        }
        if (p.split == Split::train) {
            add_cells(p.ids, p.effect, spec.cells_per_perturbation, category_key(p.ids));
        }
    }
    rebuild();

    // match the PCA-space shift of held-out combinations to the training combinations
    const auto pca = fit_dataset_pca(data, static_cast<std::size_t>(spec.pca_dim));
    auto projected_norm = [&](const std::vector<double>& effect) {
        std::vector<double> shifted(G);
        for (std::size_t g = 0; g < G; ++g) {
            shifted[g] = pca.mean[g] + effect[g];
        }
        return detail::norm(pca.project(shifted));
    };
    double target = 0;
    int n_combos = 0;
    for (const auto& p : plan) {
        if (p.split == Split::train && p.ids.size() == 2) {
            target += projected_norm(p.effect);
            ++n_combos;
        }
    }
    target = n_combos > 0 ? target / n_combos : 0;
    // one factor per (split, tier) so that within-tier spread is kept
    std::map<std::pair<Split, int>, std::pair<double, int>> tier_norms;
    for (const auto& p : plan) {
        if (p.split != Split::train) {
            auto& [sum, count] = tier_norms[{ p.split, p.tier }];
            sum += projected_norm(p.effect);
            ++count;
        }
    }
    for (auto& p : plan) {
        if (p.split == Split::train) {
            continue;
        }
        const auto [sum, count] = tier_norms.at({ p.split, p.tier });
        const double current = sum / count;
        if (target > 0 && current > 0) {
            const double factor = std::clamp(target / current, 0.25, 4.0);
            for (auto& v : p.effect) {
                v *= factor;
            }
        }
        add_cells(p.ids, p.effect, spec.cells_per_perturbation, category_key(p.ids));
    }
    rebuild();

    data.meta["generator"] = "synthetic";
    data.meta["seed"] = std::to_string(spec.seed);
    data.meta["genes"] = std::to_string(spec.genes);
    data.meta["clusters"] = std::to_string(spec.clusters);
    data.meta["cells_per_perturbation"] = std::to_string(spec.cells_per_perturbation);
    data.meta["control_cells"] = std::to_string(spec.control_cells);
    data.meta["ood_multiplier"] = std::to_string(spec.ood_multiplier);
    data.validate();
    return data;
}

}

#endif
