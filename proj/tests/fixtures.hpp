#ifndef PRESCRIBE_TESTS_FIXTURES_HPP
#define PRESCRIBE_TESTS_FIXTURES_HPP

// Small hand-built models and batches shared by the unit and acceptance tests.

#include "prescribe/training.hpp"

#include <algorithm>
#include <random>
#include <string>
#include <vector>

namespace fixture {

/**
 * Toy model with `n` response dimensions and latent width `d`, parameters moved off their
 * initial values so every branch (flow, decoder, encoder) is active.
 */
inline prescribe::ModelState toy_state(int n = 2, int d = 4, unsigned long seed = 7) {
    using namespace prescribe;
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0, 1);

    ModelState s;
    s.config.pca_dim = n;
    s.config.latent_dim = d;
    s.config.hidden_dim = 5;
    s.config.flow_layers = 2;
    const std::size_t genes = 6;
    const std::size_t embed = 3;
    s.embeddings = EmbeddingTable::random({ "a", "b", "c", "d", "e" }, embed, seed);
    s.layout = make_layout(s.config, genes, embed);

    s.prior.mean.resize(n);
    for (auto& v : s.prior.mean) {
        v = normal(rng);
    }
    s.prior.centered = Matrix<double>(n, n);
    Matrix<double> a(n, n);
    for (auto& v : a.data()) {
        v = 0.5 * normal(rng);
    }
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < n; ++j) {
            double acc = i == j ? 0.5 : 0.0;
            for (int k = 0; k < n; ++k) {
                acc += a(i, k) * a(j, k);
            }
            s.prior.centered(i, j) = acc;
        }
    }
    s.prior.nu = 0.5;
    s.prior.kappa = 1;

    s.control_profile.resize(genes);
    for (auto& v : s.control_profile) {
        v = normal(rng);
    }
    s.params = initialize_params(s.config, s.layout, s.prior, seed);
    for (auto& p : s.params) {
        p += 0.3 * normal(rng);
    }

    // entropy band wide enough that no toy input sits on a clamp
    double lo = 1e300, hi = -1e300;
    s.entropy_band = BandMap{ -1e6, 1e6, n };
    for (const auto& ids : std::vector<std::vector<std::string>>{ { "a" }, { "b" }, { "c" }, { "d" }, { "e" }, { "a", "c" }, { "b", "e" } }) {
        const double h = forward(ids, s).entropy;
        lo = std::min(lo, h);
        hi = std::max(hi, h);
    }
    s.entropy_band = BandMap{ lo - 10, hi + 10, n };
    return s;
}

/** Four categories with five cells each, scattered around distinct centers. */
inline std::vector<prescribe::CategoryTarget> toy_targets(int n = 2, unsigned long seed = 11) {
    using namespace prescribe;
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0, 1);
    const std::vector<std::vector<std::string>> sets{ { "a" }, { "b" }, { "a", "c" }, { "d" } };
    std::vector<CategoryTarget> out;
    for (std::size_t k = 0; k < sets.size(); ++k) {
        Matrix<double> cells(5, n);
        for (std::size_t c = 0; c < 5; ++c) {
            for (int i = 0; i < n; ++i) {
                cells(c, i) = 0.7 * static_cast<double>(k) + normal(rng);
            }
        }
        out.push_back(make_target(category_key(sets[k]), sets[k], std::move(cells), n + 0.3 * static_cast<double>(k) * n));
    }
    return out;
}

}

#endif
