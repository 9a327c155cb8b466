#ifndef PRESCRIBE_NETWORK_HPP
#define PRESCRIBE_NETWORK_HPP

#include "autodiff.hpp"
#include "edistance.hpp"
#include "flow.hpp"
#include "matrix.hpp"
#include "niw.hpp"
#include "pca.hpp"
#include "random.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

/**
 * @file network.hpp
 * @brief Encoder, flow evidence, decoder and posterior assembly.
 *
 * All trainable parameters live in one flat `std::vector<double>`; `Layout` names the tensors inside it.
 * The forward pass is templated on the scalar, so the same code produces values (`double`)
 * and gradients (`ad::Var`).
 */

namespace prescribe {

class UnknownPerturbation : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/**
 * Architecture hyperparameters.
 */
struct ModelConfig {
    /** PCA dimension N. */
    int pca_dim = 10;

    /** Latent dimension D. */
    int latent_dim = 64;

    /** Hidden width d of the encoder. */
    int hidden_dim = 64;

    int flow_layers = 10;
    double leaky_slope = 0.01;

    /** Upper bound applied to the flow log-density. */
    double log_density_bound = 30;

    double nu_prior = 0.5;
    double kappa_prior = 1;

    /** Floor added after the softplus on the diagonal of the decoded factor. */
    double diag_floor = 1e-6;
};

/**
 * A named block of the flat parameter vector, stored row-major.
 */
struct TensorSpec {
    std::string name;
    std::size_t offset = 0;
    std::size_t rows = 0;
    std::size_t cols = 0;

    std::size_t size() const { return rows * cols; }
};

struct Layout {
    std::size_t genes = 0;
    std::size_t embed_dim = 0;
    std::vector<TensorSpec> tensors;
    std::vector<RadialLayerSpec> flow;
    std::size_t total = 0;

    const TensorSpec& operator[](const std::string& name) const {
        for (const auto& t : tensors) {
            if (t.name == name) {
                return t;
            }
        }
        throw std::out_of_range("Layout: no tensor named " + name);
    }
};

/** Number of decoder outputs, `N + N(N+1)/2`. */
inline std::size_t decoder_outputs(int n) {
    return static_cast<std::size_t>(n + n * (n + 1) / 2);
}

inline Layout make_layout(const ModelConfig& config, std::size_t genes, std::size_t embed_dim) {
    Layout out;
    out.genes = genes;
    out.embed_dim = embed_dim;
    auto add = [&](const std::string& name, std::size_t rows, std::size_t cols) {
        out.tensors.push_back(TensorSpec{ name, out.total, rows, cols });
        out.total += rows * cols;
    };
    const auto d = static_cast<std::size_t>(config.hidden_dim);
    const auto D = static_cast<std::size_t>(config.latent_dim);
    add("f11.weight", d, embed_dim);
    add("f11.bias", d, 1);
    add("f12.0.weight", d, genes);
    add("f12.0.bias", d, 1);
    add("f12.1.weight", d, d);
    add("f12.1.bias", d, 1);
    add("f13.weight", d, d);
    add("f13.bias", d, 1);
    add("f2.0.weight", d, d);
    add("f2.0.bias", d, 1);
    add("f2.1.weight", d, d);
    add("f2.1.bias", d, 1);
    add("out.weight", D, d);
    add("out.bias", D, 1);
    for (int k = 0; k < config.flow_layers; ++k) {
        const auto prefix = "flow." + std::to_string(k);
        RadialLayerSpec layer;
        layer.center = out.total;
        add(prefix + ".center", D, 1);
        layer.alpha = out.total;
        add(prefix + ".alpha", 1, 1);
        layer.beta = out.total;
        add(prefix + ".beta", 1, 1);
        out.flow.push_back(layer);
    }
    add("decoder.weight", decoder_outputs(config.pca_dim), D);
    add("decoder.bias", decoder_outputs(config.pca_dim), 1);
    return out;
}

/**
 * Fixed perturbation embedding table.
 */
class EmbeddingTable {
public:
    EmbeddingTable() = default;
    explicit EmbeddingTable(std::size_t width) : width_(width) {}

    std::size_t width() const { return width_; }
    std::size_t size() const { return rows_.size(); }
    bool contains(const std::string& id) const { return rows_.count(id) > 0; }

    void set(const std::string& id, std::vector<double> row) {
        if (row.size() != width_) {
            throw std::invalid_argument("EmbeddingTable: row for " + id + " has width " + std::to_string(row.size()) + ", expected " + std::to_string(width_));
        }
        rows_[id] = std::move(row);
    }

    const std::vector<double>& at(const std::string& id) const {
        auto it = rows_.find(id);
        if (it == rows_.end()) {
            throw UnknownPerturbation("unknown perturbation id: " + id);
        }
        return it->second;
    }

    const std::map<std::string, std::vector<double>>& rows() const { return rows_; }

    /**
     * Standard Gaussian rows; each row depends only on `(seed, id)`.
     */
    static EmbeddingTable random(const std::vector<std::string>& ids, std::size_t width, std::uint64_t seed) {
        EmbeddingTable out(width);
        for (const auto& id : ids) {
            Rng rng(derive_seed(seed, id));
            std::vector<double> row(width);
            for (auto& v : row) {
                v = rng.normal();
            }
            out.set(id, std::move(row));
        }
        return out;
    }

private:
    std::size_t width_ = 0;
    std::map<std::string, std::vector<double>> rows_;
};

/**
 * Control-state prior in PCA space.
 */
struct Prior {
    Vector<double> mean;
    Matrix<double> centered;
    double nu = 0.5;
    double kappa = 1;
};

/**
 * Everything needed to run the forward pass.
 */
struct ModelState {
    ModelConfig config;
    Layout layout;
    std::vector<double> params;
    EmbeddingTable embeddings;
    Prior prior;

    /** Gene-space control mean fed to the control branch of the encoder. */
    Vector<double> control_profile;

    Pca pca;

    /** Maps predictive entropy onto `[N, 2N]`. */
    BandMap entropy_band;

    /** Maps reference E-distances onto `[N, 2N]`. */
    BandMap reference_band;

    int dim() const { return config.pca_dim; }
};

namespace detail {

template<typename T>
Vector<T> linear(std::span<const T> params, const TensorSpec& weight, const TensorSpec& bias, const Vector<T>& x) {
    if (x.size() != weight.cols) {
        throw std::invalid_argument("linear " + weight.name + ": input has size " + std::to_string(x.size()) + ", expected " + std::to_string(weight.cols));
    }
    Vector<T> out(weight.rows);
    for (std::size_t i = 0; i < weight.rows; ++i) {
        out[i] = dot<T>(params.subspan(weight.offset + i * weight.cols, weight.cols), x, params[bias.offset + i]);
    }
    return out;
}

template<typename T>
Vector<T> leaky(Vector<T> x, double slope) {
    for (auto& v : x) {
        v = leaky_relu(v, slope);
    }
    return x;
}

template<typename T>
Vector<T> mlp2(std::span<const T> params, const Layout& layout, const std::string& prefix, const Vector<T>& x, double slope) {
    auto h = leaky(linear(params, layout[prefix + ".0.weight"], layout[prefix + ".0.bias"], x), slope);
    return linear(params, layout[prefix + ".1.weight"], layout[prefix + ".1.bias"], h);
}

}

/**
 * Control branch `f12` of the encoder, shared by every perturbation with the same control profile.
 */
template<typename T>
Vector<T> encode_control(std::span<const double> control_profile, const Layout& layout, std::span<const T> params, double slope) {
    Vector<T> x(control_profile.begin(), control_profile.end());
    return detail::mlp2(params, layout, "f12", x, slope);
}

/**
 * `f13(f11(embed(id)) + f12(control))` for a single perturbation id, given the precomputed control branch.
 */
template<typename T>
Vector<T> encode_single(const std::string& id, const Vector<T>& control_features, const EmbeddingTable& table, const Layout& layout, std::span<const T> params) {
    const auto& row = table.at(id);
    Vector<T> e(row.begin(), row.end());
    auto h = detail::linear(params, layout["f11.weight"], layout["f11.bias"], e);
    for (std::size_t i = 0; i < h.size(); ++i) {
        h[i] = h[i] + control_features[i];
    }
    return detail::linear(params, layout["f13.weight"], layout["f13.bias"], h);
}

/**
 * Convenience overload computing the control branch itself.
 */
template<typename T>
Vector<T> encode_single(const std::string& id, std::span<const double> control_profile, const EmbeddingTable& table, const Layout& layout, std::span<const T> params, double slope) {
    return encode_single(id, encode_control(control_profile, layout, params, slope), table, layout, params);
}

/**
 * `z = f_out(s + f2(s))` with `s` the sum of per-id encodings taken in sorted id order.
 */
template<typename T>
Vector<T> encode_set(std::vector<std::string> ids, const Vector<T>& control_features, const EmbeddingTable& table, const Layout& layout, std::span<const T> params, double slope) {
    if (ids.empty()) {
        throw std::invalid_argument("encode_set: empty perturbation set");
    }
    std::sort(ids.begin(), ids.end());
    Vector<T> s;
    for (const auto& id : ids) {
        auto h = encode_single(id, control_features, table, layout, params);
        if (s.empty()) {
            s = std::move(h);
        } else {
            for (std::size_t i = 0; i < s.size(); ++i) {
                s[i] = s[i] + h[i];
            }
        }
    }
    auto g = detail::mlp2(params, layout, "f2", s, slope);
    for (std::size_t i = 0; i < s.size(); ++i) {
        g[i] = g[i] + s[i];
    }
    return detail::linear(params, layout["out.weight"], layout["out.bias"], g);
}

/**
 * Decoded location and lower-triangular factor.
 */
template<typename T>
struct Decoded {
    Vector<T> mu0;
    Matrix<T> L;
};

/**
 * Linear decoder; outputs after the first N fill the lower triangle row-wise, with `softplus + floor` on the diagonal.
 */
template<typename T>
Decoded<T> decode(const Vector<T>& z, const Layout& layout, std::span<const T> params, int n, double diag_floor) {
    const auto raw = detail::linear(params, layout["decoder.weight"], layout["decoder.bias"], z);
    Decoded<T> out;
    out.mu0.assign(raw.begin(), raw.begin() + n);
    out.L = Matrix<T>(n, n);
    std::size_t k = static_cast<std::size_t>(n);
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j <= i; ++j) {
            out.L(i, j) = i == j ? softplus(raw[k]) + diag_floor : raw[k];
            ++k;
        }
    }
    return out;
}

template<typename T>
struct ForwardResult {
    Vector<T> z;

    /** Flow log-density after the upper bound. */
    T log_density = T(0);

    /** `ln nu`. */
    T log_evidence = T(0);

    T nu = T(0);
    T nu_tilde = T(0);
    NIWParams<T> posterior;

    /** Entropy of the Student-t posterior predictive. */
    T entropy = T(0);

    T h_tilde = T(0);
    T pseudo_e = T(0);
};

/**
 * Forward pass for one perturbation set, given the control branch output.
 */
template<typename T>
ForwardResult<T> forward(const std::vector<std::string>& ids, const Vector<T>& control_features, const ModelState& state, std::span<const T> params) {
    const auto& cfg = state.config;
    const int n = cfg.pca_dim;
    ForwardResult<T> out;
    out.z = encode_set(ids, control_features, state.embeddings, state.layout, params, cfg.leaky_slope);

    const T raw_density = flow_log_density(out.z, std::span<const RadialLayerSpec>(state.layout.flow), params);
    out.log_density = bound_log_density(raw_density, cfg.log_density_bound);
    out.log_evidence = log_evidence(out.log_density, n);
    {
        using std::exp;
        out.nu = exp(out.log_evidence);
    }
    out.nu_tilde = posterior_evidence(out.nu, state.prior.nu, n);

    // decoder statistics are scaled with the banded evidence so that they stay bounded as nu -> 0
    auto dec = decode(out.z, state.layout, params, n, cfg.diag_floor);
    const auto inv = lower_inverse(dec.L);
    auto centered_out = gram_transpose(inv);
    const T scale = T(1) / (out.nu_tilde * out.nu_tilde);
    for (auto& v : centered_out.data()) {
        v = v * scale;
    }

    const auto mu_prior = cast<T>(state.prior.mean);
    const auto centered_prior = cast<T>(state.prior.centered);
    auto update = bayes_update_centered(mu_prior, centered_prior, state.prior.nu, dec.mu0, centered_out, out.nu);
    out.posterior = std::move(update.posterior);

    out.entropy = predictive_t(out.posterior).entropy();
    out.h_tilde = state.entropy_band(out.entropy);
    out.pseudo_e = pseudo_e(out.nu_tilde, out.h_tilde, n);
    return out;
}

/**
 * Value-only forward pass using the state's own parameters.
 */
inline ForwardResult<double> forward(const std::vector<std::string>& ids, const ModelState& state) {
    std::span<const double> params(state.params);
    const auto control = encode_control(std::span<const double>(state.control_profile), state.layout, params, state.config.leaky_slope);
    return forward(ids, control, state, params);
}

/**
 * Predicted gene-space log fold change, `reconstruct(mu0) - reconstruct(prior mean)`.
 */
inline Vector<double> predicted_logfc(const ForwardResult<double>& fwd, const ModelState& state) {
    auto genes = state.pca.reconstruct(fwd.posterior.mu0);
    const auto base = state.pca.reconstruct(state.prior.mean);
    for (std::size_t g = 0; g < genes.size(); ++g) {
        genes[g] -= base[g];
    }
    return genes;
}

/**
 * Initial parameters: uniform `+-1/sqrt(fan_in)` weights, zero biases, identity flow layers,
 * and a decoder bias that reproduces the prior at `nu_tilde = 1.5 N`.
 */
inline std::vector<double> initialize_params(const ModelConfig& config, const Layout& layout, const Prior& prior, std::uint64_t seed) {
    std::vector<double> params(layout.total, 0.0);
    Rng rng(derive_seed(seed, "init"));
    for (const auto& t : layout.tensors) {
        const bool is_weight = t.name.ends_with(".weight");
        if (is_weight) {
            const double bound = 1.0 / std::sqrt(static_cast<double>(t.cols));
            const double scale = t.name == "decoder.weight" ? 0.1 : 1.0;
            for (std::size_t i = 0; i < t.size(); ++i) {
                params[t.offset + i] = scale * rng.uniform(-bound, bound);
            }
        } else if (t.name.ends_with(".center")) {
            for (std::size_t i = 0; i < t.size(); ++i) {
                params[t.offset + i] = 0.5 * rng.normal();
            }
        }
    }
    // identity radial layers: alpha = beta raw parameters
    for (const auto& layer : layout.flow) {
        params[layer.alpha] = 0.0;
        params[layer.beta] = 0.0;
    }

    const int n = config.pca_dim;
    const auto& bias = layout["decoder.bias"];
    if (prior.mean.size() == static_cast<std::size_t>(n)) {
        for (int i = 0; i < n; ++i) {
            params[bias.offset + i] = prior.mean[i];
        }
        const double nu_mid = 1.5 * n;
        std::size_t k = static_cast<std::size_t>(n);
        for (int i = 0; i < n; ++i) {
            for (int j = 0; j <= i; ++j) {
                if (i == j) {
                    const double target = 1.0 / (nu_mid * std::sqrt(std::max(prior.centered(i, i), 1e-12)));
                    // inverse softplus
                    params[bias.offset + k] = target > 30 ? target : std::log(std::expm1(std::max(target - config.diag_floor, 1e-12)));
                }
                ++k;
            }
        }
    }
    return params;
}

}

#endif
