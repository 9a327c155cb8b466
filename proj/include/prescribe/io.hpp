#ifndef PRESCRIBE_IO_HPP
#define PRESCRIBE_IO_HPP

#include "data.hpp"
#include "training.hpp"

#include <nlohmann/json.hpp>

#include <charconv>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <system_error>
#include <vector>

/**
 * @file io.hpp
 * @brief Text formats: datasets as TSV, run configs as `key = value`, checkpoints and reports as JSON.
 */

namespace prescribe {

#ifndef PRESCRIBE_VERSION
#define PRESCRIBE_VERSION "0.0.0"
#endif

inline constexpr const char* tool_version = PRESCRIBE_VERSION;
inline constexpr const char* checkpoint_format = "prescribe-checkpoint/1";

using json = nlohmann::ordered_json;

/** Shortest round-trip decimal form of `v`. */
inline std::string format_double(double v) {
    char buf[64];
    auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), v);
    if (ec != std::errc{}) {
        throw std::runtime_error("format_double failed");
    }
    return std::string(buf, end);
}

inline double parse_double(std::string_view s, const std::string& where) {
    double v = 0;
    const auto* first = s.data();
    const auto* last = s.data() + s.size();
    if (!s.empty() && *first == '+') {
        ++first;
    }
    auto [ptr, ec] = std::from_chars(first, last, v);
    if (ec != std::errc{} || ptr != last) {
        throw DataError(where + ": not a number: '" + std::string(s) + "'");
    }
    return v;
}

inline std::vector<std::string> split_tabs(const std::string& line) {
    std::vector<std::string> out;
    std::size_t start = 0;
    while (true) {
        const auto pos = line.find('\t', start);
        out.push_back(line.substr(start, pos == std::string::npos ? std::string::npos : pos - start));
        if (pos == std::string::npos) {
            break;
        }
        start = pos + 1;
    }
    if (!out.empty() && !out.back().empty() && out.back().back() == '\r') {
        out.back().pop_back();
    }
    return out;
}

inline std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) {
        return "";
    }
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

// ---------------------------------------------------------------------------
// run configuration

/**
 * Everything a command needs: synthetic spec, architecture, optimizer and the global seed.
 */
struct RunConfig {
    SynthSpec synth;
    ModelConfig model;
    TrainConfig train;
    SweepGrid sweep;
    std::uint64_t seed = 42;
    double fraction = 0.1;
    int random_repeats = 10;
    int calibration_bins = 5;
    std::size_t degs = 20;
};

/**
 * Settings of the fixed desk-scale benchmark (200 genes, 10 PCA dimensions, 60/15/15 categories).
 * Differs from the defaults in latent width, step size, batch size, epoch budget and lambda3.
 */
inline RunConfig desk_benchmark_config() {
    RunConfig c;
    c.model.latent_dim = 8;
    c.train.lr = 1e-3;
    c.train.batch_cells = 80;
    c.train.grad_accum = 1;
    c.train.epochs = 400;
    c.train.patience = 400;
    c.train.loss.weights.lambda3 = 1e-3;
    return c;
}

inline std::string to_string(RankingLoss r) {
    return r == RankingLoss::full_batch ? "full_batch" : "suffix";
}

inline RankingLoss parse_ranking(const std::string& s) {
    if (s == "full_batch") {
        return RankingLoss::full_batch;
    }
    if (s == "suffix") {
        return RankingLoss::suffix;
    }
    throw std::invalid_argument("ranking must be full_batch or suffix, got '" + s + "'");
}

namespace detail {

template<typename F>
void for_each_config_field(RunConfig& c, F&& f) {
    f("seed", c.seed);
    f("synth.genes", c.synth.genes);
    f("synth.clusters", c.synth.clusters);
    f("synth.cells_per_perturbation", c.synth.cells_per_perturbation);
    f("synth.control_cells", c.synth.control_cells);
    f("synth.noise", c.synth.noise);
    f("synth.program_genes", c.synth.program_genes);
    f("synth.gene_specific", c.synth.gene_specific);
    f("synth.strength_min", c.synth.strength_min);
    f("synth.strength_max", c.synth.strength_max);
    f("synth.interaction", c.synth.interaction);
    f("synth.train_singles", c.synth.train_singles);
    f("synth.train_combos", c.synth.train_combos);
    f("synth.heldout_per_tier", c.synth.heldout_per_tier);
    f("synth.embed_dim", c.synth.embed_dim);
    f("synth.embed_noise", c.synth.embed_noise);
    f("synth.ood_multiplier", c.synth.ood_multiplier);
    f("pca_dim", c.model.pca_dim);
    f("latent_dim", c.model.latent_dim);
    f("hidden_dim", c.model.hidden_dim);
    f("flow_layers", c.model.flow_layers);
    f("leaky_slope", c.model.leaky_slope);
    f("log_density_bound", c.model.log_density_bound);
    f("nu_prior", c.model.nu_prior);
    f("kappa_prior", c.model.kappa_prior);
    f("diag_floor", c.model.diag_floor);
    f("lr", c.train.lr);
    f("weight_decay", c.train.weight_decay);
    f("batch", c.train.batch_cells);
    f("grad_accum", c.train.grad_accum);
    f("epochs", c.train.epochs);
    f("patience", c.train.patience);
    f("warmup_epochs", c.train.warmup_epochs);
    f("warmup_lr", c.train.warmup_lr);
    f("plateau_factor", c.train.plateau_factor);
    f("plateau_patience", c.train.plateau_patience);
    f("plateau_threshold", c.train.plateau_threshold);
    f("lambda1", c.train.loss.weights.lambda1);
    f("lambda2", c.train.loss.weights.lambda2);
    f("lambda3", c.train.loss.weights.lambda3);
    f("fraction", c.fraction);
    f("random_repeats", c.random_repeats);
    f("calibration_bins", c.calibration_bins);
    f("degs", c.degs);
    f("sweep.fixed_lambda3", c.sweep.fixed_lambda3);
}

inline std::string join_list(const std::vector<double>& v) {
    std::string out;
    for (std::size_t i = 0; i < v.size(); ++i) {
        out += (i ? "," : "") + format_double(v[i]);
    }
    return out;
}

template<typename T>
void assign_config_value(T& target, const std::string& key, const std::string& value) {
    const std::string where = "config key " + key;
    if constexpr (std::is_same_v<T, double>) {
        target = parse_double(value, where);
    } else {
        const double v = parse_double(value, where);
        if (v != std::floor(v) || v < static_cast<double>(std::numeric_limits<T>::lowest()) || v > static_cast<double>(std::numeric_limits<T>::max())) {
            throw DataError(where + ": expected an integer, got '" + value + "'");
        }
        target = static_cast<T>(v);
    }
}

template<typename T>
std::string config_value_string(const T& v) {
    if constexpr (std::is_same_v<T, double>) {
        return format_double(v);
    } else {
        return std::to_string(v);
    }
}

}

/**
 * Applies one `key = value` setting.
 *
 * @throws DataError on an unknown key or malformed value.
 */
inline void set_config_value(RunConfig& c, const std::string& key, const std::string& value) {
    if (key == "ranking") {
        c.train.loss.ranking = parse_ranking(value);
        return;
    }
    auto list = [&] {
        std::vector<double> out;
        std::stringstream ss(value);
        std::string item;
        while (std::getline(ss, item, ',')) {
            out.push_back(parse_double(trim(item), "config key " + key));
        }
        if (out.empty()) {
            throw DataError("config key " + key + ": empty list");
        }
        return out;
    };
    if (key == "synth.effect_magnitudes") {
        c.synth.effect_magnitudes = list();
        return;
    }
    if (key == "sweep.lambda1") {
        c.sweep.lambda1 = list();
        return;
    }
    if (key == "sweep.lambda2") {
        c.sweep.lambda2 = list();
        return;
    }
    if (key == "sweep.lambda3") {
        c.sweep.lambda3 = list();
        return;
    }
    bool found = false;
    detail::for_each_config_field(c, [&](const char* name, auto& field) {
        if (key == name) {
            detail::assign_config_value(field, key, value);
            found = true;
        }
    });
    if (!found) {
        throw DataError("unknown config key '" + key + "'");
    }
    c.train.seed = c.seed;
    c.synth.seed = c.seed;
    c.synth.pca_dim = c.model.pca_dim;
}

/** Ordered `(key, value)` pairs of the full effective configuration. */
inline std::vector<std::pair<std::string, std::string>> config_entries(const RunConfig& config) {
    RunConfig c = config;
    std::vector<std::pair<std::string, std::string>> out;
    detail::for_each_config_field(c, [&](const char* name, auto& field) { out.emplace_back(name, detail::config_value_string(field)); });
    out.emplace_back("synth.effect_magnitudes", detail::join_list(c.synth.effect_magnitudes));
    out.emplace_back("sweep.lambda1", detail::join_list(c.sweep.lambda1));
    out.emplace_back("sweep.lambda2", detail::join_list(c.sweep.lambda2));
    out.emplace_back("sweep.lambda3", detail::join_list(c.sweep.lambda3));
    out.emplace_back("ranking", to_string(c.train.loss.ranking));
    return out;
}

inline std::string dump_config(const RunConfig& c) {
    std::string out;
    for (const auto& [k, v] : config_entries(c)) {
        out += k + " = " + v + "\n";
    }
    return out;
}

inline json config_json(const RunConfig& c) {
    json out = json::object();
    for (const auto& [k, v] : config_entries(c)) {
        out[k] = v;
    }
    return out;
}

/**
 * Parses `key = value` lines; `#` starts a comment.
 */
inline void apply_config_text(RunConfig& c, const std::string& text, const std::string& source) {
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (const auto hash = line.find('#'); hash != std::string::npos) {
            line.erase(hash);
        }
        line = trim(line);
        if (line.empty()) {
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw DataError(source + ":" + std::to_string(lineno) + ": expected 'key = value'");
        }
        try {
            set_config_value(c, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
        } catch (const std::exception& e) {
            throw DataError(source + ":" + std::to_string(lineno) + ": " + e.what());
        }
    }
}

inline std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw DataError("cannot open " + path.string());
    }
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

inline void write_file(const std::filesystem::path& path, const std::string& content) {
    if (path.has_parent_path()) {
        std::filesystem::create_directories(path.parent_path());
    }
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw std::runtime_error("cannot write " + path.string());
    }
    out << content;
    if (!out) {
        throw std::runtime_error("write failed for " + path.string());
    }
}

/** Comment lines heading every TSV artifact. */
inline std::string provenance_header(const RunConfig& c) {
    std::string out = "# tool = prescribe " + std::string(tool_version) + "\n";
    out += "# seed = " + std::to_string(c.seed) + "\n";
    for (const auto& [k, v] : config_entries(c)) {
        out += "# config." + k + " = " + v + "\n";
    }
    return out;
}

/**
 * Applies the `# config.key = value` lines of an artifact header to `c`.
 *
 * @return whether any config line was found.
 */
inline bool apply_header_config(RunConfig& c, const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw DataError("cannot open " + path.string());
    }
    std::string line;
    int lineno = 0;
    bool found = false;
    while (std::getline(in, line) && line.starts_with("#")) {
        ++lineno;
        const std::string prefix = "# config.";
        if (!line.starts_with(prefix)) {
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw DataError(path.string() + ":" + std::to_string(lineno) + ": malformed config line");
        }
        try {
            set_config_value(c, trim(line.substr(prefix.size(), eq - prefix.size())), trim(line.substr(eq + 1)));
        } catch (const std::exception& e) {
            throw DataError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
        }
        found = true;
    }
    return found;
}

inline json provenance_json(const RunConfig& c) {
    json out = json::object();
    out["tool"] = "prescribe";
    out["version"] = tool_version;
    out["seed"] = c.seed;
    out["config"] = config_json(c);
    return out;
}

// ---------------------------------------------------------------------------
// dataset

namespace detail {

/** Reads non-comment lines of a TSV file with their 1-based line numbers. */
inline std::vector<std::pair<int, std::vector<std::string>>> read_tsv(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw DataError("cannot open " + path.string());
    }
    std::vector<std::pair<int, std::vector<std::string>>> out;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty() || line[0] == '#') {
            continue;
        }
        out.emplace_back(lineno, split_tabs(line));
    }
    return out;
}

inline std::size_t require_column(const std::vector<std::string>& header, const std::string& name, const std::filesystem::path& path) {
    for (std::size_t i = 0; i < header.size(); ++i) {
        if (header[i] == name) {
            return i;
        }
    }
    throw DataError(path.string() + ": missing column '" + name + "'");
}

}

/**
 * Writes `expression.tsv`, `labels.tsv` (perturbation ids joined by `;`), `embeddings.tsv` and `manifest.txt` (metadata and tier assignments).
 */
inline void save_dataset(const PerturbationDataset& data, const std::filesystem::path& dir, const RunConfig& config) {
    std::filesystem::create_directories(dir);
    const auto header = provenance_header(config);

    std::string expr = header + "cell_id";
    for (const auto& g : data.genes) {
        expr += "\t" + g;
    }
    expr += "\n";
    for (std::size_t c = 0; c < data.cell_ids.size(); ++c) {
        expr += data.cell_ids[c];
        for (double v : data.expressions.row(c)) {
            expr += "\t" + format_double(v);
        }
        expr += "\n";
    }
    write_file(dir / "expression.tsv", expr);

    std::string labels = header + "cell_id\tperturbation\tsplit\n";
    for (std::size_t c = 0; c < data.cell_ids.size(); ++c) {
        const auto key = category_key(data.labels[c]);
        const std::string split = key.empty() ? "control" : to_string(data.splits.at(key));
        std::string ids;
        for (const auto& id : split_key(key)) {
            ids += (ids.empty() ? "" : ";") + id;
        }
        labels += data.cell_ids[c] + "\t" + ids + "\t" + split + "\n";
    }
    write_file(dir / "labels.tsv", labels);

    std::string emb = header + "id";
    for (std::size_t k = 0; k < data.embeddings.width(); ++k) {
        emb += "\te" + std::to_string(k);
    }
    emb += "\n";
    for (const auto& [id, row] : data.embeddings.rows()) {
        emb += id;
        for (double v : row) {
            emb += "\t" + format_double(v);
        }
        emb += "\n";
    }
    write_file(dir / "embeddings.tsv", emb);

    std::string manifest = header;
    for (const auto& [k, v] : data.meta) {
        manifest += k + " = " + v + "\n";
    }
    for (const auto& [k, t] : data.tiers) {
        manifest += "tier." + k + " = " + std::to_string(t) + "\n";
    }
    manifest += "files = expression.tsv labels.tsv embeddings.tsv\n";
    write_file(dir / "manifest.txt", manifest);
}

/**
 * Loads a dataset directory written by `save_dataset()` (embeddings and manifest optional).
 *
 * @throws DataError naming the file, line and column on malformed input.
 */
inline PerturbationDataset load_dataset(const std::filesystem::path& dir) {
    PerturbationDataset data;
    const auto expr_path = dir / "expression.tsv";
    const auto expr = detail::read_tsv(expr_path);
    if (expr.empty()) {
        throw DataError(expr_path.string() + ": empty file");
    }
    const auto& header = expr.front().second;
    const auto id_col = detail::require_column(header, "cell_id", expr_path);
    for (std::size_t i = 0; i < header.size(); ++i) {
        if (i != id_col) {
            data.genes.push_back(header[i]);
        }
    }
    std::map<std::string, std::size_t> row_of;
    std::vector<double> flat;
    for (std::size_t r = 1; r < expr.size(); ++r) {
        const auto& [lineno, fields] = expr[r];
        const std::string where = expr_path.string() + ":" + std::to_string(lineno);
        if (fields.size() != header.size()) {
            throw DataError(where + ": expected " + std::to_string(header.size()) + " fields, got " + std::to_string(fields.size()));
        }
        if (!row_of.emplace(fields[id_col], data.cell_ids.size()).second) {
            throw DataError(where + ": duplicate cell id " + fields[id_col]);
        }
        data.cell_ids.push_back(fields[id_col]);
        for (std::size_t i = 0; i < fields.size(); ++i) {
            if (i != id_col) {
                flat.push_back(parse_double(fields[i], where + " column " + header[i]));
            }
        }
    }
    data.expressions = Matrix<double>(data.cell_ids.size(), data.genes.size());
    std::copy(flat.begin(), flat.end(), data.expressions.data().begin());

    const auto labels_path = dir / "labels.tsv";
    const auto labels = detail::read_tsv(labels_path);
    if (labels.empty()) {
        throw DataError(labels_path.string() + ": empty file");
    }
    const auto& lh = labels.front().second;
    const auto lc = detail::require_column(lh, "cell_id", labels_path);
    const auto pc = detail::require_column(lh, "perturbation", labels_path);
    const auto sc = detail::require_column(lh, "split", labels_path);
    data.labels.assign(data.cell_ids.size(), {});
    std::vector<bool> labelled(data.cell_ids.size(), false);
    for (std::size_t r = 1; r < labels.size(); ++r) {
        const auto& [lineno, fields] = labels[r];
        const std::string where = labels_path.string() + ":" + std::to_string(lineno);
        if (fields.size() != lh.size()) {
            throw DataError(where + ": expected " + std::to_string(lh.size()) + " fields, got " + std::to_string(fields.size()));
        }
        auto it = row_of.find(fields[lc]);
        if (it == row_of.end()) {
            throw DataError(where + ": cell " + fields[lc] + " not in expression.tsv");
        }
        const auto key = fields[pc];
        std::vector<std::string> ids;
        std::stringstream ss(key);
        std::string id;
        while (std::getline(ss, id, ';')) {
            if (id.empty() || id.find('+') != std::string::npos) {
                throw DataError(where + ": malformed perturbation '" + key + "'");
            }
            ids.push_back(id);
        }
        data.labels[it->second] = ids;
        labelled[it->second] = true;
        if (fields[sc] == "control") {
            if (!key.empty()) {
                throw DataError(where + ": control split with perturbation " + key);
            }
            continue;
        }
        Split split;
        try {
            split = parse_split(fields[sc]);
        } catch (const std::exception& e) {
            throw DataError(where + ": " + e.what());
        }
        const auto canonical = category_key(data.labels[it->second]);
        auto [pos, inserted] = data.splits.emplace(canonical, split);
        if (!inserted && pos->second != split) {
            throw DataError(where + ": category " + canonical + " assigned to two splits");
        }
    }
    for (std::size_t c = 0; c < labelled.size(); ++c) {
        if (!labelled[c]) {
            throw DataError(labels_path.string() + ": no label for cell " + data.cell_ids[c]);
        }
    }

    const auto emb_path = dir / "embeddings.tsv";
    if (std::filesystem::exists(emb_path)) {
        const auto emb = detail::read_tsv(emb_path);
        if (!emb.empty()) {
            const auto& eh = emb.front().second;
            const auto ic = detail::require_column(eh, "id", emb_path);
            data.embeddings = EmbeddingTable(eh.size() - 1);
            for (std::size_t r = 1; r < emb.size(); ++r) {
                const auto& [lineno, fields] = emb[r];
                const std::string where = emb_path.string() + ":" + std::to_string(lineno);
                if (fields.size() != eh.size()) {
                    throw DataError(where + ": expected " + std::to_string(eh.size()) + " fields, got " + std::to_string(fields.size()));
                }
                std::vector<double> row;
                for (std::size_t i = 0; i < fields.size(); ++i) {
                    if (i != ic) {
                        row.push_back(parse_double(fields[i], where));
                    }
                }
                data.embeddings.set(fields[ic], std::move(row));
            }
        }
    }

    const auto manifest_path = dir / "manifest.txt";
    if (std::filesystem::exists(manifest_path)) {
        std::istringstream in(read_file(manifest_path));
        std::string line;
        int lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            if (line.empty() || line[0] == '#') {
                continue;
            }
            const auto eq = line.find('=');
            if (eq == std::string::npos) {
                throw DataError(manifest_path.string() + ":" + std::to_string(lineno) + ": expected 'key = value'");
            }
            const auto key = trim(line.substr(0, eq));
            const auto value = trim(line.substr(eq + 1));
            if (key.starts_with("tier.")) {
                data.tiers[key.substr(5)] = static_cast<int>(parse_double(value, manifest_path.string() + ":" + std::to_string(lineno)));
            } else if (key != "files") {
                data.meta[key] = value;
            }
        }
    }
    data.validate();
    return data;
}

// ---------------------------------------------------------------------------
// checkpoint

namespace detail {

inline json matrix_json(const Matrix<double>& m) {
    return json{ { "rows", m.rows() }, { "cols", m.cols() }, { "data", m.data() } };
}

inline Matrix<double> matrix_from_json(const json& j) {
    Matrix<double> m(j.at("rows").get<std::size_t>(), j.at("cols").get<std::size_t>());
    const auto data = j.at("data").get<std::vector<double>>();
    if (data.size() != m.data().size()) {
        throw DataError("checkpoint: matrix data has the wrong size");
    }
    std::copy(data.begin(), data.end(), m.data().begin());
    return m;
}

inline json band_json(const BandMap& b) {
    return json{ { "min", b.min }, { "max", b.max }, { "dim", b.dim } };
}

inline BandMap band_from_json(const json& j) {
    return BandMap{ j.at("min").get<double>(), j.at("max").get<double>(), j.at("dim").get<int>() };
}

}

/**
 * Serializes a model state: parameters by tensor, band maps, PCA, prior and configuration.
 */
inline json checkpoint_json(const ModelState& s, const RunConfig& config, const json& extra = json::object()) {
    json out = json::object();
    out["format"] = checkpoint_format;
    out["provenance"] = provenance_json(config);
    out["dims"] = json{ { "genes", s.layout.genes }, { "embed_dim", s.layout.embed_dim }, { "pca_dim", s.config.pca_dim } };
    json tensors = json::object();
    for (const auto& t : s.layout.tensors) {
        tensors[t.name] = json{ { "rows", t.rows }, { "cols", t.cols }, { "data", std::vector<double>(s.params.begin() + static_cast<std::ptrdiff_t>(t.offset), s.params.begin() + static_cast<std::ptrdiff_t>(t.offset + t.size())) } };
    }
    out["tensors"] = std::move(tensors);
    json emb = json::object();
    for (const auto& [id, row] : s.embeddings.rows()) {
        emb[id] = row;
    }
    out["embeddings"] = json{ { "width", s.embeddings.width() }, { "rows", std::move(emb) } };
    out["prior"] = json{ { "mean", s.prior.mean }, { "centered", detail::matrix_json(s.prior.centered) }, { "nu", s.prior.nu }, { "kappa", s.prior.kappa } };
    out["control_profile"] = s.control_profile;
    out["pca"] = json{ { "mean", s.pca.mean }, { "components", detail::matrix_json(s.pca.components) }, { "eigenvalues", s.pca.eigenvalues }, { "rank_deficient", s.pca.rank_deficient } };
    out["entropy_band"] = detail::band_json(s.entropy_band);
    out["reference_band"] = detail::band_json(s.reference_band);
    out["extra"] = extra;
    return out;
}

/**
 * Restores a model state and its run configuration.
 *
 * @throws DataError on a wrong format tag or inconsistent content.
 */
inline std::pair<ModelState, RunConfig> checkpoint_from_json(const json& j) {
    if (!j.contains("format") || j.at("format") != checkpoint_format) {
        throw DataError(std::string("checkpoint: expected format ") + checkpoint_format);
    }
    RunConfig config;
    for (const auto& [k, v] : j.at("provenance").at("config").items()) {
        set_config_value(config, k, v.get<std::string>());
    }
    ModelState s;
    s.config = config.model;
    const auto& dims = j.at("dims");
    s.layout = make_layout(s.config, dims.at("genes").get<std::size_t>(), dims.at("embed_dim").get<std::size_t>());
    s.params.assign(s.layout.total, 0.0);
    const auto& tensors = j.at("tensors");
    for (const auto& t : s.layout.tensors) {
        if (!tensors.contains(t.name)) {
            throw DataError("checkpoint: missing tensor " + t.name);
        }
        const auto data = tensors.at(t.name).at("data").get<std::vector<double>>();
        if (data.size() != t.size()) {
            throw DataError("checkpoint: tensor " + t.name + " has " + std::to_string(data.size()) + " values, expected " + std::to_string(t.size()));
        }
        std::copy(data.begin(), data.end(), s.params.begin() + static_cast<std::ptrdiff_t>(t.offset));
    }
    s.embeddings = EmbeddingTable(j.at("embeddings").at("width").get<std::size_t>());
    for (const auto& [id, row] : j.at("embeddings").at("rows").items()) {
        s.embeddings.set(id, row.get<std::vector<double>>());
    }
    const auto& prior = j.at("prior");
    s.prior.mean = prior.at("mean").get<std::vector<double>>();
    s.prior.centered = detail::matrix_from_json(prior.at("centered"));
    s.prior.nu = prior.at("nu").get<double>();
    s.prior.kappa = prior.at("kappa").get<double>();
    s.control_profile = j.at("control_profile").get<std::vector<double>>();
    const auto& pca = j.at("pca");
    s.pca.mean = pca.at("mean").get<std::vector<double>>();
    s.pca.components = detail::matrix_from_json(pca.at("components"));
    s.pca.eigenvalues = pca.at("eigenvalues").get<std::vector<double>>();
    s.pca.rank_deficient = pca.at("rank_deficient").get<bool>();
    s.entropy_band = detail::band_from_json(j.at("entropy_band"));
    s.reference_band = detail::band_from_json(j.at("reference_band"));
    if (s.pca.dim() != static_cast<std::size_t>(s.config.pca_dim) || s.prior.mean.size() != s.pca.dim()) {
        throw DataError("checkpoint: PCA and prior dimensions disagree with the config");
    }
    return { std::move(s), std::move(config) };
}

inline void save_checkpoint(const std::filesystem::path& path, const ModelState& s, const RunConfig& config, const json& extra = json::object()) {
    write_file(path, checkpoint_json(s, config, extra).dump(1) + "\n");
}

inline std::pair<ModelState, RunConfig> load_checkpoint(const std::filesystem::path& path) {
    json j;
    try {
        j = json::parse(read_file(path));
    } catch (const json::parse_error& e) {
        throw DataError(path.string() + ": " + e.what());
    }
    try {
        return checkpoint_from_json(j);
    } catch (const json::exception& e) {
        throw DataError(path.string() + ": " + e.what());
    }
}

// ---------------------------------------------------------------------------
// prediction records

/**
 * Writes `predictions.tsv` (one row per category) and `predicted_logfc.tsv` (gene-space predictions keyed by category).
 */
inline void save_predictions(const std::vector<PredictionRecord>& records, const std::vector<std::string>& genes, Split split, const std::filesystem::path& dir, const RunConfig& config) {
    const auto header = provenance_header(config);
    std::string rows = header + "perturbation\tsplit\ttier\tnu_tilde\th_tilde\tpseudo_e\treference_e\tprediction\n";
    std::string vecs = header + "perturbation";
    for (const auto& g : genes) {
        vecs += "\t" + g;
    }
    vecs += "\n";
    for (const auto& r : records) {
        rows += r.key + "\t" + to_string(split) + "\t" + std::to_string(r.tier) + "\t" + format_double(r.nu_tilde) + "\t" + format_double(r.h_tilde) + "\t" + format_double(r.confidence) + "\t" + (std::isnan(r.reference_e) ? std::string("NA") : format_double(r.reference_e)) + "\tpredicted_logfc.tsv:" + r.key + "\n";
        vecs += r.key;
        for (double v : r.predicted) {
            vecs += "\t" + format_double(v);
        }
        vecs += "\n";
    }
    write_file(dir / "predictions.tsv", rows);
    write_file(dir / "predicted_logfc.tsv", vecs);
}

/**
 * Reads prediction files and attaches truth and DEGs from `data`.
 *
 * @throws DataError if a category is not in the dataset or the gene sets differ.
 */
inline std::vector<PredictionRecord> load_predictions(const std::filesystem::path& dir, const PerturbationDataset& data, std::size_t n_degs = 20) {
    const auto rows_path = dir / "predictions.tsv";
    const auto vec_path = dir / "predicted_logfc.tsv";
    const auto rows = detail::read_tsv(rows_path);
    const auto vecs = detail::read_tsv(vec_path);
    if (rows.empty() || vecs.empty()) {
        throw DataError(dir.string() + ": empty prediction files");
    }
    const auto& rh = rows.front().second;
    const auto kc = detail::require_column(rh, "perturbation", rows_path);
    const auto tc = detail::require_column(rh, "tier", rows_path);
    const auto nc = detail::require_column(rh, "nu_tilde", rows_path);
    const auto hc = detail::require_column(rh, "h_tilde", rows_path);
    const auto pc = detail::require_column(rh, "pseudo_e", rows_path);
    const auto ec = detail::require_column(rh, "reference_e", rows_path);

    const auto& vh = vecs.front().second;
    if (vh.size() != data.genes.size() + 1) {
        throw DataError(vec_path.string() + ": " + std::to_string(vh.size() - 1) + " genes, dataset has " + std::to_string(data.genes.size()));
    }
    std::map<std::string, std::vector<double>> predicted;
    for (std::size_t r = 1; r < vecs.size(); ++r) {
        const auto& [lineno, fields] = vecs[r];
        const std::string where = vec_path.string() + ":" + std::to_string(lineno);
        if (fields.size() != vh.size()) {
            throw DataError(where + ": wrong field count");
        }
        std::vector<double> v;
        for (std::size_t i = 1; i < fields.size(); ++i) {
            v.push_back(parse_double(fields[i], where));
        }
        predicted[fields[0]] = std::move(v);
    }

    const auto index = data.index();
    const auto ctrl = control_mean(data);
    std::vector<PredictionRecord> out;
    for (std::size_t r = 1; r < rows.size(); ++r) {
        const auto& [lineno, fields] = rows[r];
        const std::string where = rows_path.string() + ":" + std::to_string(lineno);
        if (fields.size() != rh.size()) {
            throw DataError(where + ": wrong field count");
        }
        PredictionRecord rec;
        rec.key = fields[kc];
        auto it = index.find(rec.key);
        if (it == index.end() || rec.key.empty()) {
            throw DataError(where + ": perturbation " + rec.key + " not in dataset");
        }
        auto p = predicted.find(rec.key);
        if (p == predicted.end()) {
            throw DataError(where + ": no predicted vector for " + rec.key);
        }
        rec.predicted = p->second;
        rec.truth = mean_logfc(data, it->second, ctrl);
        rec.degs = select_degs(data, rec.key, std::min(n_degs, data.genes.size()));
        rec.tier = static_cast<int>(parse_double(fields[tc], where));
        rec.nu_tilde = parse_double(fields[nc], where);
        rec.h_tilde = parse_double(fields[hc], where);
        rec.confidence = parse_double(fields[pc], where);
        rec.reference_e = fields[ec] == "NA" ? std::numeric_limits<double>::quiet_NaN() : parse_double(fields[ec], where);
        if (!std::isfinite(rec.confidence)) {
            throw DataError(where + ": non-finite confidence");
        }
        out.push_back(std::move(rec));
    }
    return out;
}

}

#endif
