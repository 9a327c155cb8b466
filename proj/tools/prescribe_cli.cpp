#include "prescribe/prescribe.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using namespace prescribe;

namespace {

constexpr int exit_ok = 0;
constexpr int exit_usage = 2;
constexpr int exit_data = 3;
constexpr int exit_numerical = 4;

class UsageError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct Overrides {
    std::string config_path;
    std::optional<std::uint64_t> seed;
    std::optional<double> lambda1, lambda2, lambda3, fraction;
    std::optional<int> pca_dim, latent_dim, flow_layers, epochs;
    std::vector<std::string> sets;
};

void add_config_flags(CLI::App* cmd, Overrides& o) {
    cmd->add_option("--config", o.config_path, "key = value config file")->check(CLI::ExistingFile);
    cmd->add_option("--seed", o.seed, "global seed");
    cmd->add_option("--lambda1", o.lambda1, "weight of the entropy term");
    cmd->add_option("--lambda2", o.lambda2, "weight of the ranking term");
    cmd->add_option("--lambda3", o.lambda3, "weight of the evidence regularizer");
    cmd->add_option("--pca-dim", o.pca_dim, "response dimension N");
    cmd->add_option("--latent-dim", o.latent_dim, "latent dimension D");
    cmd->add_option("--flow-layers", o.flow_layers, "radial flow layers");
    cmd->add_option("--epochs", o.epochs, "maximum epochs");
    cmd->add_option("--fraction", o.fraction, "filtering fraction");
    cmd->add_option("--set", o.sets, "extra key=value setting (repeatable)");
}

/** Defaults, then the config file, then flags. */
RunConfig effective_config(RunConfig base, const Overrides& o) {
    try {
        if (!o.config_path.empty()) {
            apply_config_text(base, read_file(o.config_path), o.config_path);
        }
        for (const auto& kv : o.sets) {
            const auto eq = kv.find('=');
            if (eq == std::string::npos) {
                throw UsageError("--set expects key=value, got '" + kv + "'");
            }
            set_config_value(base, trim(kv.substr(0, eq)), trim(kv.substr(eq + 1)));
        }
        auto set = [&](const char* key, const auto& value) {
            if (value) {
                if constexpr (std::is_same_v<std::decay_t<decltype(*value)>, double>) {
                    set_config_value(base, key, format_double(*value));
                } else {
                    set_config_value(base, key, std::to_string(*value));
                }
            }
        };
        set("seed", o.seed);
        set("lambda1", o.lambda1);
        set("lambda2", o.lambda2);
        set("lambda3", o.lambda3);
        set("pca_dim", o.pca_dim);
        set("latent_dim", o.latent_dim);
        set("flow_layers", o.flow_layers);
        set("epochs", o.epochs);
        set("fraction", o.fraction);
    } catch (const UsageError&) {
        throw;
    } catch (const std::exception& e) {
        throw UsageError(e.what());
    }
    return base;
}

void write_config_snapshot(const fs::path& out, const RunConfig& c) {
    write_file(out / "config.txt", "# tool = prescribe " + std::string(tool_version) + "\n" + dump_config(c));
}

std::string dump_json(const json& j) {
    return j.dump(2) + "\n";
}

json loss_json(const LossBreakdown<double>& b) {
    return json{ { "l1", b.l1 }, { "l2", b.l2 }, { "l3", b.l3 }, { "l4", b.l4 }, { "total", b.total } };
}

json metrics_json(const AccuracyMetrics& m) {
    return json{ { "pearson", m.pearson }, { "directional", m.directional }, { "pearson_deg", m.pearson_deg }, { "directional_deg", m.directional_deg } };
}

json optional_json(const std::optional<double>& v) {
    return v ? json(*v) : json(nullptr);
}

// ---------------------------------------------------------------------------

int cmd_synth(const RunConfig& c, const fs::path& out) {
    const auto data = generate(c.synth);
    save_dataset(data, out, c);
    write_config_snapshot(out, c);
    std::size_t controls = 0;
    for (const auto& l : data.labels) {
        controls += l.empty();
    }
    std::printf("synth: %zu cells (%zu control), %zu genes, %zu categories -> %s\n", data.cell_ids.size(), controls, data.genes.size(), data.splits.size(), out.string().c_str());
    return exit_ok;
}

int cmd_train(const RunConfig& c, const fs::path& data_dir, const fs::path& out) {
    const auto data = load_dataset(data_dir);
    const auto prepared = prepare(data, c.model, c.seed);
    fs::create_directories(out);
    write_config_snapshot(out, c);
    std::ofstream log(out / "train_log.jsonl", std::ios::binary);
    if (!log) {
        throw std::runtime_error("cannot write " + (out / "train_log.jsonl").string());
    }
    const auto result = train(
        prepared, c.train,
        [&](const EpochRecord& r) {
            json line = json::object();
            line["epoch"] = r.epoch;
            line["lr"] = r.lr;
            line["steps"] = r.steps;
            line["train"] = loss_json(r.train);
            line["val"] = loss_json(r.val);
            line["val_loss"] = r.val_loss;
            line["val_pearson"] = optional_json(r.val_pearson);
            line["val_calibration"] = optional_json(r.val_calibration);
            line["improved"] = r.improved;
            log << line.dump() << "\n";
            log.flush();
        },
        &data);

    json extra = json::object();
    extra["genes"] = data.genes;
    extra["best_epoch"] = result.best_epoch;
    save_checkpoint(out / "checkpoint.json", result.best, c, extra);

    json summary = json::object();
    summary["provenance"] = provenance_json(c);
    summary["epochs_run"] = result.history.size();
    summary["best_epoch"] = result.best_epoch;
    summary["best_val_loss"] = result.best_val_loss;
    summary["early_stopped"] = result.early_stopped;
    const auto val = predict_records(result.best, data, Split::val, &prepared.reference, c.degs);
    if (!val.empty()) {
        summary["val_accuracy"] = metrics_json(accuracy_metrics(val));
    }
    write_file(out / "summary.json", dump_json(summary));
    std::printf("train: %zu epochs, best epoch %d, best val loss %s -> %s\n", result.history.size(), result.best_epoch, format_double(result.best_val_loss).c_str(), out.string().c_str());
    return exit_ok;
}

int cmd_predict(const fs::path& checkpoint, const fs::path& data_dir, const std::string& split_name, const fs::path& out) {
    auto [state, c] = load_checkpoint(checkpoint);
    const auto data = load_dataset(data_dir);
    if (data.genes.size() != state.layout.genes) {
        throw DataError("predict: checkpoint expects " + std::to_string(state.layout.genes) + " genes, dataset has " + std::to_string(data.genes.size()));
    }
    Split split;
    try {
        split = parse_split(split_name);
    } catch (const std::exception& e) {
        throw UsageError(e.what());
    }
    for (const auto& key : data.categories(split)) {
        for (const auto& id : split_key(key)) {
            if (!state.embeddings.contains(id)) {
                throw DataError("predict: no embedding for perturbation " + id);
            }
        }
    }
    const auto reference = precompute_reference_e(data, state.pca, derive_seed(c.seed, "reference-e"), c.model.pca_dim);
    const auto records = predict_records(state, data, split, &reference, c.degs);
    fs::create_directories(out);
    save_predictions(records, data.genes, split, out, c);
    write_config_snapshot(out, c);
    std::printf("predict: %zu %s categories -> %s\n", records.size(), to_string(split).c_str(), out.string().c_str());
    return exit_ok;
}

RunConfig config_from_predictions(const fs::path& pred_dir, const Overrides& o) {
    RunConfig base;
    apply_header_config(base, pred_dir / "predictions.tsv");
    return effective_config(base, o);
}

json calibration_json(const CalibrationReport& r) {
    json bins = json::array();
    for (const auto& b : r.bins) {
        bins.push_back(json{ { "lower", b.lower }, { "upper", b.upper }, { "mean_confidence", b.mean_confidence }, { "mean_accuracy", b.mean_accuracy }, { "count", b.count } });
    }
    return json{ { "r_perf_conf", r.r_perf_conf }, { "rs_perf_conf", r.rs_perf_conf }, { "acc_perf_conf", r.acc_perf_conf }, { "ece", r.ece }, { "bins", bins } };
}

bool has_all_tiers(const std::vector<PredictionRecord>& records) {
    bool seen[3] = { false, false, false };
    for (const auto& r : records) {
        if (r.tier >= 0 && r.tier <= 2) {
            seen[r.tier] = true;
        }
    }
    return seen[0] && seen[1] && seen[2];
}

int cmd_evaluate(const RunConfig& c, const fs::path& pred_dir, const fs::path& data_dir, const fs::path& out) {
    const auto data = load_dataset(data_dir);
    const auto records = load_predictions(pred_dir, data, c.degs);
    if (records.empty()) {
        throw DataError("evaluate: no predictions");
    }
    json report = json::object();
    report["provenance"] = provenance_json(c);
    report["count"] = records.size();
    const auto metrics = accuracy_metrics(records);
    report["accuracy"] = metrics_json(metrics);
    const int bins = std::min<int>(c.calibration_bins, static_cast<int>(records.size()));
    const auto calib = calibration_curve(records, bins, c.model.pca_dim);
    report["calibration"] = calibration_json(calib);
    if (has_all_tiers(records)) {
        json tiers = json::array();
        for (const auto& t : difficulty_report(records)) {
            tiers.push_back(json{ { "tier", t.tier }, { "count", t.count }, { "mean_nu_tilde", t.mean_nu_tilde }, { "mean_confidence", t.mean_confidence }, { "mean_reference_e", t.mean_reference_e }, { "mean_accuracy", t.mean_accuracy } });
        }
        report["difficulty"] = tiers;
    }
    fs::create_directories(out);
    write_file(out / "metrics.json", dump_json(report));
    write_config_snapshot(out, c);
    std::printf("evaluate: %zu records, pearson %s, spearman(conf, acc) %s -> %s\n", records.size(), format_double(metrics.pearson).c_str(), format_double(calib.rs_perf_conf).c_str(), out.string().c_str());
    return exit_ok;
}

int cmd_filter(const RunConfig& c, const fs::path& pred_dir, const fs::path& data_dir, const fs::path& out) {
    const auto data = load_dataset(data_dir);
    const auto records = load_predictions(pred_dir, data, c.degs);
    if (records.empty()) {
        throw DataError("filter: no predictions");
    }
    const auto result = filter_bottom(records, c.fraction);
    const auto random = random_filter_baseline(records, c.fraction, c.random_repeats, c.seed);
    json report = json::object();
    report["provenance"] = provenance_json(c);
    report["fraction"] = c.fraction;
    report["dropped"] = result.dropped_keys;
    report["before"] = metrics_json(result.before);
    report["after"] = metrics_json(result.after);
    report["delta"] = metrics_json(result.delta());
    report["random"] = json{ { "repeats", random.repeats.size() }, { "mean", metrics_json(random.mean) }, { "sd", metrics_json(random.sd) } };
    report["gain_over_random"] = result.after.pearson - random.mean.pearson;
    fs::create_directories(out);
    write_file(out / "filter.json", dump_json(report));
    std::string retained = provenance_header(c) + "perturbation\tconfidence\taccuracy\n";
    for (const auto& r : result.retained) {
        retained += r.key + "\t" + format_double(r.confidence) + "\t" + format_double(record_accuracy(r)) + "\n";
    }
    write_file(out / "retained.tsv", retained);
    write_config_snapshot(out, c);
    std::printf("filter: dropped %zu of %zu, pearson %s -> %s, random %s +- %s\n", result.dropped, records.size(), format_double(result.before.pearson).c_str(), format_double(result.after.pearson).c_str(), format_double(random.mean.pearson).c_str(), format_double(random.sd.pearson).c_str());
    return exit_ok;
}

int cmd_edist(const RunConfig& c, const fs::path& data_dir, const fs::path& out) {
    const auto data = load_dataset(data_dir);
    const auto pca = fit_dataset_pca(data, static_cast<std::size_t>(c.model.pca_dim));
    const auto reference = precompute_reference_e(data, pca, derive_seed(c.seed, "reference-e"), c.model.pca_dim);
    const auto index = data.index();
    std::string table = provenance_header(c) + "perturbation\tsplit\ttier\tcells\te_distance\tdelta_xy\tsigma_x\tsigma_y\tbanded\n";
    double tier_sum[3] = { 0, 0, 0 };
    int tier_count[3] = { 0, 0, 0 };
    for (const auto& [key, st] : reference.stats) {
        const auto tier_it = data.tiers.find(key);
        const int tier = tier_it == data.tiers.end() ? -1 : tier_it->second;
        table += key + "\t" + to_string(data.splits.at(key)) + "\t" + std::to_string(tier) + "\t" + std::to_string(index.at(key).size()) + "\t" + format_double(st.e) + "\t" + format_double(st.delta_xy) + "\t" + format_double(st.sigma_x) + "\t" + format_double(st.sigma_y) + "\t" + format_double(reference.band(st.e)) + "\n";
        if (tier >= 0 && tier <= 2) {
            tier_sum[tier] += st.e;
            ++tier_count[tier];
        }
    }
    fs::create_directories(out);
    write_file(out / "edistance.tsv", table);
    write_config_snapshot(out, c);
    std::printf("edist: %zu categories -> %s\n", reference.stats.size(), out.string().c_str());
    for (int t = 0; t < 3; ++t) {
        if (tier_count[t]) {
            std::printf("  tier %d: mean E %s over %d\n", t, format_double(tier_sum[t] / tier_count[t]).c_str(), tier_count[t]);
        }
    }
    return exit_ok;
}

int cmd_sweep(const RunConfig& c, const fs::path& data_dir, const fs::path& out) {
    const auto data = load_dataset(data_dir);
    const auto prepared = prepare(data, c.model, c.seed);
    fs::create_directories(out);
    write_config_snapshot(out, c);
    std::string table = provenance_header(c) + "trial\tphase\tlambda1\tlambda2\tlambda3\tbest_epoch\tval_loss\tpearson\tdirectional\tcalibration\n";
    int n = 0;
    const auto trials = sweep(data, prepared, c.train, c.sweep, [&](const SweepTrial& t) {
        table += std::to_string(n++) + "\t" + std::to_string(t.phase) + "\t" + format_double(t.weights.lambda1) + "\t" + format_double(t.weights.lambda2) + "\t" + format_double(t.weights.lambda3) + "\t" + std::to_string(t.best_epoch) + "\t" + format_double(t.val_loss) + "\t" + format_double(t.pearson) + "\t" + format_double(t.directional) + "\t" + format_double(t.calibration) + "\n";
    });
    write_file(out / "sweep.tsv", table);
    const auto best = std::max_element(trials.begin(), trials.end(), [](const SweepTrial& a, const SweepTrial& b) { return a.pearson < b.pearson; });
    json report = json::object();
    report["provenance"] = provenance_json(c);
    report["trials"] = trials.size();
    report["expected_trials"] = sweep_trial_count(c.sweep);
    report["best"] = json{ { "phase", best->phase }, { "lambda1", best->weights.lambda1 }, { "lambda2", best->weights.lambda2 }, { "lambda3", best->weights.lambda3 }, { "pearson", best->pearson } };
    write_file(out / "sweep.json", dump_json(report));
    std::printf("sweep: %zu trials, best pearson %s (lambda1 %s, lambda2 %s, lambda3 %s) -> %s\n", trials.size(), format_double(best->pearson).c_str(), format_double(best->weights.lambda1).c_str(), format_double(best->weights.lambda2).c_str(), format_double(best->weights.lambda3).c_str(), out.string().c_str());
    return exit_ok;
}

}

int main(int argc, char** argv) {
    CLI::App app{ "Evidential perturbation-response prediction with pseudo E-distance confidence" };
    app.set_version_flag("--version", std::string("prescribe ") + tool_version);
    app.require_subcommand(1);

    Overrides o;
    std::string out, data_dir, checkpoint, pred_dir, split = "test";

    auto* synth = app.add_subcommand("synth", "generate the synthetic benchmark dataset");
    auto* train_cmd = app.add_subcommand("train", "train a model on a dataset directory");
    auto* predict = app.add_subcommand("predict", "predict one split with a checkpoint");
    auto* evaluate = app.add_subcommand("evaluate", "accuracy, calibration and difficulty report");
    auto* filter = app.add_subcommand("filter", "confidence filtering against the random baseline");
    auto* edist = app.add_subcommand("edist", "reference E-distance of every category");
    auto* sweep_cmd = app.add_subcommand("sweep", "two-phase loss-weight search");

    for (auto* cmd : { synth, train_cmd, predict, evaluate, filter, edist, sweep_cmd }) {
        cmd->add_option("--out", out, "output directory")->required();
        if (cmd != predict) {
            add_config_flags(cmd, o);
        }
    }
    for (auto* cmd : { train_cmd, predict, evaluate, filter, edist, sweep_cmd }) {
        cmd->add_option("--data", data_dir, "dataset directory")->required()->check(CLI::ExistingDirectory);
    }
    predict->add_option("--checkpoint", checkpoint, "checkpoint.json from train")->required()->check(CLI::ExistingFile);
    predict->add_option("--split", split, "train, val or test");
    for (auto* cmd : { evaluate, filter }) {
        cmd->add_option("--predictions", pred_dir, "directory written by predict")->required()->check(CLI::ExistingDirectory);
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? exit_ok : exit_usage;
    }

    try {
        if (synth->parsed()) {
            return cmd_synth(effective_config(RunConfig{}, o), out);
        }
        if (train_cmd->parsed()) {
            return cmd_train(effective_config(RunConfig{}, o), data_dir, out);
        }
        if (predict->parsed()) {
            return cmd_predict(checkpoint, data_dir, split, out);
        }
        if (evaluate->parsed()) {
            return cmd_evaluate(config_from_predictions(pred_dir, o), pred_dir, data_dir, out);
        }
        if (filter->parsed()) {
            return cmd_filter(config_from_predictions(pred_dir, o), pred_dir, data_dir, out);
        }
        if (edist->parsed()) {
            return cmd_edist(effective_config(RunConfig{}, o), data_dir, out);
        }
        if (sweep_cmd->parsed()) {
            return cmd_sweep(effective_config(RunConfig{}, o), data_dir, out);
        }
    } catch (const UsageError& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return exit_usage;
    } catch (const std::invalid_argument& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return exit_usage;
    } catch (const NumericalError& e) {
        std::cerr << "numerical error: " << e.what() << "\n";
        return exit_numerical;
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return exit_data;
    } catch (const json::exception& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return exit_data;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return exit_data;
    }
    return exit_usage;
}
