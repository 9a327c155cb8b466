#include "prescribe/prescribe.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <random>

using namespace prescribe;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
    const auto dir = fs::temp_directory_path() / ("prescribe_io_" + name);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

SynthSpec small_spec() {
    SynthSpec s;
    s.genes = 60;
    s.clusters = 3;
    s.cells_per_perturbation = 6;
    s.control_cells = 20;
    s.train_singles = 12;
    s.train_combos = 6;
    s.heldout_per_tier = 2;
    s.embed_dim = 5;
    s.pca_dim = 4;
    return s;
}

std::string expect_data_error(const std::function<void()>& f) {
    try {
        f();
    } catch (const DataError& e) {
        return e.what();
    }
    ADD_FAILURE() << "expected DataError";
    return {};
}

void replace_in_file(const fs::path& path, const std::string& from, const std::string& to) {
    auto text = read_file(path);
    const auto pos = text.find(from);
    ASSERT_NE(pos, std::string::npos);
    text.replace(pos, from.size(), to);
    write_file(path, text);
}

}

TEST(Numbers, ShortestRoundTrip) {
    std::mt19937_64 rng(1);
    std::normal_distribution<double> normal(0, 1e3);
    for (int i = 0; i < 100; ++i) {
        const double v = normal(rng);
        EXPECT_EQ(parse_double(format_double(v), "test"), v);
    }
    EXPECT_THROW(parse_double("1.5x", "here"), DataError);
    EXPECT_THROW(parse_double("", "here"), DataError);
}

TEST(Config, DumpAndReapplyIsIdentity) {
    RunConfig c;
    set_config_value(c, "lambda2", "0.25");
    set_config_value(c, "latent_dim", "12");
    set_config_value(c, "sweep.lambda1", "1e-3, 1e-2");
    set_config_value(c, "ranking", "suffix");
    set_config_value(c, "seed", "9");
    RunConfig d;
    apply_config_text(d, dump_config(c), "dump");
    EXPECT_EQ(dump_config(c), dump_config(d));
    EXPECT_EQ(d.train.loss.weights.lambda2, 0.25);
    EXPECT_EQ(d.model.latent_dim, 12);
    EXPECT_EQ(d.sweep.lambda1, (std::vector<double>{ 1e-3, 1e-2 }));
    EXPECT_EQ(d.train.seed, 9u);
    EXPECT_EQ(d.synth.seed, 9u);
}

TEST(Config, ErrorsNameSourceAndLine) {
    RunConfig c;
    const auto unknown = expect_data_error([&] { apply_config_text(c, "# comment\nlr = 0.1\nbogus = 3\n", "run.conf"); });
    EXPECT_NE(unknown.find("run.conf:3"), std::string::npos) << unknown;
    EXPECT_NE(unknown.find("bogus"), std::string::npos) << unknown;
    const auto integer = expect_data_error([&] { apply_config_text(c, "epochs = 2.5\n", "x"); });
    EXPECT_NE(integer.find("integer"), std::string::npos) << integer;
    expect_data_error([&] { apply_config_text(c, "no equals sign\n", "x"); });
}

TEST(Config, HeaderCarriesConfig) {
    const auto dir = scratch("header");
    RunConfig c;
    set_config_value(c, "lambda3", "0.004");
    set_config_value(c, "seed", "77");
    write_file(dir / "a.tsv", provenance_header(c) + "col\n1\n");
    RunConfig d;
    EXPECT_TRUE(apply_header_config(d, dir / "a.tsv"));
    EXPECT_EQ(dump_config(c), dump_config(d));
    EXPECT_EQ(provenance_json(c)["version"], tool_version);
}

TEST(Dataset, RoundTrip) {
    const auto dir = scratch("dataset");
    const auto data = generate(small_spec());
    save_dataset(data, dir, RunConfig{});
    const auto back = load_dataset(dir);
    EXPECT_EQ(back.genes, data.genes);
    EXPECT_EQ(back.cell_ids, data.cell_ids);
    ASSERT_EQ(back.labels.size(), data.labels.size());
    for (std::size_t c = 0; c < data.labels.size(); ++c) {
        EXPECT_EQ(category_key(back.labels[c]), category_key(data.labels[c])) << c;
    }
    EXPECT_EQ(back.expressions.data(), data.expressions.data());
    EXPECT_EQ(back.splits, data.splits);
    EXPECT_EQ(back.tiers, data.tiers);
    EXPECT_EQ(back.embeddings.rows(), data.embeddings.rows());
}

TEST(Dataset, SavingTwiceIsByteIdentical) {
    const auto a = scratch("bytes_a");
    const auto b = scratch("bytes_b");
    const auto data = generate(small_spec());
    save_dataset(data, a, RunConfig{});
    save_dataset(data, b, RunConfig{});
    for (const auto* f : { "expression.tsv", "labels.tsv", "embeddings.tsv", "manifest.txt" }) {
        EXPECT_EQ(read_file(a / f), read_file(b / f)) << f;
    }
}

TEST(Dataset, MissingSplitColumnIsNamed) {
    const auto dir = scratch("nosplit");
    save_dataset(generate(small_spec()), dir, RunConfig{});
    replace_in_file(dir / "labels.tsv", "\tsplit", "\tpartition");
    const auto msg = expect_data_error([&] { load_dataset(dir); });
    EXPECT_NE(msg.find("'split'"), std::string::npos) << msg;
}

TEST(Dataset, MalformedValueNamesFileAndLine) {
    const auto dir = scratch("badvalue");
    const auto data = generate(small_spec());
    save_dataset(data, dir, RunConfig{});
    auto text = read_file(dir / "expression.tsv");
    const auto line_start = text.find("\nctrl_0\t");
    ASSERT_NE(line_start, std::string::npos);
    text.insert(text.find('\t', line_start + 1) + 1, "abc");
    write_file(dir / "expression.tsv", text);
    const auto msg = expect_data_error([&] { load_dataset(dir); });
    EXPECT_NE(msg.find("expression.tsv"), std::string::npos) << msg;
}

TEST(Dataset, MissingDirectory) {
    expect_data_error([] { load_dataset(fs::temp_directory_path() / "prescribe_io_does_not_exist"); });
}

TEST(Checkpoint, RoundTripPreservesForward) {
    const auto dir = scratch("checkpoint");
    const auto data = generate(small_spec());
    ModelConfig mc;
    mc.pca_dim = 4;
    mc.latent_dim = 3;
    mc.hidden_dim = 6;
    mc.flow_layers = 2;
    const auto prep = prepare(data, mc, 3);
    RunConfig rc;
    rc.model = mc;
    save_checkpoint(dir / "ck.json", prep.state, rc);
    const auto [state, config] = load_checkpoint(dir / "ck.json");
    EXPECT_EQ(state.params, prep.state.params);
    EXPECT_EQ(dump_config(config), dump_config(rc));
    const auto key = data.categories(Split::test).front();
    const auto a = forward(split_key(key), prep.state);
    const auto b = forward(split_key(key), state);
    EXPECT_EQ(a.pseudo_e, b.pseudo_e);
    EXPECT_EQ(a.posterior.mu0, b.posterior.mu0);
    EXPECT_EQ(predicted_logfc(a, prep.state), predicted_logfc(b, state));
}

TEST(Checkpoint, RejectsForeignFormat) {
    const auto dir = scratch("foreign");
    write_file(dir / "ck.json", "{\"format\": \"something-else\"}");
    EXPECT_THROW(load_checkpoint(dir / "ck.json"), DataError);
}

TEST(Predictions, RoundTrip) {
    const auto dir = scratch("predictions");
    const auto data = generate(small_spec());
    ModelConfig mc;
    mc.pca_dim = 4;
    mc.latent_dim = 3;
    mc.hidden_dim = 6;
    mc.flow_layers = 1;
    const auto prep = prepare(data, mc, 3);
    const auto recs = predict_records(prep.state, data, Split::test, &prep.reference, 10);
    RunConfig rc;
    rc.degs = 10;
    save_predictions(recs, data.genes, Split::test, dir, rc);
    const auto back = load_predictions(dir, data, 10);
    ASSERT_EQ(back.size(), recs.size());
    for (std::size_t i = 0; i < recs.size(); ++i) {
        EXPECT_EQ(back[i].key, recs[i].key);
        EXPECT_EQ(back[i].confidence, recs[i].confidence);
        EXPECT_EQ(back[i].nu_tilde, recs[i].nu_tilde);
        EXPECT_EQ(back[i].tier, recs[i].tier);
        EXPECT_EQ(back[i].reference_e, recs[i].reference_e);
        EXPECT_EQ(back[i].predicted, recs[i].predicted);
        EXPECT_EQ(back[i].truth, recs[i].truth);
        EXPECT_EQ(back[i].degs, recs[i].degs);
    }
}
