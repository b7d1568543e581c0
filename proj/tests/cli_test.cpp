#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include <gtest/gtest.h>
#include <nlohmann/json.hpp>

#include "cli.hpp"
#include "pymx/data.hpp"
#include "pymx/error.hpp"
#include "pymx/synthetic.hpp"
#include "run_config.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace pymx;

namespace {

struct Result {
    int code = 0;
    std::string out;
    std::string err;
};

Result pymx_run(std::vector<std::string> args) {
    std::ostringstream out, err;
    Result r;
    r.code = cli::run(args, out, err);
    r.out = out.str();
    r.err = err.str();
    return r;
}

fs::path scratch(const std::string& name) {
    auto dir = fs::temp_directory_path() / ("pymx_cli_test_" + name);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

fs::path planted_tsv(const fs::path& dir) {
    const auto path = dir / "planted.tsv";
    std::ofstream out(path);
    write_canonical_tsv(out, planted_rule_records({}));
    return path;
}

/// Run directory printed on the last line of stdout.
fs::path run_dir(const Result& r) {
    const std::string key = "run directory: ";
    const auto at = r.out.rfind(key);
    EXPECT_NE(at, std::string::npos) << r.out;
    auto line = r.out.substr(at + key.size());
    line.erase(line.find_last_not_of('\n') + 1);
    return line;
}

json read_json(const fs::path& p) {
    std::ifstream in(p);
    return json::parse(in);
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), {}};
}

std::vector<std::string> planted_train(const fs::path& dir, const fs::path& data) {
    return {"--out", dir.string(), "--set", "data.path=" + data.string(), "--set", "data.format=canonical-tsv",
            "--set", "model.max_len=20", "--set", "train.batch_size=32", "--set", "train.max_epochs=2"};
}

std::vector<std::string> cat(std::vector<std::string> a, const std::vector<std::string>& b) {
    a.insert(a.end(), b.begin(), b.end());
    return a;
}

void expect_error_line(const Result& r, int code, const std::string& prefix) {
    EXPECT_EQ(r.code, code) << r.err;
    EXPECT_EQ(r.err.rfind(prefix, 0), 0u) << r.err;
    EXPECT_EQ(std::count(r.err.begin(), r.err.end(), '\n'), 1) << r.err;
}

// Record-level brute force over a raw u.data, independent of the library reader.
std::size_t brute_force_core(const fs::path& u_data, std::size_t k) {
    std::vector<std::pair<std::string, std::string>> rows;
    std::ifstream in(u_data);
    std::string user, item, rating, ts;
    while (in >> user >> item >> rating >> ts) rows.emplace_back(user, item);
    while (true) {
        std::map<std::string, std::size_t> users, items;
        for (const auto& [u, i] : rows) ++users[u], ++items[i];
        std::vector<std::pair<std::string, std::string>> kept;
        for (const auto& r : rows) {
            if (users[r.first] >= k && items[r.second] >= k) kept.push_back(r);
        }
        if (kept.size() == rows.size()) return rows.size();
        rows = std::move(kept);
    }
}

}  // namespace

TEST(Override, DottedPathsAndValueParsing) {
    json doc = json::object();
    cli::apply_override(doc, "model.D_prime=16");
    cli::apply_override(doc, "model.activation=swish");
    cli::apply_override(doc, "ablate.seeds=[4,5]");
    cli::apply_override(doc, "data.path=some/dir=odd");
    cli::apply_override(doc, "model.D_prime=8");
    EXPECT_EQ(doc["model"]["D_prime"], 8);
    EXPECT_EQ(doc["model"]["activation"], "swish");
    EXPECT_EQ(doc["ablate"]["seeds"], json::array({4, 5}));
    EXPECT_EQ(doc["data"]["path"], "some/dir=odd");
    EXPECT_THROW(cli::apply_override(doc, "novalue"), ConfigError);
    EXPECT_THROW(cli::apply_override(doc, "=3"), ConfigError);
    EXPECT_THROW(cli::apply_override(doc, "model..D=3"), ConfigError);
    EXPECT_THROW(cli::apply_override(doc, "model.D_prime.x=3"), ConfigError);
}

TEST(RunConfigJson, RoundTripMaterialisesDefaults) {
    cli::RunConfig c;
    c.seed = 9;
    c.ablate.seeds = {1};
    c.model.D_prime = 12;
    const auto j = c.to_json();
    for (const char* section : {"data", "model", "train", "eval", "ablate", "gradcheck", "cost"}) {
        EXPECT_TRUE(j.contains(section)) << section;
    }
    const auto back = cli::RunConfig::from_json(j);
    EXPECT_EQ(back.to_json(), j);
    EXPECT_THROW(cli::RunConfig::from_json({{"optimizer", {}}}), ConfigError);
    EXPECT_THROW(cli::RunConfig::from_json({{"eval", {{"K", 5}}}}), ConfigError);
    EXPECT_THROW(cli::RunConfig::from_json({{"seed", "zero"}}), ConfigError);
}

TEST(Cli, HelpAndUsageErrors) {
    EXPECT_EQ(pymx_run({"--help"}).code, 0);
    expect_error_line(pymx_run({}), 2, "error[config]: ");
    expect_error_line(pymx_run({"frobnicate"}), 2, "error[config]: ");
    expect_error_line(pymx_run({"cost", "--seed", "minus-one"}), 2, "error[config]: ");
}

TEST(Cli, ConfigErrorsExitTwoWithFieldNames) {
    const auto dir = scratch("config");
    const auto base = std::vector<std::string>{"cost", "--out", dir.string(), "--set", "model.vocab_sizes=[50,6]"};
    auto r = pymx_run(cat(base, {"--set", "model.D_prime=64", "--set", "model.D=64"}));
    expect_error_line(r, 2, "error[config]: model.D_prime:");
    expect_error_line(pymx_run(cat(base, {"--set", "model.bogus=1"})), 2, "error[config]: model.bogus:");
    expect_error_line(pymx_run(cat(base, {"--set", "train.lr=-1"})), 2, "error[config]: train.lr:");
    expect_error_line(pymx_run(cat(base, {"--set", "eval.k=zero"})), 2, "error[config]: eval.k:");
    expect_error_line(pymx_run(cat(base, {"--set", "ablate.variants=[\"w/o head\"]"})), 2,
                      "error[config]: ablate.variants:");
    expect_error_line(pymx_run(cat(base, {"--set", "data.format=csv"})), 2, "error[config]: ");
    const auto bad = dir / "bad.json";
    std::ofstream(bad) << "{ not json";
    expect_error_line(pymx_run(cat(base, {"--config", bad.string()})), 2, "error[config]: ");
    expect_error_line(pymx_run({"eval", "--out", dir.string()}), 2, "error[config]: --checkpoint");
    // None of these created a run directory.
    for (const auto& e : fs::directory_iterator(dir)) EXPECT_FALSE(e.is_directory()) << e.path();
}

TEST(Cli, DataErrorsExitThree) {
    const auto dir = scratch("data");
    auto r = pymx_run({"prep", "--out", dir.string(), "--set", "data.path=" + (dir / "missing").string()});
    expect_error_line(r, 3, "error[data]: ");
    std::ofstream(dir / "junk.tsv") << "a\tb\tnot-a-time\nc\td\t7\n";
    r = pymx_run({"prep", "--out", dir.string(), "--set", "data.path=" + (dir / "junk.tsv").string(), "--set",
                  "data.format=canonical-tsv"});
    expect_error_line(r, 3, "error[data]: ");
    EXPECT_FALSE(fs::exists(dir / "run"));
    for (const auto& e : fs::directory_iterator(dir)) EXPECT_FALSE(e.is_directory()) << e.path();
}

TEST(Cli, PrepWritesFilteredTsvAndVocabs) {
    const auto dir = scratch("prep");
    const auto data = planted_tsv(dir);
    const auto r = pymx_run({"prep", "--out", (dir / "runs").string(), "--set", "data.path=" + data.string(), "--set",
                             "data.format=canonical-tsv", "--tag", "planted"});
    ASSERT_EQ(r.code, 0) << r.err;
    const auto run = run_dir(r);
    EXPECT_TRUE(run.filename().string().ends_with("-planted"));
    const auto reread = ingest(run / "interactions.tsv", DataFormat::canonical_tsv);
    EXPECT_EQ(reread.records, filter_k_core(planted_rule_records({}), 5));
    const auto items = read_json(run / "vocab" / "item.json");
    const auto ds = build_dataset(reread.records);
    EXPECT_EQ(items, ds.vocabs[0].to_json());
    EXPECT_TRUE(fs::exists(run / "vocab" / "decade.json"));
    EXPECT_TRUE(fs::exists(run / "config.json"));
    EXPECT_EQ(read_json(run / "prep.json")["kept_records"], reread.records.size());
}

TEST(Cli, PrepOnMovieLensMatchesBruteForceFilter) {
    const fs::path raw = fs::path(PYMX_SOURCE_DIR) / "data" / "ml-100k";
    if (!fs::exists(raw / "u.data")) GTEST_SKIP() << "ML-100K not present (scripts/fetch_ml100k.py)";
    const auto dir = scratch("prep_ml");
    const auto r = pymx_run({"prep", "--out", dir.string(), "--set", "data.path=" + raw.string()});
    ASSERT_EQ(r.code, 0) << r.err;
    std::ifstream tsv(run_dir(r) / "interactions.tsv");
    const auto lines = std::count(std::istreambuf_iterator<char>(tsv), {}, '\n');
    EXPECT_EQ(static_cast<std::size_t>(lines), brute_force_core(raw / "u.data", 5));
}

TEST(Cli, TrainWritesLayoutAndRerunsBitIdentically) {
    const auto dir = scratch("train");
    const auto data = planted_tsv(dir);
    const auto r = pymx_run(cat({"train", "--seed", "5"}, planted_train(dir / "runs", data)));
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_NE(r.out.find("epoch   2"), std::string::npos) << r.out;
    const auto run = run_dir(r);
    for (const char* f : {"config.json", "checkpoint.pymx", "train.log.jsonl", "metrics.json", "cost.json"}) {
        EXPECT_TRUE(fs::exists(run / f)) << f;
    }
    const auto config = read_json(run / "config.json");
    EXPECT_EQ(config["seed"], 5);
    EXPECT_EQ(config["model"]["D"], 64);
    EXPECT_EQ(config["model"]["vocab_sizes"].size(), 2u);
    const auto metrics = read_json(run / "metrics.json");
    EXPECT_EQ(metrics["epochs"], 2);

    // Re-running from the saved resolved config reproduces the run.
    const auto again = pymx_run({"train", "--config", (run / "config.json").string()});
    ASSERT_EQ(again.code, 0) << again.err;
    const auto rerun = run_dir(again);
    EXPECT_NE(rerun, run);
    EXPECT_EQ(read_json(rerun / "metrics.json"), metrics);
    EXPECT_EQ(slurp(rerun / "checkpoint.pymx"), slurp(run / "checkpoint.pymx"));
    EXPECT_EQ(read_json(rerun / "cost.json"), read_json(run / "cost.json"));

    // eval on the best checkpoint gives the metrics train reported.
    const auto ev = pymx_run({"eval", "--config", (run / "config.json").string(), "--checkpoint",
                              (run / "checkpoint.pymx").string()});
    ASSERT_EQ(ev.code, 0) << ev.err;
    EXPECT_EQ(read_json(run_dir(ev) / "metrics.json")["test"], metrics["test"]);

    // Resuming a finished run trains no further and keeps the best parameters.
    const auto resumed = pymx_run({"train", "--config", (run / "config.json").string(), "--checkpoint",
                                   (run / "last.pymx").string()});
    ASSERT_EQ(resumed.code, 0) << resumed.err;
    EXPECT_EQ(read_json(run_dir(resumed) / "metrics.json")["test"], metrics["test"]);
}

TEST(Cli, DivergenceExitsFour) {
    const auto dir = scratch("diverge");
    const auto data = planted_tsv(dir);
    const auto r = pymx_run(cat({"train"}, cat(planted_train(dir, data), {"--set", "train.lr=1e30"})));
    expect_error_line(r, 4, "error[divergence]: ");
    // Artifacts of the aborted run are still written.
    EXPECT_TRUE(fs::exists(run_dir(r) / "metrics.json"));
}

TEST(Cli, CorruptCheckpointExitsFive) {
    const auto dir = scratch("corrupt");
    const auto data = planted_tsv(dir);
    std::ofstream(dir / "bad.pymx") << "PYMX but not really";
    const auto r = pymx_run(cat({"eval", "--checkpoint", (dir / "bad.pymx").string()}, planted_train(dir, data)));
    expect_error_line(r, 5, "error[format]: ");
}

TEST(Cli, GradcheckPasses) {
    const auto dir = scratch("gradcheck");
    const auto r = pymx_run({"gradcheck", "--out", dir.string()});
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_NE(r.out.find("PASS over 20 seeds"), std::string::npos) << r.out;
    const auto report = read_json(run_dir(r) / "gradcheck.json");
    EXPECT_TRUE(report["passed"].get<bool>());
    EXPECT_LE(report["max_rel_error"].get<double>(), 1e-3);
}

TEST(Cli, CostReportsRatios) {
    const auto dir = scratch("cost");
    const auto r = pymx_run({"cost", "--out", dir.string(), "--set", "model.vocab_sizes=[1000,7,20]", "--set",
                             "model.max_len=48", "--set", "cost.base_macs=1000000"});
    ASSERT_EQ(r.code, 0) << r.err;
    const auto cost = read_json(run_dir(r) / "cost.json");
    EXPECT_EQ(cost["feature_block_ratio"], 0.25);
    EXPECT_EQ(cost["mixer_block_ratio"], 0.25);
    EXPECT_EQ(cost["base_macs"], 1000000);
    EXPECT_DOUBLE_EQ(cost["increment_pct_vs_base"].get<double>(),
                     100.0 * cost["encoder_macs"].get<double>() / 1e6);
}

TEST(Cli, AblateWritesTableWithSingleSeedWarning) {
    const auto dir = scratch("ablate");
    const auto data = planted_tsv(dir);
    const auto r = pymx_run(cat(cat({"ablate"}, planted_train(dir, data)),
                                {"--set", "ablate.seeds=[0]", "--set", "train.max_epochs=1"}));
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_NE(r.err.find("warning: only one seed"), std::string::npos) << r.err;
    const auto run = run_dir(r);
    const auto table = read_json(run / "ablation.json");
    ASSERT_EQ(table["rows"].size(), 4u);
    std::set<std::string> names;
    for (const auto& row : table["rows"]) names.insert(row["variant"].get<std::string>());
    EXPECT_EQ(names, (std::set<std::string>{"full", "w/o cross-behavior", "w/o cross-feature", "w/o cross-period"}));
    EXPECT_TRUE(fs::exists(run / "ablation.txt"));
    EXPECT_TRUE(fs::exists(run / "variants" / "full" / "seed0" / "train.log.jsonl"));
}
