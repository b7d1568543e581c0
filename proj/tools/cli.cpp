#include "cli.hpp"

#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <optional>

#include <CLI11.hpp>
#include <fmt/chrono.h>
#include <fmt/format.h>
#include <fmt/ostream.h>
#include <nlohmann/json.hpp>

#include "pymx/ablation.hpp"
#include "pymx/checkpoint.hpp"
#include "pymx/data.hpp"
#include "pymx/error.hpp"
#include "pymx/evaluator.hpp"
#include "pymx/gradcheck.hpp"
#include "pymx/trainer.hpp"
#include "run_config.hpp"

namespace pymx::cli {

namespace {

namespace fs = std::filesystem;
using nlohmann::json;

struct Invocation {
    std::string command;
    std::optional<fs::path> config_path;
    std::vector<std::string> overrides;
    std::optional<std::uint64_t> seed;
    std::optional<std::string> out;
    std::optional<fs::path> checkpoint;
    std::optional<std::string> tag;
};

struct Context {
    RunConfig config;
    Invocation inv;
    fs::path dir;
    std::ostream& out;
    std::ostream& err;
};

fs::path make_run_dir(const fs::path& base, const std::string& tag) {
    const auto now = std::time(nullptr);
    const auto stem = fmt::format("{:%Y%m%d-%H%M%S}-{}", fmt::localtime(now), tag);
    auto dir = base / stem;
    for (int n = 2; fs::exists(dir); ++n) dir = base / fmt::format("{}-{}", stem, n);
    fs::create_directories(dir);
    return dir;
}

void write_json(const fs::path& path, const json& j) {
    std::ofstream f(path);
    if (!f) throw DataError(fmt::format("cannot write '{}'", path.string()));
    f << j.dump(2) << '\n';
}

void save_config(const Context& ctx, const std::optional<ModelConfig>& resolved = std::nullopt) {
    auto j = ctx.config.to_json();
    if (resolved) j["model"] = resolved->to_json();
    write_json(ctx.dir / "config.json", j);
}

PreparedData load_data(const Context& ctx) {
    const auto& d = ctx.config.data;
    auto data = prepare_dataset(d.path, parse_data_format(d.format), static_cast<std::size_t>(d.min_core));
    for (const auto& w : data.warnings) ctx.err << "warning: " << w << '\n';
    fmt::print(ctx.out, "data: {} users, {} items, {} interactions, {} training examples\n",
               data.dataset.users.size(), data.dataset.num_items() - 2, data.dataset.num_interactions(),
               data.splits.train.size());
    return data;
}

EvalOptions eval_options(const RunConfig& c) {
    auto e = c.eval;
    e.seed = c.seed;
    return e;
}

void print_report(std::ostream& out, std::string_view split, const MetricReport& r) {
    fmt::print(out, "{:<5} HR@{k} {:.4f}  NDCG@{k} {:.4f}  MRR@{k} {:.4f}  ({} users)\n", split, r.hr, r.ndcg, r.mrr,
               r.users, fmt::arg("k", r.k));
}

int cmd_prep(Context& ctx) {
    auto data = load_data(ctx);
    save_config(ctx);
    {
        std::ofstream tsv(ctx.dir / "interactions.tsv");
        if (!tsv) throw DataError("cannot write interactions.tsv");
        write_canonical_tsv(tsv, data.kept);
    }
    fs::create_directories(ctx.dir / "vocab");
    for (const auto& v : data.dataset.vocabs) write_json(ctx.dir / "vocab" / (v.name() + ".json"), v.to_json());
    write_json(ctx.dir / "prep.json", {{"lines", data.lines},
                                       {"malformed", data.malformed},
                                       {"records", data.raw_records},
                                       {"kept_records", data.kept.size()},
                                       {"users", data.dataset.users.size()},
                                       {"dropped_users", data.splits.dropped_users},
                                       {"fields", data.dataset.field_names},
                                       {"vocab_sizes", data.dataset.vocab_sizes()},
                                       {"warnings", data.warnings}});
    fmt::print(ctx.out, "wrote {} interactions to {}\n", data.kept.size(), (ctx.dir / "interactions.tsv").string());
    return 0;
}

int cmd_train(Context& ctx) {
    auto data = load_data(ctx);
    auto train = ctx.config.train;
    train.eval.threads = ctx.config.eval.threads;
    train.eval.batch_size = ctx.config.eval.batch_size;

    std::optional<Trainer> trainer;
    if (ctx.inv.checkpoint) {
        const auto last = load_checkpoint(*ctx.inv.checkpoint);
        std::optional<Checkpoint> best;
        const auto sibling = ctx.inv.checkpoint->parent_path() / "checkpoint.pymx";
        if (fs::exists(sibling) && !fs::equivalent(sibling, *ctx.inv.checkpoint)) best = load_checkpoint(sibling);
        trainer.emplace(Trainer::resume(data.dataset, data.splits, last, best));
        fmt::print(ctx.out, "resuming after epoch {}\n", trainer->epoch());
    } else {
        trainer.emplace(data.dataset, data.splits, ctx.config.model.resolved(data.dataset.vocab_sizes()), train,
                        ctx.config.seed);
    }
    save_config(ctx, trainer->model().config());
    trainer->set_output_dir(ctx.dir);
    trainer->on_epoch([&](const EpochLog& e) {
        fmt::print(ctx.out, "epoch {:>3}  loss {:.4f}  valid HR@10 {:.4f} NDCG@10 {:.4f} MRR@10 {:.4f}  {:.1f}s\n",
                   e.epoch, e.train_loss, e.valid_hr10, e.valid_ndcg10, e.valid_mrr10, e.wall_seconds);
        ctx.out.flush();
    });
    const auto result = trainer->train();

    const auto best = trainer->best_model();
    const auto opts = eval_options(ctx.config);
    const auto test = evaluate_ranking(best, data.dataset, data.splits.test, opts);
    const auto valid = evaluate_ranking(best, data.dataset, data.splits.valid, opts);
    write_json(ctx.dir / "metrics.json", {{"test", test.to_json()},
                                          {"valid", valid.to_json()},
                                          {"best_epoch", result.best_epoch},
                                          {"epochs", trainer->epoch()},
                                          {"diverged", result.diverged}});
    write_json(ctx.dir / "cost.json", count_cost(best.config()).to_json());
    fmt::print(ctx.out, "best epoch {}\n", result.best_epoch);
    print_report(ctx.out, "valid", valid);
    print_report(ctx.out, "test", test);
    if (result.diverged) throw DivergenceError(result.divergence_message);
    return 0;
}

int cmd_eval(Context& ctx) {
    if (!ctx.inv.checkpoint) throw ConfigError("--checkpoint: eval needs a checkpoint to score");
    const auto model = model_from_checkpoint(load_checkpoint(*ctx.inv.checkpoint));
    auto data = load_data(ctx);
    save_config(ctx, model.config());
    if (model.config().vocab_sizes != data.dataset.vocab_sizes()) {
        throw ConfigError(fmt::format("model.vocab_sizes: checkpoint expects {}, dataset has {}",
                                      json(model.config().vocab_sizes).dump(),
                                      json(data.dataset.vocab_sizes()).dump()));
    }
    const auto opts = eval_options(ctx.config);
    const auto test = evaluate_ranking(model, data.dataset, data.splits.test, opts);
    const auto valid = evaluate_ranking(model, data.dataset, data.splits.valid, opts);
    write_json(ctx.dir / "metrics.json",
               {{"test", test.to_json()}, {"valid", valid.to_json()}, {"checkpoint", ctx.inv.checkpoint->string()}});
    print_report(ctx.out, "valid", valid);
    print_report(ctx.out, "test", test);
    return 0;
}

int cmd_gradcheck(Context& ctx) {
    save_config(ctx);
    const auto& g = ctx.config.gradcheck;
    GradcheckOptions o;
    o.first_seed = ctx.config.seed;
    o.seeds = g.seeds;
    o.batch = g.batch;
    o.step = g.step;
    o.tolerance = g.tolerance;
    const auto report = gradcheck(gradcheck_config(), o);
    write_json(ctx.dir / "gradcheck.json", report.to_json());
    ctx.out << report.to_table();
    if (!report.passed) {
        throw Error(ErrorKind::internal, fmt::format("gradient check failed: max rel. err {:.3e} > {:.0e}",
                                                     report.max_rel_error, report.tolerance));
    }
    return 0;
}

int cmd_ablate(Context& ctx) {
    auto data = load_data(ctx);
    save_config(ctx);
    std::vector<Variant> variants;
    for (const auto& name : ctx.config.ablate.variants) variants.push_back(standard_variant(ctx.config.model, name));
    AblationOptions o;
    o.seeds = ctx.config.ablate.seeds;
    o.train = ctx.config.train;
    o.train.eval.threads = ctx.config.eval.threads;
    o.train.eval.batch_size = ctx.config.eval.batch_size;
    o.eval = eval_options(ctx.config);
    o.out_dir = ctx.dir / "variants";
    o.on_run = [&](const std::string& name, const SeedRun& r) {
        if (r.diverged) {
            fmt::print(ctx.out, "{:<20} seed {:<4} diverged: {}\n", name, r.seed, r.message);
        } else {
            fmt::print(ctx.out, "{:<20} seed {:<4} best epoch {:>3}  test MRR@{} {:.4f}\n", name, r.seed,
                       r.best_epoch, r.test.k, r.test.mrr);
        }
        ctx.out.flush();
    };
    const auto table = compare_variants(data.dataset, data.splits, variants, o);
    for (const auto& w : table.warnings) ctx.err << "warning: " << w << '\n';
    write_json(ctx.dir / "ablation.json", table.to_json());
    std::ofstream(ctx.dir / "ablation.txt") << table.to_table();
    ctx.out << '\n' << table.to_table();
    return 0;
}

int cmd_cost(Context& ctx) {
    auto model = ctx.config.model;
    if (model.vocab_sizes.empty()) {
        model = model.resolved(load_data(ctx).dataset.vocab_sizes());
    } else {
        model = model.resolved(model.vocab_sizes);
    }
    save_config(ctx, model);
    auto report = count_cost(model);
    if (ctx.config.cost.base_macs > 0) report.base_macs = ctx.config.cost.base_macs;
    write_json(ctx.dir / "cost.json", report.to_json());
    ctx.out << report.to_table();
    return 0;
}

std::string one_line(std::string s) {
    for (auto& c : s) {
        if (c == '\n' || c == '\r') c = ' ';
    }
    return s;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app("Pyramid mixer sequential recommender", "pymx");
    app.require_subcommand(1);
    Invocation inv;
    std::string config_path, out_dir, checkpoint, tag;
    std::uint64_t seed = 0;

    const std::vector<std::pair<const char*, const char*>> commands = {
        {"prep", "Filter a raw interaction log and write canonical TSV plus vocabularies"},
        {"train", "Train a model and write checkpoint, log, metrics and cost"},
        {"eval", "Score a checkpoint on the validation and test splits"},
        {"gradcheck", "Finite-difference check of every gradient on a tiny model"},
        {"ablate", "Train the ablation variants over several seeds"},
        {"cost", "Closed-form parameter and multiply-accumulate counts"},
    };
    for (const auto& [name, help] : commands) {
        auto* sub = app.add_subcommand(name, help);
        sub->add_option("--config", config_path, "JSON run configuration")->check(CLI::ExistingFile);
        sub->add_option("--set", inv.overrides, "Override a config field, e.g. model.D_prime=16")
            ->allow_extra_args(false)
            ->take_all();
        sub->add_option("--seed", seed, "Random seed");
        sub->add_option("--out", out_dir, "Base directory for run outputs");
        sub->add_option("--tag", tag, "Run directory suffix (defaults to the command)");
        sub->add_option("--checkpoint", checkpoint, "Checkpoint to evaluate, or to resume training from");
        sub->callback([&inv, name = std::string(name)] { inv.command = name; });
    }

    try {
        std::vector<std::string> reversed(args.rbegin(), args.rend());
        app.parse(reversed);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e, out, err);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e, out, err);
    } catch (const CLI::ParseError& e) {
        err << "error[config]: " << one_line(e.what()) << '\n';
        return exit_code(ErrorKind::config);
    }
    auto* sub = app.get_subcommands().front();
    if (sub->count("--config")) inv.config_path = config_path;
    if (sub->count("--seed")) inv.seed = seed;
    if (sub->count("--out")) inv.out = out_dir;
    if (sub->count("--checkpoint")) inv.checkpoint = checkpoint;
    if (sub->count("--tag")) inv.tag = tag;

    std::optional<fs::path> dir;
    // A run that fails before writing anything leaves no directory behind.
    auto discard_empty = [&] {
        std::error_code ec;
        if (!dir) return;
        if (fs::is_empty(*dir, ec)) {
            fs::remove(*dir, ec);
        } else {
            out << "run directory: " << dir->string() << '\n';
        }
    };
    try {
        auto config = load_run_config(inv.config_path, inv.overrides, inv.seed, inv.out);
        if (inv.tag) config.tag = *inv.tag;
        if (config.tag.find('/') != std::string::npos) throw ConfigError("tag: must not contain '/'");
        dir = make_run_dir(config.out, config.tag.empty() ? inv.command : config.tag);
        Context ctx{std::move(config), inv, *dir, out, err};
        int code = 0;
        if (inv.command == "prep") code = cmd_prep(ctx);
        if (inv.command == "train") code = cmd_train(ctx);
        if (inv.command == "eval") code = cmd_eval(ctx);
        if (inv.command == "gradcheck") code = cmd_gradcheck(ctx);
        if (inv.command == "ablate") code = cmd_ablate(ctx);
        if (inv.command == "cost") code = cmd_cost(ctx);
        out << "run directory: " << dir->string() << '\n';
        return code;
    } catch (const Error& e) {
        discard_empty();
        err << "error[" << to_string(e.kind()) << "]: " << one_line(e.what()) << '\n';
        return exit_code(e.kind());
    } catch (const fs::filesystem_error& e) {
        discard_empty();
        err << "error[data]: " << one_line(e.what()) << '\n';
        return exit_code(ErrorKind::data);
    } catch (const std::exception& e) {
        discard_empty();
        err << "error[internal]: " << one_line(e.what()) << '\n';
        return exit_code(ErrorKind::internal);
    }
}

}  // namespace pymx::cli
