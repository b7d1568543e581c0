#include "pymx/ablation.hpp"

#include <algorithm>
#include <cmath>

#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include "pymx/error.hpp"

namespace pymx {

namespace {

struct MeanStd {
    double mean = 0.0;
    double std = 0.0;
};

MeanStd mean_std(const std::vector<double>& xs) {
    MeanStd out;
    if (xs.empty()) return out;
    for (auto x : xs) out.mean += x;
    out.mean /= static_cast<double>(xs.size());
    if (xs.size() < 2) return out;
    double ss = 0.0;
    for (auto x : xs) ss += (x - out.mean) * (x - out.mean);
    out.std = std::sqrt(ss / static_cast<double>(xs.size() - 1));
    return out;
}

void summarise(VariantRow& row) {
    std::vector<double> hr, ndcg, mrr;
    for (const auto& r : row.runs) {
        if (r.diverged) continue;
        hr.push_back(r.test.hr);
        ndcg.push_back(r.test.ndcg);
        mrr.push_back(r.test.mrr);
    }
    auto h = mean_std(hr), n = mean_std(ndcg), m = mean_std(mrr);
    row.mean_hr = h.mean;
    row.std_hr = h.std;
    row.mean_ndcg = n.mean;
    row.std_ndcg = n.std;
    row.mean_mrr = m.mean;
    row.std_mrr = m.std;
}

}  // namespace

std::vector<Variant> standard_variants(const ModelConfig& base) {
    std::vector<Variant> out;
    auto full = base;
    full.cross_behavior = full.cross_feature = full.pyramid = true;
    out.push_back({"full", full});
    auto v = full;
    v.cross_behavior = false;
    out.push_back({"w/o cross-behavior", v});
    v = full;
    v.cross_feature = false;
    out.push_back({"w/o cross-feature", v});
    v = full;
    v.pyramid = false;
    out.push_back({"w/o cross-period", v});
    return out;
}

Variant standard_variant(const ModelConfig& base, std::string_view name) {
    for (auto& v : standard_variants(base)) {
        if (v.name == name) return v;
    }
    throw ConfigError(fmt::format(
        "ablate.variants: unknown variant '{}' (expected full, w/o cross-behavior, w/o cross-feature or "
        "w/o cross-period)",
        name));
}

AblationTable compare_variants(const Dataset& ds, const Splits& splits, std::span<const Variant> variants,
                               const AblationOptions& options) {
    if (variants.empty()) throw ConfigError("ablate.variants: at least one variant is required");
    if (options.seeds.empty()) throw ConfigError("ablate.seeds: at least one seed is required");
    if (splits.test.empty()) throw DataError("test split is empty");

    AblationTable table;
    table.k = options.eval.k;
    table.seeds = options.seeds;
    if (options.seeds.size() == 1) {
        table.warnings.push_back("only one seed: standard deviations are reported as 0");
    }
    // Resolve everything first so a bad variant fails before any training.
    std::vector<ModelConfig> configs;
    for (const auto& v : variants) configs.push_back(v.model.resolved(ds.vocab_sizes()));

    for (std::size_t i = 0; i < variants.size(); ++i) {
        VariantRow row;
        row.name = variants[i].name;
        for (auto seed : options.seeds) {
            SeedRun run;
            run.seed = seed;
            Trainer trainer(ds, splits, configs[i], options.train, seed);
            if (options.out_dir) {
                std::string dir = row.name;
                std::replace(dir.begin(), dir.end(), '/', '-');
                std::replace(dir.begin(), dir.end(), ' ', '_');
                trainer.set_output_dir(*options.out_dir / dir / fmt::format("seed{}", seed));
            }
            const auto result = trainer.train();
            run.best_epoch = result.best_epoch;
            run.epochs = static_cast<std::int64_t>(result.log.size());
            run.diverged = result.diverged;
            run.message = result.divergence_message;
            if (!run.diverged) run.test = evaluate_ranking(trainer.best_model(), ds, splits.test, options.eval);
            if (run.diverged) {
                row.failed = true;
                table.warnings.push_back(fmt::format("{} seed {} diverged: {}", row.name, seed, run.message));
            }
            if (options.on_run) options.on_run(row.name, run);
            row.runs.push_back(std::move(run));
        }
        summarise(row);
        table.rows.push_back(std::move(row));
    }
    return table;
}

const VariantRow& AblationTable::row(std::string_view name) const {
    for (const auto& r : rows) {
        if (r.name == name) return r;
    }
    throw ContractError(fmt::format("ablation table has no row '{}'", name));
}

nlohmann::json AblationTable::to_json() const {
    nlohmann::json j = {{"k", k}, {"seeds", seeds}, {"warnings", warnings}, {"rows", nlohmann::json::array()}};
    for (const auto& r : rows) {
        nlohmann::json runs = nlohmann::json::array();
        for (const auto& s : r.runs) {
            nlohmann::json run = {{"seed", s.seed},
                                  {"best_epoch", s.best_epoch},
                                  {"epochs", s.epochs},
                                  {"diverged", s.diverged}};
            if (s.diverged) {
                run["message"] = s.message;
            } else {
                run["test"] = s.test.to_json();
            }
            runs.push_back(std::move(run));
        }
        j["rows"].push_back({{"variant", r.name},
                             {"failed", r.failed},
                             {"hr", {{"mean", r.mean_hr}, {"std", r.std_hr}}},
                             {"ndcg", {{"mean", r.mean_ndcg}, {"std", r.std_ndcg}}},
                             {"mrr", {{"mean", r.mean_mrr}, {"std", r.std_mrr}}},
                             {"runs", std::move(runs)}});
    }
    return j;
}

std::string AblationTable::to_table() const {
    std::string out = fmt::format("{:<20} {:>17} {:>17} {:>17}  {}\n", "variant", fmt::format("HR@{}", k),
                                  fmt::format("NDCG@{}", k), fmt::format("MRR@{}", k), "status");
    for (const auto& r : rows) {
        out += fmt::format("{:<20} {:>8.4f}±{:<8.4f} {:>8.4f}±{:<8.4f} {:>8.4f}±{:<8.4f}  {}\n", r.name, r.mean_hr,
                           r.std_hr, r.mean_ndcg, r.std_ndcg, r.mean_mrr, r.std_mrr, r.failed ? "failed" : "ok");
    }
    for (const auto& w : warnings) out += "warning: " + w + "\n";
    return out;
}

std::vector<OrderingCheck> check_ordering(const AblationTable& table, std::string_view reference) {
    const auto& ref = table.row(reference);
    std::vector<OrderingCheck> out;
    for (const auto& r : table.rows) {
        if (r.name == reference) continue;
        OrderingCheck c;
        c.variant = r.name;
        c.gap = ref.mean_mrr - r.mean_mrr;
        c.spread = std::max(ref.std_mrr, r.std_mrr);
        c.holds = !ref.failed && c.gap >= 0.0;
        c.flagged = std::abs(c.gap) <= c.spread;
        out.push_back(c);
    }
    return out;
}

}  // namespace pymx
