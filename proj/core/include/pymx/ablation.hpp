#pragma once

// Multi-seed training sweeps over model variants.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "pymx/data.hpp"
#include "pymx/evaluator.hpp"
#include "pymx/model.hpp"
#include "pymx/trainer.hpp"

namespace pymx {

struct Variant {
    std::string name;
    ModelConfig model;
};

/// full, w/o cross-behavior, w/o cross-feature, w/o cross-period.
std::vector<Variant> standard_variants(const ModelConfig& base);

/// Looks a variant up by its name in standard_variants(); ConfigError otherwise.
Variant standard_variant(const ModelConfig& base, std::string_view name);

struct SeedRun {
    std::uint64_t seed = 0;
    MetricReport test;
    std::int64_t best_epoch = 0;
    std::int64_t epochs = 0;
    bool diverged = false;
    std::string message;
};

struct VariantRow {
    std::string name;
    std::vector<SeedRun> runs;
    /// Any seed diverged; statistics then cover the completed seeds only.
    bool failed = false;
    double mean_hr = 0.0, mean_ndcg = 0.0, mean_mrr = 0.0;
    /// Sample standard deviation across seeds; 0 for a single seed.
    double std_hr = 0.0, std_ndcg = 0.0, std_mrr = 0.0;
};

struct AblationTable {
    int k = 10;
    std::vector<std::uint64_t> seeds;
    std::vector<VariantRow> rows;
    std::vector<std::string> warnings;

    const VariantRow& row(std::string_view name) const;
    nlohmann::json to_json() const;
    std::string to_table() const;
};

struct AblationOptions {
    std::vector<std::uint64_t> seeds{0, 1, 2};
    TrainConfig train;
    /// Test-split evaluation of each run's best-validation parameters.
    EvalOptions eval;
    /// Per-run checkpoints and logs go to <out_dir>/<variant>/seed<N> when set.
    std::optional<std::filesystem::path> out_dir;
    std::function<void(const std::string& variant, const SeedRun& run)> on_run;
};

/// Trains every variant under every seed on the same data, then evaluates on
/// the test split. Configs are resolved against the dataset's vocabularies.
AblationTable compare_variants(const Dataset& ds, const Splits& splits, std::span<const Variant> variants,
                               const AblationOptions& options);

struct OrderingCheck {
    std::string variant;
    /// reference mean MRR minus the variant's.
    double gap = 0.0;
    /// Larger of the two rows' MRR standard deviations.
    double spread = 0.0;
    bool holds = false;
    /// The gap is within one standard deviation.
    bool flagged = false;
};

/// Compares the reference row's mean MRR against every other row.
std::vector<OrderingCheck> check_ordering(const AblationTable& table, std::string_view reference = "full");

}  // namespace pymx
