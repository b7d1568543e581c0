#pragma once

// The JSON run configuration shared by every subcommand.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "pymx/evaluator.hpp"
#include "pymx/model.hpp"
#include "pymx/trainer.hpp"

namespace pymx::cli {

struct DataSection {
    std::string path = "data/ml-100k";
    std::string format = "movielens-100k";
    std::int64_t min_core = 5;
};

struct AblateSection {
    std::vector<std::string> variants{"full", "w/o cross-behavior", "w/o cross-feature", "w/o cross-period"};
    std::vector<std::uint64_t> seeds{0, 1, 2};
};

struct GradcheckSection {
    int seeds = 20;
    std::int64_t batch = 3;
    double step = 1e-6;
    double tolerance = 1e-3;
};

struct CostSection {
    /// Reference MACs for the percentage increments; 0 uses the model
    /// without its encoder.
    std::int64_t base_macs = 0;
};

struct RunConfig {
    std::uint64_t seed = 0;
    std::string out = "run";
    std::string tag;
    DataSection data;
    ModelConfig model;
    TrainConfig train;
    /// Test evaluation; validation during training uses the same options.
    EvalOptions eval;
    AblateSection ablate;
    GradcheckSection gradcheck;
    CostSection cost;

    nlohmann::json to_json() const;
    /// Rejects unknown keys at every level; missing keys keep their defaults.
    static RunConfig from_json(const nlohmann::json& j);
    /// Everything that can be checked without the dataset.
    void validate() const;
};

/// Sets a dotted path such as "model.D_prime=16" in `doc`. The value is read
/// as JSON when it parses and as a plain string otherwise.
void apply_override(nlohmann::json& doc, std::string_view assignment);

/// File (if any), then overrides in order, then the dedicated flags.
RunConfig load_run_config(const std::optional<std::filesystem::path>& file, std::span<const std::string> overrides,
                          std::optional<std::uint64_t> seed = std::nullopt,
                          std::optional<std::string> out = std::nullopt);

}  // namespace pymx::cli
