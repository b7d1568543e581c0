#pragma once

// End-to-end finite-difference check of the model's backward pass.

#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "pymx/model.hpp"

namespace pymx {

struct GradcheckOptions {
    std::uint64_t first_seed = 0;
    int seeds = 20;
    std::int64_t batch = 3;
    double step = 1e-6;
    /// Denominator floor of the relative error, so near-zero gradients compare absolutely.
    double floor = 1e-6;
    double tolerance = 1e-3;
};

struct GradGroup {
    /// "embed", "head" or "layer<s>.<part>".
    std::string name;
    std::int64_t entries = 0;
    double max_rel_error = 0.0;
    bool passed = true;
};

struct GradcheckReport {
    std::vector<GradGroup> groups;
    double max_rel_error = 0.0;
    double tolerance = 0.0;
    int seeds = 0;
    bool passed = true;

    nlohmann::json to_json() const;
    std::string to_table() const;
};

/// L=6, D=8, D'=4, L'=3, S=2, 20 items plus a 5-value side field.
ModelConfig gradcheck_config();

/// Runs in double precision over `options.seeds` seeds, each drawing fresh
/// parameters and a random left-padded batch. Embedding padding rows are
/// constants and are skipped.
GradcheckReport gradcheck(const ModelConfig& config, const GradcheckOptions& options = {});

}  // namespace pymx
