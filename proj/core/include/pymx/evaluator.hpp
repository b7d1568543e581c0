#pragma once

// Top-K ranking metrics and closed-form cost accounting.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "pymx/data.hpp"
#include "pymx/model.hpp"

namespace pymx {

double hit_rate_at(std::int64_t rank, int k) noexcept;
/// 1 / log2(rank + 1) inside the cutoff.
double ndcg_at(std::int64_t rank, int k) noexcept;
double mrr_at(std::int64_t rank, int k) noexcept;

struct MetricReport {
    int k = 10;
    double hr = 0.0;
    double ndcg = 0.0;
    double mrr = 0.0;
    std::size_t users = 0;

    nlohmann::json to_json() const;
};

MetricReport aggregate(std::span<const std::int64_t> ranks, int k);

struct RankResult {
    std::int32_t user = 0;
    std::int64_t rank = 0;
    std::int64_t candidates = 0;
};

/// 1-based rank of `target` among candidate items. Candidates are indices >= 2
/// not flagged in `excluded`; ties go to the lower index.
std::int64_t rank_of(std::span<const float> scores, std::int32_t target, std::span<const std::uint8_t> excluded);

struct EvalOptions {
    int k = 10;
    /// 0 reads PYMX_THREADS, falling back to the hardware thread count.
    int threads = 0;
    std::int64_t batch_size = 256;
    /// 0 ranks against every item; n > 0 ranks against n sampled unseen items.
    std::int64_t negatives = 0;
    std::uint64_t seed = 0;
};

int resolve_threads(int requested);

/// Scores each example's context and ranks its target, excluding the items the
/// user interacted with before the target position (the target itself is
/// always a candidate).
std::vector<RankResult> rank_targets(const PyramidMixer<float>& model, const Dataset& ds,
                                     std::span<const Example> examples, const EvalOptions& options = {});

MetricReport evaluate_ranking(const PyramidMixer<float>& model, const Dataset& ds, std::span<const Example> examples,
                              const EvalOptions& options = {});

struct ModuleCost {
    std::string name;
    std::int64_t params = 0;
    std::int64_t macs = 0;
};

struct CostReport {
    /// Per sub-module, forward pass of one sequence of length max_len.
    std::vector<ModuleCost> modules;
    std::int64_t embedding_params = 0;
    std::int64_t total_params = 0;
    std::int64_t total_macs = 0;
    /// Mixer blocks, gates and period scaling: what the encoder adds on top of
    /// embedding lookup, pooling head and item scoring.
    std::int64_t encoder_params = 0;
    std::int64_t encoder_macs = 0;
    std::int64_t mixer_block_macs = 0;
    std::int64_t feature_block_macs = 0;
    std::int64_t behavior_block_macs = 0;
    /// Same config with every latent width equal to its axis width.
    std::int64_t dense_total_macs = 0;
    std::int64_t dense_encoder_macs = 0;
    std::int64_t dense_encoder_params = 0;
    std::int64_t dense_mixer_block_macs = 0;
    std::int64_t dense_feature_block_macs = 0;
    /// Cost of the model without its encoder, the reference for increments.
    std::int64_t base_macs = 0;
    std::int64_t base_params = 0;

    double mixer_block_ratio() const;
    double feature_block_ratio() const;
    /// encoder_macs / dense_encoder_macs.
    double increment_ratio() const;

    nlohmann::json to_json() const;
    std::string to_table() const;
};

CostReport count_cost(const ModelConfig& config);

}  // namespace pymx
