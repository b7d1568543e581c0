#include "pymx/evaluator.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <random>
#include <thread>

#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include "pymx/error.hpp"

namespace pymx {

double hit_rate_at(std::int64_t rank, int k) noexcept { return rank >= 1 && rank <= k ? 1.0 : 0.0; }

double ndcg_at(std::int64_t rank, int k) noexcept {
    return rank >= 1 && rank <= k ? 1.0 / std::log2(static_cast<double>(rank) + 1.0) : 0.0;
}

double mrr_at(std::int64_t rank, int k) noexcept {
    return rank >= 1 && rank <= k ? 1.0 / static_cast<double>(rank) : 0.0;
}

nlohmann::json MetricReport::to_json() const {
    return {{"k", k}, {"hr", hr}, {"ndcg", ndcg}, {"mrr", mrr}, {"users", users}};
}

MetricReport aggregate(std::span<const std::int64_t> ranks, int k) {
    MetricReport r;
    r.k = k;
    r.users = ranks.size();
    if (ranks.empty()) return r;
    for (auto rank : ranks) {
        r.hr += hit_rate_at(rank, k);
        r.ndcg += ndcg_at(rank, k);
        r.mrr += mrr_at(rank, k);
    }
    const auto n = static_cast<double>(ranks.size());
    r.hr /= n;
    r.ndcg /= n;
    r.mrr /= n;
    return r;
}

std::int64_t rank_of(std::span<const float> scores, std::int32_t target, std::span<const std::uint8_t> excluded) {
    const float t = scores[static_cast<std::size_t>(target)];
    std::int64_t rank = 1;
    for (std::int32_t i = 2; i < static_cast<std::int32_t>(scores.size()); ++i) {
        if (i == target || excluded[static_cast<std::size_t>(i)]) continue;
        const float s = scores[static_cast<std::size_t>(i)];
        if (s > t || (s == t && i < target)) ++rank;
    }
    return rank;
}

int resolve_threads(int requested) {
    if (requested > 0) return requested;
    if (const char* env = std::getenv("PYMX_THREADS")) {
        const int n = std::atoi(env);
        if (n > 0) return n;
    }
    return std::max(1u, std::thread::hardware_concurrency());
}

namespace {

void rank_range(const PyramidMixer<float>& model, const Dataset& ds, std::span<const Example> examples,
                const EvalOptions& options, std::span<RankResult> out) {
    NoGradGuard no_grad;
    const auto V = static_cast<std::size_t>(ds.num_items());
    std::vector<std::uint8_t> excluded(V, 0);
    for (std::size_t start = 0; start < examples.size(); start += static_cast<std::size_t>(options.batch_size)) {
        const auto n = std::min(examples.size() - start, static_cast<std::size_t>(options.batch_size));
        auto chunk = examples.subspan(start, n);
        auto batch = make_batch(ds, chunk, model.config().max_len);
        auto scores = model.score(batch);
        for (std::size_t b = 0; b < n; ++b) {
            const auto& ex = chunk[b];
            const auto target = batch.targets[b];
            auto row = std::span<const float>(scores.values()).subspan(b * V, V);
            auto history = history_items(ds, ex);
            for (auto item : history) excluded[static_cast<std::size_t>(item)] = 1;
            RankResult r{ex.user, 0, 0};
            if (options.negatives <= 0) {
                r.rank = rank_of(row, target, excluded);
                r.candidates = static_cast<std::int64_t>(V) - 2 -
                               std::count_if(excluded.begin() + 2, excluded.end(), [](auto e) { return e != 0; });
                if (excluded[static_cast<std::size_t>(target)]) ++r.candidates;
            } else {
                std::vector<std::int32_t> pool;
                for (std::int32_t i = 2; i < static_cast<std::int32_t>(V); ++i) {
                    if (i != target && !excluded[static_cast<std::size_t>(i)]) pool.push_back(i);
                }
                std::mt19937_64 rng(options.seed * 0x9E3779B97F4A7C15ULL +
                                    (static_cast<std::uint64_t>(ex.user) << 32) + static_cast<std::uint64_t>(ex.end));
                const auto take = std::min<std::size_t>(pool.size(), static_cast<std::size_t>(options.negatives));
                for (std::size_t i = 0; i < take; ++i) {
                    std::uniform_int_distribution<std::size_t> pick(i, pool.size() - 1);
                    std::swap(pool[i], pool[pick(rng)]);
                }
                const float t = row[static_cast<std::size_t>(target)];
                r.rank = 1;
                for (std::size_t i = 0; i < take; ++i) {
                    const float s = row[static_cast<std::size_t>(pool[i])];
                    if (s > t || (s == t && pool[i] < target)) ++r.rank;
                }
                r.candidates = static_cast<std::int64_t>(take) + 1;
            }
            for (auto item : history) excluded[static_cast<std::size_t>(item)] = 0;
            out[start + b] = r;
        }
    }
}

}  // namespace

std::vector<RankResult> rank_targets(const PyramidMixer<float>& model, const Dataset& ds,
                                     std::span<const Example> examples, const EvalOptions& options) {
    if (options.k < 1) throw ConfigError(fmt::format("eval.k: must be positive, got {}", options.k));
    if (options.batch_size < 1) {
        throw ConfigError(fmt::format("eval.batch_size: must be positive, got {}", options.batch_size));
    }
    std::vector<RankResult> out(examples.size());
    const auto threads = static_cast<std::size_t>(
        std::min<std::int64_t>(resolve_threads(options.threads),
                               std::max<std::int64_t>(1, static_cast<std::int64_t>(examples.size()) / 64)));
    if (threads <= 1) {
        rank_range(model, ds, examples, options, out);
        return out;
    }
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(threads);
    // Whole batches per thread, so every example is scored in the same batch
    // whatever the thread count.
    const auto bs = static_cast<std::size_t>(options.batch_size);
    const auto batches = (examples.size() + bs - 1) / bs;
    const auto per = (batches + threads - 1) / threads * bs;
    for (std::size_t t = 0; t < threads; ++t) {
        const auto begin = std::min(examples.size(), t * per);
        const auto n = std::min(examples.size() - begin, per);
        pool.emplace_back([&, t, begin, n] {
            try {
                rank_range(model, ds, examples.subspan(begin, n), options, std::span(out).subspan(begin, n));
            } catch (...) {
                errors[t] = std::current_exception();
            }
        });
    }
    for (auto& th : pool) th.join();
    for (auto& e : errors) {
        if (e) std::rethrow_exception(e);
    }
    return out;
}

MetricReport evaluate_ranking(const PyramidMixer<float>& model, const Dataset& ds, std::span<const Example> examples,
                              const EvalOptions& options) {
    auto results = rank_targets(model, ds, examples, options);
    std::vector<std::int64_t> ranks;
    ranks.reserve(results.size());
    for (const auto& r : results) ranks.push_back(r.rank);
    return aggregate(ranks, options.k);
}

namespace {

/// Input positions read by a strided zero-padded convolution, summed over
/// output positions and taps.
std::int64_t conv_taps(std::int64_t len, std::int64_t kernel, std::int64_t stride, std::int64_t padding) {
    const auto out_len = conv1d_output_length(len, kernel, stride, padding);
    std::int64_t taps = 0;
    for (std::int64_t k = 0; k < kernel; ++k) {
        // Valid j: 0 <= j*stride - padding + k <= len - 1.
        const auto lo_num = padding - k;
        const auto lo = lo_num <= 0 ? 0 : (lo_num + stride - 1) / stride;
        const auto hi_num = len - 1 + padding - k;
        if (hi_num < 0) continue;
        const auto hi = std::min(out_len - 1, hi_num / stride);
        if (hi >= lo) taps += hi - lo + 1;
    }
    return taps;
}

struct Tally {
    std::vector<ModuleCost> modules;
    std::int64_t encoder_macs = 0, encoder_params = 0;
    std::int64_t feature_macs = 0, behavior_macs = 0;
    std::int64_t base_macs = 0, base_params = 0;
    std::int64_t embedding_params = 0;
};

Tally tally(const ModelConfig& c) {
    Tally t;
    const auto D = c.D, d = c.field_dim;
    const auto lengths = c.layer_lengths();
    const auto S = static_cast<std::int64_t>(lengths.size());
    for (std::size_t f = 0; f < c.vocab_sizes.size(); ++f) t.embedding_params += c.vocab_sizes[f] * d;
    t.modules.push_back({"embedding", t.embedding_params, 0});
    auto encoder = [&](std::string name, std::int64_t params, std::int64_t macs) {
        t.encoder_params += params;
        t.encoder_macs += macs;
        t.modules.push_back({std::move(name), params, macs});
    };
    for (std::size_t s = 0; s < lengths.size(); ++s) {
        const auto L = lengths[s];
        if (c.cross_behavior) {
            const auto k = c.behavior_latent(s);
            const auto macs = 2 * L * k * D;
            t.behavior_macs += macs;
            encoder(fmt::format("layer{}.behavior", s), L * k + k + k * L + L + 2 * D, macs);
        }
        if (c.cross_feature) {
            const auto k = c.feature_latent();
            const auto macs = 2 * L * D * k;
            t.feature_macs += macs;
            encoder(fmt::format("layer{}.feature", s), D * k + k + k * D + D + 2 * D, macs);
        }
        if (c.cross_behavior && c.cross_feature && c.fusion) encoder(fmt::format("layer{}.gate", s), D + 1, L * D);
        if (c.pyramid && s + 1 < lengths.size()) {
            encoder(fmt::format("layer{}.scale", s), c.kernel * D * D + D,
                    conv_taps(L, c.kernel, c.stride, c.padding) * D * D);
        }
    }
    const auto head_params = S * D * d + d;
    const auto head_macs = S * D * d;
    t.modules.push_back({"head", head_params, head_macs});
    const auto score_macs = c.num_items() * d;
    t.modules.push_back({"scoring", 0, score_macs});
    t.base_macs = head_macs + score_macs;
    t.base_params = t.embedding_params + head_params;
    return t;
}

}  // namespace

double CostReport::mixer_block_ratio() const {
    return static_cast<double>(mixer_block_macs) / static_cast<double>(dense_mixer_block_macs);
}

double CostReport::feature_block_ratio() const {
    return static_cast<double>(feature_block_macs) / static_cast<double>(dense_feature_block_macs);
}

double CostReport::increment_ratio() const {
    return static_cast<double>(encoder_macs) / static_cast<double>(dense_encoder_macs);
}

CostReport count_cost(const ModelConfig& config) {
    config.validate();
    auto dense_config = config;
    dense_config.low_rank = false;
    const auto lr = tally(config);
    const auto dense = tally(dense_config);

    CostReport r;
    r.modules = lr.modules;
    r.embedding_params = lr.embedding_params;
    for (const auto& m : r.modules) {
        r.total_params += m.params;
        r.total_macs += m.macs;
    }
    r.encoder_params = lr.encoder_params;
    r.encoder_macs = lr.encoder_macs;
    r.feature_block_macs = lr.feature_macs;
    r.behavior_block_macs = lr.behavior_macs;
    r.mixer_block_macs = lr.feature_macs + lr.behavior_macs;
    for (const auto& m : dense.modules) r.dense_total_macs += m.macs;
    r.dense_encoder_macs = dense.encoder_macs;
    r.dense_encoder_params = dense.encoder_params;
    r.dense_mixer_block_macs = dense.feature_macs + dense.behavior_macs;
    r.dense_feature_block_macs = dense.feature_macs;
    r.base_macs = lr.base_macs;
    r.base_params = lr.base_params;
    return r;
}

nlohmann::json CostReport::to_json() const {
    nlohmann::json mods = nlohmann::json::array();
    for (const auto& m : modules) mods.push_back({{"name", m.name}, {"params", m.params}, {"macs", m.macs}});
    auto ratio = [](std::int64_t a, std::int64_t b) { return b ? static_cast<double>(a) / static_cast<double>(b) : 0.0; };
    return {{"modules", mods},
            {"total_params", total_params},
            {"total_macs", total_macs},
            {"embedding_params", embedding_params},
            {"encoder_params", encoder_params},
            {"encoder_macs", encoder_macs},
            {"mixer_block_macs", mixer_block_macs},
            {"feature_block_macs", feature_block_macs},
            {"behavior_block_macs", behavior_block_macs},
            {"dense_total_macs", dense_total_macs},
            {"dense_encoder_macs", dense_encoder_macs},
            {"dense_encoder_params", dense_encoder_params},
            {"dense_mixer_block_macs", dense_mixer_block_macs},
            {"base_macs", base_macs},
            {"base_params", base_params},
            {"mixer_block_ratio", mixer_block_ratio()},
            {"feature_block_ratio", feature_block_ratio()},
            {"increment_ratio", increment_ratio()},
            {"increment_pct_vs_base", 100.0 * ratio(encoder_macs, base_macs)},
            {"dense_increment_pct_vs_base", 100.0 * ratio(dense_encoder_macs, base_macs)}};
}

std::string CostReport::to_table() const {
    std::string out = fmt::format("{:<20} {:>12} {:>14}\n", "module", "params", "MACs");
    for (const auto& m : modules) out += fmt::format("{:<20} {:>12} {:>14}\n", m.name, m.params, m.macs);
    out += fmt::format("{:<20} {:>12} {:>14}\n", "total", total_params, total_macs);
    out += fmt::format("\nencoder MACs {} (dense {}), ratio {:.4f}\n", encoder_macs, dense_encoder_macs,
                       increment_ratio());
    out += fmt::format("mixer-block MACs {} (dense {}), ratio {:.4f}\n", mixer_block_macs, dense_mixer_block_macs,
                       mixer_block_ratio());
    out += fmt::format("feature-block ratio {:.4f}\n", feature_block_ratio());
    return out;
}

}  // namespace pymx
