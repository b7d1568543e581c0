#include "pymx/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <random>

#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include "pymx/error.hpp"
#include "pymx/trainer.hpp"

namespace pymx {

namespace {

std::string group_of(const std::string& name) {
    const auto first = name.find('.');
    if (!name.starts_with("layer")) return name.substr(0, first);
    const auto second = name.find('.', first + 1);
    return name.substr(0, second);
}

Batch random_batch(const ModelConfig& c, std::int64_t size, std::mt19937_64& rng) {
    Batch batch;
    batch.size = size;
    batch.max_len = c.max_len;
    batch.num_fields = c.num_fields();
    const auto cells = static_cast<std::size_t>(size * c.max_len);
    batch.fields.assign(static_cast<std::size_t>(c.num_fields()), std::vector<std::int32_t>(cells, 0));
    batch.mask.assign(cells, 0);
    std::uniform_int_distribution<std::int64_t> length(1, c.max_len);
    for (std::int64_t b = 0; b < size; ++b) {
        for (std::int64_t t = c.max_len - length(rng); t < c.max_len; ++t) {
            const auto cell = static_cast<std::size_t>(b * c.max_len + t);
            batch.mask[cell] = 1;
            for (std::size_t f = 0; f < batch.fields.size(); ++f) {
                std::uniform_int_distribution<std::int32_t> value(2, static_cast<std::int32_t>(c.vocab_sizes[f] - 1));
                batch.fields[f][cell] = value(rng);
            }
        }
        std::uniform_int_distribution<std::int32_t> target(2, static_cast<std::int32_t>(c.num_items() - 1));
        batch.targets.push_back(target(rng));
        batch.users.push_back(static_cast<std::int32_t>(b));
    }
    return batch;
}

}  // namespace

ModelConfig gradcheck_config() {
    ModelConfig c;
    c.max_len = 6;
    c.D = 8;
    c.D_prime = 4;
    c.L_prime = 3;
    c.num_layers = 2;
    return c.resolved({20, 5});
}

GradcheckReport gradcheck(const ModelConfig& config, const GradcheckOptions& options) {
    if (options.seeds < 1) throw ConfigError("gradcheck.seeds: must be at least 1");
    if (options.batch < 1) throw ConfigError("gradcheck.batch: must be positive");
    if (!(options.step > 0.0)) throw ConfigError("gradcheck.step: must be positive");
    config.validate();

    std::map<std::string, GradGroup> groups;
    for (int k = 0; k < options.seeds; ++k) {
        const auto seed = options.first_seed + static_cast<std::uint64_t>(k);
        std::mt19937_64 rng(seed);
        const auto model = PyramidMixer<float>(config, seed).cast<double>();
        const auto batch = random_batch(config, options.batch, rng);
        const std::vector<std::uint8_t> rows(static_cast<std::size_t>(batch.size), 1);

        auto loss_value = [&] {
            NoGradGuard no_grad;
            return compute_loss(model.score(batch), batch.targets, rows).item();
        };
        auto params = model.parameters();
        for (auto& [name, p] : params) p.zero_grad();
        auto loss = compute_loss(model.score(batch), batch.targets, rows);
        backward(loss);

        for (auto& [name, p] : params) {
            auto& g = groups[group_of(name)];
            g.name = group_of(name);
            auto values = p.data();
            auto grad = p.grad();
            const std::size_t first = name.starts_with("embed.") ? static_cast<std::size_t>(p.dim(1)) : 0;
            for (std::size_t i = first; i < values.size(); ++i) {
                const double saved = values[i];
                values[i] = saved + options.step;
                const double up = loss_value();
                values[i] = saved - options.step;
                const double down = loss_value();
                values[i] = saved;
                const double numeric = (up - down) / (2.0 * options.step);
                const double err = std::abs(grad[i] - numeric) /
                                   std::max({std::abs(grad[i]), std::abs(numeric), options.floor});
                g.max_rel_error = std::max(g.max_rel_error, err);
                ++g.entries;
            }
        }
    }

    GradcheckReport report;
    report.tolerance = options.tolerance;
    report.seeds = options.seeds;
    for (auto& [name, g] : groups) {
        g.passed = g.max_rel_error <= options.tolerance;
        report.max_rel_error = std::max(report.max_rel_error, g.max_rel_error);
        report.passed = report.passed && g.passed;
        report.groups.push_back(g);
    }
    return report;
}

nlohmann::json GradcheckReport::to_json() const {
    nlohmann::json j = {{"passed", passed}, {"max_rel_error", max_rel_error}, {"tolerance", tolerance},
                        {"seeds", seeds}, {"groups", nlohmann::json::array()}};
    for (const auto& g : groups) {
        j["groups"].push_back(
            {{"name", g.name}, {"entries", g.entries}, {"max_rel_error", g.max_rel_error}, {"passed", g.passed}});
    }
    return j;
}

std::string GradcheckReport::to_table() const {
    std::string out = fmt::format("{:<20} {:>8} {:>12}  {}\n", "group", "entries", "max rel err", "result");
    for (const auto& g : groups) {
        out += fmt::format("{:<20} {:>8} {:>12.3e}  {}\n", g.name, g.entries, g.max_rel_error,
                           g.passed ? "PASS" : "FAIL");
    }
    out += fmt::format("{} over {} seeds, max rel err {:.3e} (tolerance {:.0e})\n", passed ? "PASS" : "FAIL", seeds,
                       max_rel_error, tolerance);
    return out;
}

}  // namespace pymx
