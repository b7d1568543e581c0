#include "run_config.hpp"

#include <fstream>
#include <set>

#include <fmt/format.h>

#include "pymx/ablation.hpp"
#include "pymx/data.hpp"
#include "pymx/error.hpp"

namespace pymx::cli {

namespace {

using nlohmann::json;

void check_keys(const json& j, std::string_view section, const std::set<std::string>& keys) {
    if (!j.is_object()) throw ConfigError(fmt::format("{}: expected a JSON object", section));
    for (const auto& [key, value] : j.items()) {
        if (!keys.count(key)) throw ConfigError(fmt::format("{}.{}: unknown key", section, key));
    }
}

template <typename V>
void read(const json& j, std::string_view section, const char* key, V& out) {
    if (!j.contains(key)) return;
    try {
        out = j.at(key).get<V>();
    } catch (const json::exception&) {
        throw ConfigError(fmt::format("{}.{}: wrong type ({})", section, key, j.at(key).dump()));
    }
}

void require(bool ok, const std::string& message) {
    if (!ok) throw ConfigError(message);
}

}  // namespace

json RunConfig::to_json() const {
    return {{"seed", seed},
            {"out", out},
            {"tag", tag},
            {"data", {{"path", data.path}, {"format", data.format}, {"min_core", data.min_core}}},
            {"model", model.to_json()},
            {"train", train.to_json()},
            {"eval",
             {{"k", eval.k}, {"threads", eval.threads}, {"batch_size", eval.batch_size}, {"negatives", eval.negatives}}},
            {"ablate", {{"variants", ablate.variants}, {"seeds", ablate.seeds}}},
            {"gradcheck",
             {{"seeds", gradcheck.seeds},
              {"batch", gradcheck.batch},
              {"step", gradcheck.step},
              {"tolerance", gradcheck.tolerance}}},
            {"cost", {{"base_macs", cost.base_macs}}}};
}

RunConfig RunConfig::from_json(const json& j) {
    check_keys(j, "config", {"seed", "out", "tag", "data", "model", "train", "eval", "ablate", "gradcheck", "cost"});
    RunConfig c;
    read(j, "config", "seed", c.seed);
    read(j, "config", "out", c.out);
    read(j, "config", "tag", c.tag);
    if (j.contains("data")) {
        const auto& d = j["data"];
        check_keys(d, "data", {"path", "format", "min_core"});
        read(d, "data", "path", c.data.path);
        read(d, "data", "format", c.data.format);
        read(d, "data", "min_core", c.data.min_core);
    }
    if (j.contains("model")) c.model = ModelConfig::from_json(j["model"]);
    if (j.contains("train")) c.train = TrainConfig::from_json(j["train"]);
    if (j.contains("eval")) {
        const auto& e = j["eval"];
        check_keys(e, "eval", {"k", "threads", "batch_size", "negatives"});
        read(e, "eval", "k", c.eval.k);
        read(e, "eval", "threads", c.eval.threads);
        read(e, "eval", "batch_size", c.eval.batch_size);
        read(e, "eval", "negatives", c.eval.negatives);
    }
    if (j.contains("ablate")) {
        const auto& a = j["ablate"];
        check_keys(a, "ablate", {"variants", "seeds"});
        read(a, "ablate", "variants", c.ablate.variants);
        read(a, "ablate", "seeds", c.ablate.seeds);
    }
    if (j.contains("gradcheck")) {
        const auto& g = j["gradcheck"];
        check_keys(g, "gradcheck", {"seeds", "batch", "step", "tolerance"});
        read(g, "gradcheck", "seeds", c.gradcheck.seeds);
        read(g, "gradcheck", "batch", c.gradcheck.batch);
        read(g, "gradcheck", "step", c.gradcheck.step);
        read(g, "gradcheck", "tolerance", c.gradcheck.tolerance);
    }
    if (j.contains("cost")) {
        const auto& k = j["cost"];
        check_keys(k, "cost", {"base_macs"});
        read(k, "cost", "base_macs", c.cost.base_macs);
    }
    return c;
}

void RunConfig::validate() const {
    require(!out.empty(), "out: must not be empty");
    require(tag.find('/') == std::string::npos, fmt::format("tag: must not contain '/', got '{}'", tag));
    require(!data.path.empty(), "data.path: must not be empty");
    parse_data_format(data.format);
    require(data.min_core >= 1, fmt::format("data.min_core: must be at least 1, got {}", data.min_core));
    // Vocabulary-independent model checks; one placeholder field keeps D divisible.
    model.resolved(model.vocab_sizes.empty() ? std::vector<std::int64_t>{3} : model.vocab_sizes);
    train.validate();
    require(eval.k >= 1, fmt::format("eval.k: must be positive, got {}", eval.k));
    require(eval.threads >= 0, fmt::format("eval.threads: must be non-negative, got {}", eval.threads));
    require(eval.batch_size >= 1, fmt::format("eval.batch_size: must be positive, got {}", eval.batch_size));
    require(eval.negatives >= 0, fmt::format("eval.negatives: must be non-negative, got {}", eval.negatives));
    require(!ablate.variants.empty(), "ablate.variants: at least one variant is required");
    for (const auto& v : ablate.variants) standard_variant(model, v);
    require(!ablate.seeds.empty(), "ablate.seeds: at least one seed is required");
    require(gradcheck.seeds >= 1, fmt::format("gradcheck.seeds: must be at least 1, got {}", gradcheck.seeds));
    require(gradcheck.batch >= 1, fmt::format("gradcheck.batch: must be positive, got {}", gradcheck.batch));
    require(gradcheck.step > 0.0, fmt::format("gradcheck.step: must be positive, got {}", gradcheck.step));
    require(gradcheck.tolerance >= 0.0,
            fmt::format("gradcheck.tolerance: must be non-negative, got {}", gradcheck.tolerance));
    require(cost.base_macs >= 0, fmt::format("cost.base_macs: must be non-negative, got {}", cost.base_macs));
}

void apply_override(json& doc, std::string_view assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string_view::npos || eq == 0) {
        throw ConfigError(fmt::format("--set: expected KEY=VALUE, got '{}'", assignment));
    }
    const std::string path(assignment.substr(0, eq));
    const std::string text(assignment.substr(eq + 1));
    json value = json::parse(text, nullptr, false);
    if (value.is_discarded()) value = text;

    json* node = &doc;
    std::size_t start = 0;
    while (true) {
        const auto dot = path.find('.', start);
        const auto key = path.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
        if (key.empty()) throw ConfigError(fmt::format("--set: malformed key '{}'", path));
        if (!node->is_object()) throw ConfigError(fmt::format("{}: cannot set a field inside a non-object", path));
        if (dot == std::string::npos) {
            (*node)[key] = std::move(value);
            return;
        }
        node = &(*node)[key];
        if (node->is_null()) *node = json::object();
        start = dot + 1;
    }
}

RunConfig load_run_config(const std::optional<std::filesystem::path>& file, std::span<const std::string> overrides,
                          std::optional<std::uint64_t> seed, std::optional<std::string> out) {
    json doc = json::object();
    if (file) {
        std::ifstream in(*file);
        if (!in) throw ConfigError(fmt::format("--config: cannot open '{}'", file->string()));
        doc = json::parse(in, nullptr, false);
        if (doc.is_discarded()) throw ConfigError(fmt::format("--config: '{}' is not valid JSON", file->string()));
    }
    for (const auto& o : overrides) apply_override(doc, o);
    auto config = RunConfig::from_json(doc);
    if (seed) config.seed = *seed;
    if (out) config.out = *out;
    config.validate();
    return config;
}

}  // namespace pymx::cli
