#include "pymx/synthetic.hpp"

#include <random>
#include <string>

#include <fmt/format.h>

#include "pymx/error.hpp"

namespace pymx {

std::vector<InteractionRecord> planted_rule_records(const PlantedRuleOptions& o) {
    if (o.users < 1 || o.items < 2 || o.min_length < 1 || o.max_length < o.min_length || o.max_length > o.items) {
        throw ConfigError(fmt::format("planted data: invalid sizes (users {}, items {}, lengths {}..{})", o.users,
                                      o.items, o.min_length, o.max_length));
    }
    std::mt19937_64 rng(o.seed);
    std::uniform_int_distribution<std::int32_t> start(0, o.items - 1);
    std::uniform_int_distribution<std::int32_t> length(o.min_length, o.max_length);
    std::vector<InteractionRecord> out;
    for (std::int32_t u = 0; u < o.users; ++u) {
        const auto s = start(rng);
        const auto n = length(rng);
        for (std::int32_t t = 0; t < n; ++t) {
            const auto item = (s + t) % o.items;
            out.push_back({fmt::format("u{}", u), fmt::format("i{}", item), 1000 * t,
                           {{"decade", std::to_string(item / 10)}}});
        }
    }
    return out;
}

}  // namespace pymx
