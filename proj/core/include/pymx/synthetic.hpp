#pragma once

#include <cstdint>
#include <vector>

#include "pymx/data.hpp"

namespace pymx {

struct PlantedRuleOptions {
    std::int32_t users = 50;
    std::int32_t items = 60;
    std::int32_t min_length = 15;
    std::int32_t max_length = 20;
    std::uint64_t seed = 0;
};

/// Each user walks item n, n+1, n+2, ... (mod items) from a random start, so
/// the next item is always the current one plus one. Items carry a side field
/// "decade" = n / 10.
std::vector<InteractionRecord> planted_rule_records(const PlantedRuleOptions& options = {});

}  // namespace pymx
