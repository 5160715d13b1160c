#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace arbor {

using Rng = std::mt19937_64;

// All randomness in a run flows from one base seed. Streams are split by
// (name, index), so per-row or per-restart consumers always see the same
// numbers no matter how the work is scheduled.
std::uint64_t derive_seed(std::uint64_t base, std::string_view stream, std::uint64_t index = 0);

Rng make_rng(std::uint64_t base, std::string_view stream, std::uint64_t index = 0);

}  // namespace arbor
