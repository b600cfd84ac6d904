#pragma once

#include <algorithm>
#include <cmath>
#include <random>

#include "focalcomm/tape.hpp"

namespace focalcomm {

/// Seeded uniform init in [-1/sqrt(fan_in), +1/sqrt(fan_in)].
inline void init_uniform(Parameter& p, int fan_in, std::mt19937_64& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(std::max(1, fan_in)));
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (std::int64_t i = 0; i < p.value.size(); ++i) p.value[i] = dist(rng);
}

}  // namespace focalcomm
