#pragma once

#include <cmath>
#include <span>

#include "kvlab/errors.hpp"

namespace kvlab {

// Rotary position rotation over one head vector. Consecutive component pairs
// (x[2j], x[2j+1]) rotate by angle_multiplier * base^(-2j / dim); the
// multiplier is signed, so rotating by -m inverts rotating by +m. A zero
// multiplier is an exact identity (no arithmetic applied).
inline void apply_rope_rotation(std::span<double> head_vec, long long angle_multiplier,
                                double rope_base) {
    const std::size_t dim = head_vec.size();
    if (dim % 2 != 0) {
        throw ConfigError("rotation requires an even vector dimension");
    }
    if (angle_multiplier == 0) {
        return;
    }
    for (std::size_t j = 0; j * 2 < dim; ++j) {
        const double freq = std::pow(rope_base, -2.0 * static_cast<double>(j) /
                                                    static_cast<double>(dim));
        const double angle = static_cast<double>(angle_multiplier) * freq;
        const double c = std::cos(angle);
        const double s = std::sin(angle);
        const double x = head_vec[2 * j];
        const double y = head_vec[2 * j + 1];
        head_vec[2 * j] = x * c - y * s;
        head_vec[2 * j + 1] = x * s + y * c;
    }
}

}  // namespace kvlab
