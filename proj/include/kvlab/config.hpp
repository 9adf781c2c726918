#pragma once

#include <cstddef>
#include <cstdint>
#include <string>

#include "kvlab/errors.hpp"

namespace kvlab {

using Tok = std::int32_t;

// Dimensions of the miniature decoder-only model. All arithmetic downstream
// is 64-bit float so the stitching oracles are free of precision noise.
struct ModelConfig {
    std::size_t vocab_size = 512;
    std::size_t d_model = 64;
    std::size_t n_layers = 4;
    std::size_t n_heads = 4;
    std::size_t head_dim = 16;
    double rope_base = 10000.0;
    std::uint64_t seed = 1;

    void validate() const {
        if (vocab_size == 0 || d_model == 0 || n_layers == 0 || n_heads == 0 || head_dim == 0) {
            throw ConfigError("model dimensions must be positive");
        }
        if (n_heads * head_dim != d_model) {
            throw ConfigError("n_heads * head_dim must equal d_model (got " +
                              std::to_string(n_heads) + " * " + std::to_string(head_dim) +
                              " != " + std::to_string(d_model) + ")");
        }
        if (head_dim % 2 != 0) {
            throw ConfigError("head_dim must be even for rotation pairs");
        }
        if (!(rope_base > 0.0)) {
            throw ConfigError("rope_base must be positive");
        }
    }

    std::size_t ff_dim() const { return 4 * d_model; }
};

}  // namespace kvlab
