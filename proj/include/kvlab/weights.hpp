#pragma once

#include <cmath>
#include <vector>

#include "kvlab/config.hpp"
#include "kvlab/rng.hpp"

namespace kvlab {

// All matrices are row-major [out][in]; norm gains are vectors of length
// d_model. Weights are a pure function of (config, seed) and immutable after
// init, so they are freely shared across concurrent evaluations.
struct LayerWeights {
    std::vector<double> wq, wk, wv, wo;  // d_model x d_model
    std::vector<double> w_in;            // ff_dim x d_model
    std::vector<double> w_out;           // d_model x ff_dim
    std::vector<double> attn_gain;
    std::vector<double> ffn_gain;
};

struct Weights {
    ModelConfig config;
    std::vector<double> embedding;  // vocab x d_model
    std::vector<LayerWeights> layers;
    std::vector<double> final_gain;
    std::vector<double> head;  // vocab x d_model
};

inline Weights init_weights(const ModelConfig& config) {
    config.validate();
    Weights w;
    w.config = config;
    Rng rng(config.seed);
    const double scale = 1.0 / std::sqrt(static_cast<double>(config.d_model));
    auto fill = [&](std::vector<double>& v, std::size_t n) {
        v.resize(n);
        for (double& x : v) x = rng.normal() * scale;
    };
    fill(w.embedding, config.vocab_size * config.d_model);
    w.layers.resize(config.n_layers);
    for (LayerWeights& l : w.layers) {
        fill(l.wq, config.d_model * config.d_model);
        fill(l.wk, config.d_model * config.d_model);
        fill(l.wv, config.d_model * config.d_model);
        fill(l.wo, config.d_model * config.d_model);
        fill(l.w_in, config.ff_dim() * config.d_model);
        fill(l.w_out, config.d_model * config.ff_dim());
        l.attn_gain.assign(config.d_model, 1.0);
        l.ffn_gain.assign(config.d_model, 1.0);
    }
    w.final_gain.assign(config.d_model, 1.0);
    fill(w.head, config.vocab_size * config.d_model);
    return w;
}

}  // namespace kvlab
