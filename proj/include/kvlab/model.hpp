#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <vector>

#include "kvlab/cache.hpp"
#include "kvlab/mask.hpp"
#include "kvlab/weights.hpp"

namespace kvlab {

// Normalized attention weights captured at one step: weights[layer][head] is
// a vector over every cached position visible at that step (blocked
// positions hold exactly 0). Recording is opt-in per call.
struct AttentionRecord {
    std::size_t step = 0;  // absolute position of the query token
    std::vector<std::vector<std::vector<double>>> weights;
};

namespace detail {

inline void rms_norm(std::span<const double> x, std::span<const double> gain,
                     std::span<double> out) {
    double ms = 0.0;
    for (double v : x) ms += v * v;
    ms /= static_cast<double>(x.size());
    const double inv = 1.0 / std::sqrt(ms + 1e-6);
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * inv * gain[i];
}

// y = M x with M row-major [rows][cols]; fixed summation order.
inline void matvec(const std::vector<double>& m, std::size_t rows, std::size_t cols,
                   std::span<const double> x, std::span<double> y) {
    for (std::size_t r = 0; r < rows; ++r) {
        double acc = 0.0;
        const double* row = m.data() + r * cols;
        for (std::size_t c = 0; c < cols; ++c) acc += row[c] * x[c];
        y[r] = acc;
    }
}

inline double silu(double x) { return x / (1.0 + std::exp(-x)); }

}  // namespace detail

// Runs one token through every layer, extending the cache by one position.
// Pre-norm blocks, rotary positions on Q/K, SiLU feed-forward. Returns the
// logits at this position. The cache length is the token's position.
inline std::vector<double> forward_token(const Weights& w, KVCache& cache, Tok token,
                                         const AttentionMask& mask,
                                         AttentionRecord* record = nullptr) {
    const ModelConfig& cfg = w.config;
    if (token < 0 || static_cast<std::size_t>(token) >= cfg.vocab_size) {
        throw UsageError("token id outside vocabulary");
    }
    const std::size_t pos = cache.size();
    const std::size_t d = cfg.d_model;
    const std::size_t hd = cfg.head_dim;
    const double inv_sqrt_hd = 1.0 / std::sqrt(static_cast<double>(hd));

    std::vector<double> x(w.embedding.begin() + static_cast<std::ptrdiff_t>(token) * d,
                          w.embedding.begin() + static_cast<std::ptrdiff_t>(token + 1) * d);
    std::vector<double> normed(d), q(d), k(d), v(d), attn_out(d), proj(d);
    std::vector<double> ff_mid(cfg.ff_dim()), ff_out(d);

    if (record) {
        record->step = pos;
        record->weights.assign(cfg.n_layers, {});
    }

    for (std::size_t layer = 0; layer < cfg.n_layers; ++layer) {
        const LayerWeights& lw = w.layers[layer];

        detail::rms_norm(x, lw.attn_gain, normed);
        detail::matvec(lw.wq, d, d, normed, q);
        detail::matvec(lw.wk, d, d, normed, k);
        detail::matvec(lw.wv, d, d, normed, v);
        for (std::size_t h = 0; h < cfg.n_heads; ++h) {
            apply_rope_rotation(std::span<double>(q).subspan(h * hd, hd),
                                static_cast<long long>(pos), cfg.rope_base);
            apply_rope_rotation(std::span<double>(k).subspan(h * hd, hd),
                                static_cast<long long>(pos), cfg.rope_base);
        }
        cache.append_layer_kv(layer, k, v);

        if (record) record->weights[layer].assign(cfg.n_heads, std::vector<double>(pos + 1, 0.0));

        std::fill(attn_out.begin(), attn_out.end(), 0.0);
        for (std::size_t h = 0; h < cfg.n_heads; ++h) {
            // Scores over visible cached positions; softmax with max
            // subtraction, blocked positions never enter the sum.
            std::vector<double> scores(pos + 1, 0.0);
            std::vector<bool> visible(pos + 1, false);
            double max_score = -1e300;
            bool any = false;
            for (std::size_t p = 0; p <= pos; ++p) {
                if (!mask.allows(pos, p)) continue;
                const auto key = cache.keys_at(layer, p).subspan(h * hd, hd);
                double s = 0.0;
                for (std::size_t i = 0; i < hd; ++i) s += q[h * hd + i] * key[i];
                s *= inv_sqrt_hd;
                scores[p] = s;
                visible[p] = true;
                any = true;
                if (s > max_score) max_score = s;
            }
            if (!any) continue;  // fully masked query contributes nothing
            double denom = 0.0;
            for (std::size_t p = 0; p <= pos; ++p) {
                if (visible[p]) denom += std::exp(scores[p] - max_score);
            }
            for (std::size_t p = 0; p <= pos; ++p) {
                if (!visible[p]) continue;
                const double weight = std::exp(scores[p] - max_score) / denom;
                if (record) record->weights[layer][h][p] = weight;
                const auto value = cache.values_at(layer, p).subspan(h * hd, hd);
                for (std::size_t i = 0; i < hd; ++i) attn_out[h * hd + i] += weight * value[i];
            }
        }
        detail::matvec(lw.wo, d, d, attn_out, proj);
        for (std::size_t i = 0; i < d; ++i) x[i] += proj[i];

        detail::rms_norm(x, lw.ffn_gain, normed);
        detail::matvec(lw.w_in, cfg.ff_dim(), d, normed, ff_mid);
        for (double& m : ff_mid) m = detail::silu(m);
        detail::matvec(lw.w_out, d, cfg.ff_dim(), ff_mid, ff_out);
        for (std::size_t i = 0; i < d; ++i) x[i] += ff_out[i];
    }
    cache.commit_position();

    detail::rms_norm(x, w.final_gain, normed);
    std::vector<double> logits(cfg.vocab_size);
    detail::matvec(w.head, cfg.vocab_size, d, normed, logits);
    return logits;
}

struct PrefillResult {
    KVCache cache;
    std::vector<double> last_logits;
    std::vector<AttentionRecord> records;  // one per new token when recording
};

// Encodes tokens on top of an optional base cache. The new tokens occupy the
// positions immediately following the base; segmentation never changes the
// arithmetic, so prefill(a then b) is bit-identical to prefill(a||b).
inline PrefillResult prefill(const Weights& w, std::span<const Tok> tokens,
                             const AttentionMask& mask, const KVCache* base = nullptr,
                             bool record = false) {
    if (tokens.empty()) throw UsageError("prefill requires a non-empty token sequence");
    PrefillResult out;
    out.cache = base ? *base
                     : KVCache(w.config.n_layers, w.config.n_heads, w.config.head_dim);
    for (Tok t : tokens) {
        AttentionRecord rec;
        out.last_logits = forward_token(w, out.cache, t, mask, record ? &rec : nullptr);
        if (record) out.records.push_back(std::move(rec));
    }
    return out;
}

struct DecodeResult {
    std::vector<double> logits;
    AttentionRecord record;
};

// Extends the cache by one token. position must equal the cache length.
inline DecodeResult decode_step(const Weights& w, KVCache& cache, Tok token,
                                std::size_t position, const AttentionMask& mask,
                                bool record = false) {
    if (position != cache.size()) {
        throw AssemblyError("decode position does not match cache length");
    }
    DecodeResult out;
    out.logits = forward_token(w, cache, token, mask, record ? &out.record : nullptr);
    return out;
}

// Highest-logit token among the allowed set; ties break to the lowest id.
inline Tok constrained_argmax(std::span<const double> logits, std::span<const Tok> allowed) {
    if (allowed.empty()) throw UsageError("constrained_argmax over an empty set");
    std::vector<Tok> sorted(allowed.begin(), allowed.end());
    std::sort(sorted.begin(), sorted.end());
    Tok best = -1;
    double best_logit = 0.0;
    for (Tok t : sorted) {
        if (t < 0 || static_cast<std::size_t>(t) >= logits.size()) {
            throw UsageError("allowed token outside vocabulary");
        }
        if (best < 0 || logits[static_cast<std::size_t>(t)] > best_logit) {
            best = t;
            best_logit = logits[static_cast<std::size_t>(t)];
        }
    }
    return best;
}

}  // namespace kvlab
