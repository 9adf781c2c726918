#pragma once

#include <algorithm>
#include <cstddef>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "kvlab/errors.hpp"
#include "kvlab/layout.hpp"
#include "kvlab/rope.hpp"
#include "kvlab/textio.hpp"

namespace kvlab {

// Per-layer, per-head key/value store indexed by absolute position.
// Storage is [position][head][head_dim] per layer; all layers always hold
// the same number of committed positions.
class KVCache {
public:
    KVCache() = default;
    KVCache(std::size_t n_layers, std::size_t n_heads, std::size_t head_dim)
        : n_layers_(n_layers), n_heads_(n_heads), head_dim_(head_dim), layers_(n_layers) {}

    std::size_t size() const { return len_; }
    std::size_t n_layers() const { return n_layers_; }
    std::size_t n_heads() const { return n_heads_; }
    std::size_t head_dim() const { return head_dim_; }
    std::size_t row_width() const { return n_heads_ * head_dim_; }

    std::span<const double> keys_at(std::size_t layer, std::size_t pos) const {
        return {layers_[layer].k.data() + pos * row_width(), row_width()};
    }
    std::span<const double> values_at(std::size_t layer, std::size_t pos) const {
        return {layers_[layer].v.data() + pos * row_width(), row_width()};
    }

    // Forward-pass staging: each layer appends the new token's row, then the
    // position is committed once all layers have been filled.
    void append_layer_kv(std::size_t layer, std::span<const double> k,
                         std::span<const double> v) {
        if (k.size() != row_width() || v.size() != row_width()) {
            throw AssemblyError("kv row width mismatch");
        }
        layers_[layer].k.insert(layers_[layer].k.end(), k.begin(), k.end());
        layers_[layer].v.insert(layers_[layer].v.end(), v.begin(), v.end());
    }

    void commit_position() {
        const std::size_t want = (len_ + 1) * row_width();
        for (const Layer& l : layers_) {
            if (l.k.size() != want || l.v.size() != want) {
                throw AssemblyError("commit without all layers staged");
            }
        }
        ++len_;
    }

private:
    struct Layer {
        std::vector<double> k;
        std::vector<double> v;
    };

    std::size_t n_layers_ = 0;
    std::size_t n_heads_ = 0;
    std::size_t head_dim_ = 0;
    std::size_t len_ = 0;
    std::vector<Layer> layers_;
};

// Shared shape of chunk and deviation payloads: per-layer (k, v) slices,
// [token][head][head_dim].
struct KVSlab {
    struct Layer {
        std::vector<double> k;
        std::vector<double> v;
    };

    std::size_t n_layers = 0;
    std::size_t n_heads = 0;
    std::size_t head_dim = 0;
    std::size_t token_len = 0;
    std::vector<Layer> layers;

    std::size_t row_width() const { return n_heads * head_dim; }

    bool same_shape(const KVSlab& other) const {
        return n_layers == other.n_layers && n_heads == other.n_heads &&
               head_dim == other.head_dim && token_len == other.token_len;
    }

    std::span<double> key_row(std::size_t layer, std::size_t token) {
        return {layers[layer].k.data() + token * row_width(), row_width()};
    }
    std::span<const double> key_row(std::size_t layer, std::size_t token) const {
        return {layers[layer].k.data() + token * row_width(), row_width()};
    }
    std::span<const double> value_row(std::size_t layer, std::size_t token) const {
        return {layers[layer].v.data() + token * row_width(), row_width()};
    }

    static KVSlab zeros(std::size_t n_layers, std::size_t n_heads, std::size_t head_dim,
                        std::size_t token_len) {
        KVSlab s;
        s.n_layers = n_layers;
        s.n_heads = n_heads;
        s.head_dim = head_dim;
        s.token_len = token_len;
        s.layers.resize(n_layers);
        for (Layer& l : s.layers) {
            l.k.assign(token_len * n_heads * head_dim, 0.0);
            l.v.assign(token_len * n_heads * head_dim, 0.0);
        }
        return s;
    }
};

enum class ChunkSource { execution, dense, corrected };

// A cache slice covering a contiguous token range. origin_start is the
// absolute position its keys are currently rotated for; stitching at any
// other position is a detectable error rather than silent corruption.
struct Chunk {
    KVSlab slab;
    std::size_t origin_start = 0;
    ChunkSource source = ChunkSource::dense;
};

// Per-token cache correction with the same shape as the chunk it corrects.
struct DeviationTensor {
    KVSlab slab;
};

inline Chunk extract_chunk(const KVCache& cache, Span span,
                           ChunkSource source = ChunkSource::dense) {
    if (span.len == 0 || span.end() > cache.size()) {
        throw UsageError("chunk span out of cache bounds");
    }
    Chunk c;
    c.slab = KVSlab::zeros(cache.n_layers(), cache.n_heads(), cache.head_dim(), span.len);
    c.origin_start = span.start;
    c.source = source;
    for (std::size_t l = 0; l < cache.n_layers(); ++l) {
        for (std::size_t t = 0; t < span.len; ++t) {
            const auto k = cache.keys_at(l, span.start + t);
            const auto v = cache.values_at(l, span.start + t);
            std::copy(k.begin(), k.end(), c.slab.layers[l].k.begin() + t * c.slab.row_width());
            std::copy(v.begin(), v.end(), c.slab.layers[l].v.begin() + t * c.slab.row_width());
        }
    }
    return c;
}

// Re-positions a chunk: every key row rotates by the uniform position delta
// (new_start - origin_start); values carry no positional encoding and are
// left untouched.
inline Chunk reindex_chunk(const Chunk& chunk, std::size_t new_start, double rope_base) {
    Chunk out = chunk;
    const long long delta = static_cast<long long>(new_start) -
                            static_cast<long long>(chunk.origin_start);
    out.origin_start = new_start;
    if (delta == 0) return out;
    for (std::size_t l = 0; l < out.slab.n_layers; ++l) {
        for (std::size_t t = 0; t < out.slab.token_len; ++t) {
            auto row = out.slab.key_row(l, t);
            for (std::size_t h = 0; h < out.slab.n_heads; ++h) {
                apply_rope_rotation(row.subspan(h * out.slab.head_dim, out.slab.head_dim),
                                    delta, rope_base);
            }
        }
    }
    return out;
}

// Element-wise a - b.
inline DeviationTensor cache_delta(const Chunk& a, const Chunk& b) {
    if (!a.slab.same_shape(b.slab)) {
        throw UsageError("cache_delta requires equal chunk shapes");
    }
    DeviationTensor d;
    d.slab = a.slab;
    for (std::size_t l = 0; l < d.slab.n_layers; ++l) {
        for (std::size_t i = 0; i < d.slab.layers[l].k.size(); ++i) {
            d.slab.layers[l].k[i] -= b.slab.layers[l].k[i];
            d.slab.layers[l].v[i] -= b.slab.layers[l].v[i];
        }
    }
    return d;
}

inline Chunk apply_offset(const Chunk& chunk, const DeviationTensor& dev) {
    if (!chunk.slab.same_shape(dev.slab)) {
        throw UsageError("apply_offset requires matching shapes");
    }
    Chunk out = chunk;
    for (std::size_t l = 0; l < out.slab.n_layers; ++l) {
        for (std::size_t i = 0; i < out.slab.layers[l].k.size(); ++i) {
            out.slab.layers[l].k[i] += dev.slab.layers[l].k[i];
            out.slab.layers[l].v[i] += dev.slab.layers[l].v[i];
        }
    }
    out.source = ChunkSource::corrected;
    return out;
}

// Full-precision textual dump (position, layer, head, values). The oracle
// comparisons in tests diff these dumps; hexfloat keeps them exact.
inline std::string dump_cache(const KVCache& cache) {
    std::ostringstream out;
    out << "kvcache len=" << cache.size() << " layers=" << cache.n_layers()
        << " heads=" << cache.n_heads() << " dim=" << cache.head_dim() << "\n";
    for (std::size_t p = 0; p < cache.size(); ++p) {
        for (std::size_t l = 0; l < cache.n_layers(); ++l) {
            for (std::size_t h = 0; h < cache.n_heads(); ++h) {
                out << "p=" << p << " l=" << l << " h=" << h << " k";
                const auto k = cache.keys_at(l, p).subspan(h * cache.head_dim(), cache.head_dim());
                for (double x : k) out << ' ' << hex_double(x);
                out << " v";
                const auto v = cache.values_at(l, p).subspan(h * cache.head_dim(), cache.head_dim());
                for (double x : v) out << ' ' << hex_double(x);
                out << "\n";
            }
        }
    }
    return out.str();
}

}  // namespace kvlab
