#pragma once

#include <variant>
#include <vector>

#include "kvlab/model.hpp"

namespace kvlab {

struct DenseSegment {
    std::vector<Tok> tokens;
};

// A judge cache is stitched from dense token runs (computed conditioned on
// everything assembled so far) and pre-built chunks (inserted verbatim).
using Segment = std::variant<DenseSegment, Chunk>;

struct AssembledCache {
    KVCache cache;
    std::vector<Span> segment_spans;
};

inline void append_chunk(KVCache& cache, const Chunk& chunk) {
    if (chunk.slab.token_len == 0) throw AssemblyError("cannot append an empty chunk");
    if (chunk.slab.n_layers != cache.n_layers() || chunk.slab.n_heads != cache.n_heads() ||
        chunk.slab.head_dim != cache.head_dim()) {
        throw AssemblyError("chunk dimensions do not match cache");
    }
    if (chunk.origin_start != cache.size()) {
        throw AssemblyError("chunk is re-indexed for position " +
                            std::to_string(chunk.origin_start) + " but cache length is " +
                            std::to_string(cache.size()));
    }
    for (std::size_t t = 0; t < chunk.slab.token_len; ++t) {
        for (std::size_t l = 0; l < chunk.slab.n_layers; ++l) {
            cache.append_layer_kv(l, chunk.slab.key_row(l, t), chunk.slab.value_row(l, t));
        }
        cache.commit_position();
    }
}

inline AssembledCache assemble_cache(std::span<const Segment> segments, const Weights& w,
                                     const AttentionMask& mask) {
    AssembledCache out;
    out.cache = KVCache(w.config.n_layers, w.config.n_heads, w.config.head_dim);
    for (const Segment& seg : segments) {
        const std::size_t start = out.cache.size();
        if (const auto* dense = std::get_if<DenseSegment>(&seg)) {
            if (dense->tokens.empty()) throw AssemblyError("empty dense segment");
            for (Tok t : dense->tokens) forward_token(w, out.cache, t, mask);
        } else {
            append_chunk(out.cache, std::get<Chunk>(seg));
        }
        out.segment_spans.push_back({start, out.cache.size() - start});
    }
    return out;
}

}  // namespace kvlab
