#pragma once

#include <span>
#include <string>
#include <vector>

#include "kvlab/anchors.hpp"
#include "kvlab/assemble.hpp"

namespace kvlab {

enum class FallbackReason { none, no_anchor, gated_out, strategy_dense };

inline const char* fallback_name(FallbackReason r) {
    switch (r) {
        case FallbackReason::none: return "none";
        case FallbackReason::no_anchor: return "no-anchor";
        case FallbackReason::gated_out: return "gated-out";
        case FallbackReason::strategy_dense: return "strategy-dense";
    }
    return "unknown";
}

struct CandidateReuse {
    int display_slot = 0;
    int agent_id = 0;
    bool reused = false;
    FallbackReason fallback = FallbackReason::none;
    std::vector<std::uint64_t> matched_ids;
    std::vector<double> matched_weights;
};

// Per-candidate reuse/fallback accounting; Reuse Rate is computed over the
// reused flags and nothing else (prefix, headers and outputs never count).
struct ReuseReport {
    std::vector<CandidateReuse> candidates;

    std::size_t reused_count() const {
        std::size_t n = 0;
        for (const CandidateReuse& c : candidates) n += c.reused ? 1 : 0;
        return n;
    }
};

struct Assembly {
    KVCache cache;
    ReuseReport report;
};

struct DenseAssembly {
    KVCache cache;
    std::vector<Chunk> candidate_chunks;  // indexed by display slot - 1
    ReuseReport report;
};

namespace detail {

inline void check_exec_chunks(const JudgeInput& input, std::span<const Chunk> exec_chunks) {
    if (exec_chunks.size() != input.layout.candidates.size()) {
        throw UsageError("need exactly one execution chunk per candidate");
    }
    for (const CandidateRegion& r : input.layout.candidates) {
        const Chunk& c = exec_chunks[static_cast<std::size_t>(r.agent_id - 1)];
        if (c.slab.token_len != r.body.len) {
            throw AssemblyError("execution chunk length " + std::to_string(c.slab.token_len) +
                                " does not match candidate span length " +
                                std::to_string(r.body.len) + " for agent " +
                                std::to_string(r.agent_id));
        }
    }
}

inline void extend_dense(const Weights& w, KVCache& cache, std::span<const Tok> tokens,
                         const AttentionMask& mask) {
    for (Tok t : tokens) forward_token(w, cache, t, mask);
}

inline std::span<const Tok> slice_tokens(const JudgeInput& input, Span span) {
    return std::span<const Tok>(input.tokens).subspan(span.start, span.len);
}

}  // namespace detail

// Reference strategy: one full prefill, chunks extracted per candidate span.
inline DenseAssembly dense_assemble(const Weights& w, const JudgeInput& input,
                                    const AttentionMask& mask) {
    input.layout.validate();
    if (input.tokens.size() != input.layout.total_len) {
        throw LayoutError("judge tokens do not match layout length");
    }
    DenseAssembly out;
    auto res = prefill(w, input.tokens, mask);
    out.cache = std::move(res.cache);
    for (const CandidateRegion& r : input.layout.candidates) {
        out.candidate_chunks.push_back(extract_chunk(out.cache, r.body, ChunkSource::dense));
        out.report.candidates.push_back(
            {r.display_slot, r.agent_id, false, FallbackReason::strategy_dense, {}, {}});
    }
    return out;
}

// Position-only reuse: prefix and headers dense, every candidate chunk
// re-indexed to its display position and inserted verbatim.
inline Assembly naive_assemble(const Weights& w, const JudgeInput& input,
                               std::span<const Chunk> exec_chunks, const AttentionMask& mask) {
    input.layout.validate();
    detail::check_exec_chunks(input, exec_chunks);
    Assembly out;
    out.cache = KVCache(w.config.n_layers, w.config.n_heads, w.config.head_dim);
    detail::extend_dense(w, out.cache, detail::slice_tokens(input, input.layout.prefix), mask);
    for (const CandidateRegion& r : input.layout.candidates) {
        detail::extend_dense(w, out.cache, detail::slice_tokens(input, r.header), mask);
        const Chunk& exec = exec_chunks[static_cast<std::size_t>(r.agent_id - 1)];
        append_chunk(out.cache, reindex_chunk(exec, r.body.start, w.config.rope_base));
        out.report.candidates.push_back(
            {r.display_slot, r.agent_id, true, FallbackReason::none, {}, {}});
    }
    return out;
}

enum class PoolKeying { by_agent, by_slot };

namespace detail {

// Shared core of the anchored strategies. Gating always happens against the
// keyed slice; PAL-KV re-retrieves the applied offset over the pool union
// without ever changing the gate's decision.
inline Assembly anchored_assemble(const Weights& w, const JudgeInput& input,
                                  std::span<const Chunk> exec_chunks, AnchorPool& pool,
                                  const StrategyConfig& config, const AttentionMask& mask,
                                  PoolKeying keying, bool union_retrieval, bool freeze_pool) {
    input.layout.validate();
    config.validate();
    check_exec_chunks(input, exec_chunks);

    Assembly out;
    out.cache = KVCache(w.config.n_layers, w.config.n_heads, w.config.head_dim);
    extend_dense(w, out.cache, slice_tokens(input, input.layout.prefix), mask);

    for (const CandidateRegion& r : input.layout.candidates) {
        extend_dense(w, out.cache, slice_tokens(input, r.header), mask);
        const int key = keying == PoolKeying::by_agent ? r.agent_id : r.display_slot;
        const auto chunk_tokens = slice_tokens(input, r.body);
        const auto preceding = std::span<const Tok>(input.tokens).subspan(0, r.body.start);
        const std::vector<double> view = matching_view(w, preceding, chunk_tokens);
        const auto slice = pool.slice(key);
        const OffsetQuery gate = retrieve_offset(view, r.body.len, slice, config);
        const Chunk& exec = exec_chunks[static_cast<std::size_t>(r.agent_id - 1)];

        CandidateReuse entry{r.display_slot, r.agent_id, false, FallbackReason::none, {}, {}};
        if (gate.hit) {
            RetrievedOffset applied = *gate.hit;
            if (union_retrieval) {
                const auto everything = pool.all_entries();
                auto widened = retrieve_offset(view, r.body.len, everything, config);
                applied = std::move(*widened.hit);  // superset of the gating slice, never empty
            }
            const Chunk aligned = reindex_chunk(exec, r.body.start, w.config.rope_base);
            append_chunk(out.cache, apply_offset(aligned, applied.offset));
            entry.reused = true;
            entry.matched_ids = std::move(applied.matched_ids);
            entry.matched_weights = std::move(applied.weights);
        } else {
            // Dense fallback conditioned on the running cache; the measured
            // deviation against the aligned execution chunk becomes a new
            // anchor for future requests.
            extend_dense(w, out.cache, chunk_tokens, mask);
            const Chunk dense_chunk = extract_chunk(out.cache, r.body, ChunkSource::dense);
            const Chunk aligned = reindex_chunk(exec, r.body.start, w.config.rope_base);
            if (!freeze_pool) {
                pool.insert(key, view, r.body.len, cache_delta(dense_chunk, aligned),
                            config.pool_limit);
            }
            entry.fallback = gate.saw_length_match ? FallbackReason::gated_out
                                                   : FallbackReason::no_anchor;
        }
        out.report.candidates.push_back(std::move(entry));
    }
    return out;
}

}  // namespace detail

inline Assembly kvcomm_assemble(const Weights& w, const JudgeInput& input,
                                std::span<const Chunk> exec_chunks, AnchorPool& pool,
                                const StrategyConfig& config, const AttentionMask& mask,
                                bool freeze_pool = false) {
    return detail::anchored_assemble(w, input, exec_chunks, pool, config, mask,
                                     PoolKeying::by_agent, false, freeze_pool);
}

inline Assembly palkv_assemble(const Weights& w, const JudgeInput& input,
                               std::span<const Chunk> exec_chunks, AnchorPool& pool,
                               const StrategyConfig& config, const AttentionMask& mask,
                               bool freeze_pool = false) {
    return detail::anchored_assemble(w, input, exec_chunks, pool, config, mask,
                                     PoolKeying::by_agent, true, freeze_pool);
}

inline Assembly slotalign_assemble(const Weights& w, const JudgeInput& input,
                                   std::span<const Chunk> exec_chunks, AnchorPool& pool,
                                   const StrategyConfig& config, const AttentionMask& mask,
                                   bool freeze_pool = false) {
    return detail::anchored_assemble(w, input, exec_chunks, pool, config, mask,
                                     PoolKeying::by_slot, false, freeze_pool);
}

// Uniform entry point used by the harness. Dense discards its per-candidate
// chunks here; callers that need them use dense_assemble directly.
inline Assembly assemble_with_strategy(StrategyKind kind, const Weights& w,
                                       const JudgeInput& input,
                                       std::span<const Chunk> exec_chunks, AnchorPool& pool,
                                       const StrategyConfig& config, const AttentionMask& mask,
                                       bool freeze_pool = false) {
    switch (kind) {
        case StrategyKind::dense: {
            DenseAssembly d = dense_assemble(w, input, mask);
            return {std::move(d.cache), std::move(d.report)};
        }
        case StrategyKind::naive: return naive_assemble(w, input, exec_chunks, mask);
        case StrategyKind::kvcomm:
            return kvcomm_assemble(w, input, exec_chunks, pool, config, mask, freeze_pool);
        case StrategyKind::palkv:
            return palkv_assemble(w, input, exec_chunks, pool, config, mask, freeze_pool);
        case StrategyKind::slotalign:
            return slotalign_assemble(w, input, exec_chunks, pool, config, mask, freeze_pool);
    }
    throw UsageError("unknown strategy kind");
}

}  // namespace kvlab
