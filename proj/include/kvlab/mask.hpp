#pragma once

#include <utility>
#include <vector>

#include "kvlab/layout.hpp"

namespace kvlab {

// Attention visibility predicate: the causal constraint always applies, plus
// an optional set of blocked (query span, key span) rectangles. A dedicated
// self-only mode exists for layer-separability probes.
class AttentionMask {
public:
    struct BlockedPair {
        Span query;
        Span key;
    };

    static AttentionMask causal() { return AttentionMask{}; }

    static AttentionMask self_only() {
        AttentionMask m;
        m.self_only_ = true;
        return m;
    }

    static AttentionMask with_blocked(std::vector<BlockedPair> blocked) {
        AttentionMask m;
        m.blocked_ = std::move(blocked);
        return m;
    }

    bool allows(std::size_t query_pos, std::size_t key_pos) const {
        if (key_pos > query_pos) return false;  // never attend to the future
        if (self_only_) return key_pos == query_pos;
        for (const BlockedPair& b : blocked_) {
            if (b.query.contains(query_pos) && b.key.contains(key_pos)) return false;
        }
        return true;
    }

    const std::vector<BlockedPair>& blocked() const { return blocked_; }

private:
    bool self_only_ = false;
    std::vector<BlockedPair> blocked_;
};

// Blocks attention from candidate slot i onto candidate slots j < i. The
// prefix, headers, and within-slot attention are untouched, and so are the
// judge's own decode positions past the layout.
inline AttentionMask build_cross_candidate_mask(const Layout& layout) {
    layout.validate();
    std::vector<AttentionMask::BlockedPair> blocked;
    for (std::size_t i = 1; i < layout.candidates.size(); ++i) {
        for (std::size_t j = 0; j < i; ++j) {
            blocked.push_back({layout.candidates[i].body, layout.candidates[j].body});
        }
    }
    return AttentionMask::with_blocked(std::move(blocked));
}

}  // namespace kvlab
