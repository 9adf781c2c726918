#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "kvlab/config.hpp"
#include "kvlab/errors.hpp"

namespace kvlab {

struct Span {
    std::size_t start = 0;
    std::size_t len = 0;

    std::size_t end() const { return start + len; }
    bool contains(std::size_t pos) const { return pos >= start && pos < end(); }
};

// One displayed candidate block in the judge prompt: an optional header
// (slot announcement, always dense-computed) followed by the candidate
// response body (the only region any strategy may reuse).
struct CandidateRegion {
    Span header;
    Span body;
    int display_slot = 0;  // 1-based position in the prompt
    int agent_id = 0;      // original agent, 1-based
};

// Region map of a judge prompt: shared prefix, then candidate blocks in
// display order. Spans must tile [0, total_len) with no gaps or overlaps.
struct Layout {
    Span prefix;
    std::vector<CandidateRegion> candidates;
    std::vector<int> permutation;  // slot s (1-based) -> original agent id
    std::size_t total_len = 0;

    int n() const { return static_cast<int>(candidates.size()); }

    void validate() const {
        if (prefix.start != 0) throw LayoutError("prefix must start at position 0");
        if (prefix.len == 0) throw LayoutError("prefix span is empty");
        if (candidates.empty()) throw LayoutError("layout has no candidate regions");
        if (permutation.size() != candidates.size()) {
            throw LayoutError("permutation size does not match candidate count");
        }
        std::size_t cursor = prefix.end();
        std::vector<bool> slot_seen(candidates.size(), false);
        std::vector<bool> agent_seen(candidates.size(), false);
        for (std::size_t i = 0; i < candidates.size(); ++i) {
            const CandidateRegion& r = candidates[i];
            if (r.display_slot != static_cast<int>(i) + 1) {
                throw LayoutError("candidate regions must be ordered by display slot");
            }
            if (r.header.start != cursor) {
                throw LayoutError("header span for slot " + std::to_string(r.display_slot) +
                                  " is discontiguous");
            }
            cursor = r.header.end();
            if (r.body.start != cursor) {
                throw LayoutError("candidate span for slot " + std::to_string(r.display_slot) +
                                  " is discontiguous");
            }
            if (r.body.len == 0) {
                throw LayoutError("candidate span for slot " + std::to_string(r.display_slot) +
                                  " is empty");
            }
            cursor = r.body.end();
            if (r.agent_id < 1 || r.agent_id > n() || agent_seen[r.agent_id - 1]) {
                throw LayoutError("agent ids must form a bijection over 1..N");
            }
            agent_seen[r.agent_id - 1] = true;
            slot_seen[i] = true;
            if (permutation[i] != r.agent_id) {
                throw LayoutError("permutation disagrees with candidate regions");
            }
        }
        if (cursor != total_len) {
            throw LayoutError("layout spans do not cover [0, total_len)");
        }
    }
};

// A fully tokenized judge prompt together with its region map.
struct JudgeInput {
    std::vector<Tok> tokens;
    Layout layout;
};

}  // namespace kvlab
