#pragma once

#include <cstddef>

#include "kvlab/config.hpp"
#include "kvlab/errors.hpp"

namespace kvlab {

// Token id map for the synthetic key-match task. Low ids are control tokens,
// then contiguous ranges for display-slot ids, agent roles, answer values,
// key values, and filler words. Everything else in the vocabulary is unused.
struct VocabMap {
    static constexpr Tok kPad = 0;
    static constexpr Tok kSelTrigger = 1;   // renders "Selected agent id:"
    static constexpr Tok kAnsTrigger = 2;   // renders "The answer is"
    static constexpr Tok kHeader = 3;       // slot header marker
    static constexpr Tok kQuestionKey = 4;  // precedes the question's key token
    static constexpr Tok kCandidateKey = 5;
    static constexpr Tok kCandidateAns = 6;
    static constexpr int kMaxSlots = 8;

    std::size_t vocab_size = 512;
    Tok slot_base = 8;    // slot s -> slot_base + s, s in 1..kMaxSlots
    Tok role_base = 17;   // role r -> role_base + r; r = 0 is the judge
    int n_roles = 9;
    Tok answer_base = 26;
    int n_answers = 64;
    Tok key_base = 90;
    int n_keys = 64;
    Tok filler_base = 154;

    static VocabMap for_config(const ModelConfig& cfg) {
        VocabMap v;
        v.vocab_size = cfg.vocab_size;
        if (v.n_filler() < 16) {
            throw ConfigError("vocab_size too small for the key-match vocabulary (need >= " +
                              std::to_string(v.filler_base + 16) + ")");
        }
        return v;
    }

    int n_filler() const { return static_cast<int>(vocab_size) - filler_base; }

    Tok slot_token(int slot) const {
        if (slot < 1 || slot > kMaxSlots) throw UsageError("display slot out of range");
        return slot_base + slot;
    }
    // -1 when the token is not a slot id.
    int slot_of(Tok t) const {
        const int s = static_cast<int>(t) - slot_base;
        return (s >= 1 && s <= kMaxSlots) ? s : -1;
    }

    Tok role_token(int role) const {
        if (role < 0 || role >= n_roles) throw UsageError("role id out of range");
        return role_base + role;
    }

    Tok answer_token(int value) const {
        if (value < 0 || value >= n_answers) throw UsageError("answer value out of range");
        return answer_base + value;
    }
    int answer_of(Tok t) const {
        const int a = static_cast<int>(t) - answer_base;
        return (a >= 0 && a < n_answers) ? a : -1;
    }

    Tok key_token(int value) const {
        if (value < 0 || value >= n_keys) throw UsageError("key value out of range");
        return key_base + value;
    }

    Tok filler_token(int index) const {
        if (index < 0 || index >= n_filler()) throw UsageError("filler index out of range");
        return filler_base + index;
    }
};

}  // namespace kvlab
