#pragma once

#include <span>
#include <string>

#include "kvlab/vocab.hpp"

namespace kvlab {

// Textual grammar of the judge protocol. The selection and answer line
// prefixes are what the decision parser matches; the header format is used
// when rendering token streams as text.
struct TextTemplates {
    std::string selection_prefix = "Selected agent id:";
    std::string answer_prefix = "The answer is";
    std::string header_before_slot = "Agent ";
    std::string header_after_slot = ", role is Solver, output is:";
    std::string candidates_banner = "Candidate Agent Answers:";
};

// Renders control tokens as their grammar strings and everything else as a
// plain word, so a grammar-following decode parses back losslessly.
inline std::string detokenize(std::span<const Tok> tokens, const VocabMap& vocab,
                              const TextTemplates& tmpl = {}) {
    std::string out;
    for (Tok t : tokens) {
        if (t == VocabMap::kSelTrigger) {
            out += tmpl.selection_prefix;
        } else if (t == VocabMap::kAnsTrigger) {
            out += "\n" + tmpl.answer_prefix;
        } else if (t == VocabMap::kHeader) {
            out += "\n" + tmpl.header_before_slot;
        } else if (vocab.slot_of(t) >= 0) {
            out += " " + std::to_string(vocab.slot_of(t)) + "\n";
        } else if (vocab.answer_of(t) >= 0) {
            out += " " + std::to_string(vocab.answer_of(t));
        } else {
            out += " t" + std::to_string(t);
        }
    }
    return out;
}

}  // namespace kvlab
