#pragma once

#include <algorithm>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "kvlab/dataset.hpp"
#include "kvlab/model.hpp"
#include "kvlab/strategies.hpp"
#include "kvlab/templates.hpp"

namespace kvlab {

enum class Regime { progressive, parallel };

inline const char* regime_name(Regime r) {
    return r == Regime::progressive ? "progressive" : "parallel";
}
inline Regime regime_from_name(const std::string& name) {
    if (name == "progressive") return Regime::progressive;
    if (name == "parallel") return Regime::parallel;
    throw ConfigError("unknown regime: " + name);
}

enum class ShuffleMode { no_shuffle, shuffle };

inline const char* shuffle_name(ShuffleMode m) {
    return m == ShuffleMode::shuffle ? "shuffle" : "no_shuffle";
}
inline ShuffleMode shuffle_from_name(const std::string& name) {
    if (name == "no_shuffle") return ShuffleMode::no_shuffle;
    if (name == "shuffle") return ShuffleMode::shuffle;
    throw ConfigError("unknown shuffle mode: " + name);
}

enum class JudgeMode { toy, text };

inline const char* judge_mode_name(JudgeMode m) { return m == JudgeMode::toy ? "toy" : "text"; }
inline JudgeMode judge_mode_from_name(const std::string& name) {
    if (name == "toy") return JudgeMode::toy;
    if (name == "text") return JudgeMode::text;
    throw ConfigError("unknown judge mode: " + name);
}

// One execution agent's output: its prompt, execution-time context, sampled
// response, and the KV chunk captured from its own prefill.
struct Candidate {
    int agent_id = 0;
    std::vector<Tok> prompt;        // p_i
    std::vector<Tok> exec_context;  // S_i^exec (prompt, question, predecessors)
    std::vector<Tok> response;      // y_i = payload ++ sampled filler
    Chunk exec_chunk;               // spans exactly the response tokens
    std::string answer;
};

struct GenOptions {
    std::size_t filler_min = 4;
    std::size_t filler_max = 8;
    double temperature = 0.8;
};

// Generates the candidate set once, dense on the execution side. Progressive
// agents see their predecessors' responses; parallel agents see only their
// own prompt and the question. Filler tokens are sampled from the model with
// a per-agent seeded stream, so candidates are diverse but reproducible.
inline std::vector<Candidate> generate_candidates(const DatasetRecord& record, int n_agents,
                                                  Regime regime, const Weights& weights,
                                                  std::span<const std::uint64_t> agent_seeds,
                                                  const GenOptions& opts, const VocabMap& vocab) {
    if (n_agents < 1) throw UsageError("need at least one agent");
    if (agent_seeds.size() != static_cast<std::size_t>(n_agents)) {
        throw UsageError("need one seed per agent");
    }
    {
        std::set<std::uint64_t> distinct(agent_seeds.begin(), agent_seeds.end());
        if (distinct.size() != agent_seeds.size()) throw UsageError("agent seeds must be distinct");
    }
    if (record.payloads.size() < static_cast<std::size_t>(n_agents)) {
        throw UsageError("dataset record has fewer payloads than agents");
    }
    if (opts.filler_min > opts.filler_max) throw UsageError("filler_min exceeds filler_max");
    if (!(opts.temperature > 0.0)) throw UsageError("sampling temperature must be positive");

    const AttentionMask causal = AttentionMask::causal();
    std::vector<Candidate> out;
    out.reserve(static_cast<std::size_t>(n_agents));
    for (int a = 1; a <= n_agents; ++a) {
        const CandidatePayload& payload = record.payloads[static_cast<std::size_t>(a - 1)];
        Candidate cand;
        cand.agent_id = a;
        cand.answer = payload.answer;
        cand.prompt = {vocab.role_token(a)};
        cand.exec_context = cand.prompt;
        cand.exec_context.insert(cand.exec_context.end(), record.example.question.begin(),
                                 record.example.question.end());
        if (regime == Regime::progressive) {
            for (const Candidate& prev : out) {
                cand.exec_context.insert(cand.exec_context.end(), prev.response.begin(),
                                         prev.response.end());
            }
        }

        Rng rng(agent_seeds[static_cast<std::size_t>(a - 1)]);
        const std::size_t filler_len =
            opts.filler_min + rng.bounded(opts.filler_max - opts.filler_min + 1);

        std::vector<Tok> full = cand.exec_context;
        full.insert(full.end(), payload.tokens.begin(), payload.tokens.end());
        auto res = prefill(weights, full, causal);
        cand.response = payload.tokens;
        std::vector<double> logits = std::move(res.last_logits);
        for (std::size_t f = 0; f < filler_len; ++f) {
            // Temperature sampling restricted to the filler range keeps the
            // synthetic grammar intact while giving per-agent diversity.
            double max_logit = -1e300;
            for (int i = 0; i < vocab.n_filler(); ++i) {
                max_logit = std::max(max_logit,
                                     logits[static_cast<std::size_t>(vocab.filler_token(i))]);
            }
            std::vector<double> cumulative(static_cast<std::size_t>(vocab.n_filler()));
            double total = 0.0;
            for (int i = 0; i < vocab.n_filler(); ++i) {
                total += std::exp((logits[static_cast<std::size_t>(vocab.filler_token(i))] -
                                   max_logit) / opts.temperature);
                cumulative[static_cast<std::size_t>(i)] = total;
            }
            const double draw = rng.uniform() * total;
            const auto it = std::lower_bound(cumulative.begin(), cumulative.end(), draw);
            const int pick = static_cast<int>(std::min<std::ptrdiff_t>(
                it - cumulative.begin(), vocab.n_filler() - 1));
            const Tok tok = vocab.filler_token(pick);
            cand.response.push_back(tok);
            logits = decode_step(weights, res.cache, tok, res.cache.size(), causal).logits;
        }
        cand.exec_chunk = extract_chunk(
            res.cache, {cand.exec_context.size(), cand.response.size()}, ChunkSource::execution);
        out.push_back(std::move(cand));
    }
    return out;
}

// Display order of candidates: slot s shows original agent permutation[s-1].
struct Permutation {
    std::vector<int> slot_to_agent;
    std::uint64_t seed = 0;

    int n() const { return static_cast<int>(slot_to_agent.size()); }
};

inline Permutation sample_permutation(int n, ShuffleMode mode, Rng& rng) {
    if (n < 1) throw UsageError("permutation needs n >= 1");
    Permutation p;
    p.slot_to_agent.resize(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) p.slot_to_agent[static_cast<std::size_t>(i)] = i + 1;
    if (mode == ShuffleMode::shuffle) {
        for (int i = n - 1; i > 0; --i) {
            const auto j = static_cast<int>(rng.bounded(static_cast<std::uint64_t>(i) + 1));
            std::swap(p.slot_to_agent[static_cast<std::size_t>(i)],
                      p.slot_to_agent[static_cast<std::size_t>(j)]);
        }
    }
    return p;
}

inline int map_back(int display_slot, const Permutation& perm) {
    if (display_slot < 1 || display_slot > perm.n()) {
        throw UsageError("display slot out of range");
    }
    return perm.slot_to_agent[static_cast<std::size_t>(display_slot - 1)];
}

// Token-level judge prompt template: judge role tokens, then the question,
// then one optionally-headed block per display slot.
struct JudgeTemplate {
    std::vector<Tok> role_tokens;
    bool header_per_slot = true;

    static JudgeTemplate standard(const VocabMap& vocab) {
        JudgeTemplate t;
        t.role_tokens = {vocab.role_token(0)};
        return t;
    }
};

inline JudgeInput build_judge_input(const JudgeTemplate& tmpl, const Example& example,
                                    std::span<const Candidate> candidates,
                                    const Permutation& perm, const VocabMap& vocab) {
    const int n = static_cast<int>(candidates.size());
    if (perm.n() != n) throw LayoutError("permutation size does not match candidate count");
    {
        std::vector<bool> seen(static_cast<std::size_t>(n), false);
        for (int a : perm.slot_to_agent) {
            if (a < 1 || a > n || seen[static_cast<std::size_t>(a - 1)]) {
                throw LayoutError("permutation is not a bijection over 1..N");
            }
            seen[static_cast<std::size_t>(a - 1)] = true;
        }
    }
    JudgeInput input;
    input.tokens = tmpl.role_tokens;
    input.tokens.insert(input.tokens.end(), example.question.begin(), example.question.end());
    if (input.tokens.empty()) throw LayoutError("judge prefix is empty");
    input.layout.prefix = {0, input.tokens.size()};
    input.layout.permutation = perm.slot_to_agent;
    for (int slot = 1; slot <= n; ++slot) {
        const int agent = perm.slot_to_agent[static_cast<std::size_t>(slot - 1)];
        const Candidate& cand = candidates[static_cast<std::size_t>(agent - 1)];
        if (cand.response.empty()) throw LayoutError("candidate response is empty");
        CandidateRegion region;
        region.display_slot = slot;
        region.agent_id = agent;
        region.header.start = input.tokens.size();
        if (tmpl.header_per_slot) {
            input.tokens.push_back(VocabMap::kHeader);
            input.tokens.push_back(vocab.slot_token(slot));
        }
        region.header.len = input.tokens.size() - region.header.start;
        region.body.start = input.tokens.size();
        input.tokens.insert(input.tokens.end(), cand.response.begin(), cand.response.end());
        region.body.len = input.tokens.size() - region.body.start;
        input.layout.candidates.push_back(region);
    }
    input.layout.total_len = input.tokens.size();
    input.layout.validate();
    return input;
}

struct JudgeDecision {
    std::string example_id;
    StrategyKind strategy = StrategyKind::dense;
    std::vector<int> permutation;
    int selected_agent = -1;  // -1 marks a parse failure
    int selected_slot = -1;
    std::string answer;
    bool parse_ok = false;
    std::string rendered_text;  // text mode transcript
    std::optional<AttentionRecord> first_step_attention;
};

struct ParsedDecision {
    std::optional<int> slot;
    std::optional<std::string> answer;
};

// Extracts (selected display slot, final answer) from a judge transcript.
// The slot comes from the first line matching the selection pattern; the
// answer grammar depends on the task family. Failures are values.
inline ParsedDecision parse_decision(const std::string& text, TaskFamily family,
                                     const TextTemplates& tmpl = {}) {
    ParsedDecision out;
    const auto lines = split_lines(text);
    for (const std::string& raw : lines) {
        const std::string line = trim(raw);
        if (line.rfind(tmpl.selection_prefix, 0) != 0) continue;
        const std::string rest = trim(line.substr(tmpl.selection_prefix.size()));
        std::size_t i = 0;
        while (i < rest.size() && rest[i] >= '0' && rest[i] <= '9') ++i;
        if (i > 0) {
            out.slot = std::stoi(rest.substr(0, i));
            break;
        }
    }
    switch (family) {
        case TaskFamily::keymatch: {
            for (auto it = lines.rbegin(); it != lines.rend(); ++it) {
                const std::string line = trim(*it);
                if (line.rfind(tmpl.answer_prefix, 0) != 0) continue;
                std::string rest = trim(line.substr(tmpl.answer_prefix.size()));
                std::size_t i = 0;
                if (i < rest.size() && (rest[i] == '-' || rest[i] == '+')) ++i;
                std::size_t digits = i;
                while (digits < rest.size() &&
                       ((rest[digits] >= '0' && rest[digits] <= '9') || rest[digits] == '.')) {
                    ++digits;
                }
                if (digits > i) {
                    out.answer = rest.substr(0, digits);
                    break;
                }
            }
            break;
        }
        case TaskFamily::mmlu: {
            for (auto it = lines.rbegin(); it != lines.rend(); ++it) {
                const std::string line = trim(*it);
                if (line.empty()) continue;
                if (line.size() == 1 && line[0] >= 'A' && line[0] <= 'D') out.answer = line;
                break;  // only the final non-empty line counts
            }
            break;
        }
        case TaskFamily::code: {
            // First fenced code block, fence language tag optional.
            std::optional<std::size_t> open;
            std::string block;
            for (std::size_t i = 0; i < lines.size(); ++i) {
                const std::string line = trim(lines[i]);
                if (line.rfind("```", 0) == 0) {
                    if (!open) {
                        open = i;
                    } else {
                        out.answer = block;
                        break;
                    }
                } else if (open) {
                    if (!block.empty()) block += "\n";
                    block += lines[i];
                }
            }
            break;
        }
    }
    return out;
}

struct JudgeOptions {
    JudgeMode mode = JudgeMode::toy;
    std::vector<Tok> slot_tokens;
    std::vector<Tok> answer_tokens;
    bool record_attention = false;
    std::size_t text_justification_len = 4;  // free greedy tokens in text mode
};

// Decides on an assembled judge cache. Toy mode: the first decode step's
// constrained argmax over slot-id tokens picks the displayed slot, the
// second step's constrained argmax over answer tokens picks the answer.
// Text mode runs the same structured decode, renders it, and trusts only
// what parse_decision recovers from the text.
inline JudgeDecision judge_decide(const Weights& weights, const KVCache& assembled,
                                  const JudgeInput& input, const JudgeOptions& opts,
                                  const AttentionMask& mask, const VocabMap& vocab,
                                  TaskFamily family = TaskFamily::keymatch) {
    if (assembled.size() != input.layout.total_len) {
        throw UsageError("cache length does not cover the judge input");
    }
    if (opts.slot_tokens.empty() || opts.answer_tokens.empty()) {
        throw UsageError("judge needs non-empty slot and answer token sets");
    }
    JudgeDecision decision;
    decision.permutation = input.layout.permutation;

    KVCache cache = assembled;
    auto first = decode_step(weights, cache, VocabMap::kSelTrigger, cache.size(), mask,
                             opts.record_attention);
    if (opts.record_attention) decision.first_step_attention = std::move(first.record);
    const Tok slot_tok = constrained_argmax(first.logits, opts.slot_tokens);

    auto second = decode_step(weights, cache, slot_tok, cache.size(), mask);
    if (opts.mode == JudgeMode::toy) {
        const Tok ans_tok = constrained_argmax(second.logits, opts.answer_tokens);
        decision.selected_slot = vocab.slot_of(slot_tok);
        decision.selected_agent = map_back(decision.selected_slot,
                                           {input.layout.permutation, 0});
        decision.answer = std::to_string(vocab.answer_of(ans_tok));
        decision.parse_ok = true;
        return decision;
    }

    // Text mode: structured positions are grammar-constrained, the
    // justification run is free greedy decoding over the full vocabulary.
    std::vector<Tok> transcript = {VocabMap::kSelTrigger, slot_tok};
    std::vector<double> logits = std::move(second.logits);
    for (std::size_t i = 0; i < opts.text_justification_len; ++i) {
        Tok best = 0;
        for (std::size_t t = 1; t < logits.size(); ++t) {
            if (logits[t] > logits[static_cast<std::size_t>(best)]) best = static_cast<Tok>(t);
        }
        transcript.push_back(best);
        logits = decode_step(weights, cache, best, cache.size(), mask).logits;
    }
    transcript.push_back(VocabMap::kAnsTrigger);
    logits = decode_step(weights, cache, VocabMap::kAnsTrigger, cache.size(), mask).logits;
    transcript.push_back(constrained_argmax(logits, opts.answer_tokens));

    decision.rendered_text = detokenize(transcript, vocab);
    const ParsedDecision parsed = parse_decision(decision.rendered_text, family);
    if (parsed.answer) decision.answer = *parsed.answer;
    if (parsed.slot && *parsed.slot >= 1 && *parsed.slot <= input.layout.n()) {
        decision.selected_slot = *parsed.slot;
        decision.selected_agent = map_back(*parsed.slot, {input.layout.permutation, 0});
        decision.parse_ok = parsed.answer.has_value();
    }
    return decision;
}

}  // namespace kvlab
