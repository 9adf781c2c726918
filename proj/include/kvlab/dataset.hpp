#pragma once

#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "kvlab/rng.hpp"
#include "kvlab/textio.hpp"
#include "kvlab/vocab.hpp"

namespace kvlab {

enum class TaskFamily { keymatch, mmlu, code };

inline const char* family_name(TaskFamily f) {
    switch (f) {
        case TaskFamily::keymatch: return "keymatch";
        case TaskFamily::mmlu: return "mmlu";
        case TaskFamily::code: return "code";
    }
    return "unknown";
}

inline TaskFamily family_from_name(const std::string& name) {
    if (name == "keymatch") return TaskFamily::keymatch;
    if (name == "mmlu") return TaskFamily::mmlu;
    if (name == "code") return TaskFamily::code;
    throw ConfigError("unknown task family: " + name);
}

struct Example {
    std::string id;
    std::vector<Tok> question;
    std::string gold;  // answer value rendered as decimal text
    std::optional<std::string> question_text;
    TaskFamily family = TaskFamily::keymatch;
};

// The dataset-controlled core of a candidate response: key marker, key
// token, answer marker, answer token. Model-sampled filler is appended at
// candidate-generation time.
struct CandidatePayload {
    int agent_id = 0;
    std::vector<Tok> tokens;
    std::string answer;
};

struct DatasetRecord {
    Example example;
    std::vector<CandidatePayload> payloads;
};

struct DatasetSpec {
    std::string family = "keymatch";
    std::size_t size = 100;
    std::uint64_t seed = 1;
    int n_agents = 4;
    double correct_mix = 0.5;       // probability a candidate carries the gold key
    std::size_t question_len = 6;   // filler words appended to the question

    void validate() const {
        if (size < 1) throw ConfigError("dataset size must be >= 1");
        if (n_agents < 1 || n_agents > VocabMap::kMaxSlots) {
            throw ConfigError("n_agents must be in 1.." + std::to_string(VocabMap::kMaxSlots));
        }
        if (correct_mix < 0.0 || correct_mix > 1.0) {
            throw ConfigError("correct_mix must be in [0, 1]");
        }
        family_from_name(family);
    }
};

// Key-match selection task. The question names a key; candidates each carry
// a key and that key's answer under a seeded bijective key->answer map, so a
// candidate matches gold exactly when it carries the question's key.
inline std::vector<DatasetRecord> generate_dataset(const DatasetSpec& spec,
                                                   const VocabMap& vocab) {
    spec.validate();
    if (family_from_name(spec.family) != TaskFamily::keymatch) {
        throw ConfigError("only the keymatch family is generated synthetically");
    }
    Rng rng(derive_seed(spec.seed, 0xda7a5e7));
    // Bijection over key/answer values (n_keys == n_answers): odd multiplier
    // modulo a power of two.
    const int n = vocab.n_keys;
    const int mult = static_cast<int>(rng.bounded(static_cast<std::uint64_t>(n / 2))) * 2 + 1;
    const int shift = static_cast<int>(rng.bounded(static_cast<std::uint64_t>(n)));
    auto answer_of_key = [&](int key) { return (key * mult + shift) % n; };

    std::vector<DatasetRecord> records;
    records.reserve(spec.size);
    for (std::size_t i = 0; i < spec.size; ++i) {
        DatasetRecord rec;
        const int gold_key = static_cast<int>(rng.bounded(static_cast<std::uint64_t>(n)));
        const int gold_answer = answer_of_key(gold_key);
        rec.example.id = "ex" + std::to_string(i);
        rec.example.family = TaskFamily::keymatch;
        rec.example.gold = std::to_string(gold_answer);
        rec.example.question = {VocabMap::kQuestionKey, vocab.key_token(gold_key)};
        for (std::size_t q = 0; q < spec.question_len; ++q) {
            rec.example.question.push_back(vocab.filler_token(
                static_cast<int>(rng.bounded(static_cast<std::uint64_t>(vocab.n_filler())))));
        }
        for (int a = 1; a <= spec.n_agents; ++a) {
            CandidatePayload p;
            p.agent_id = a;
            int key = gold_key;
            if (rng.uniform() >= spec.correct_mix) {
                key = static_cast<int>(rng.bounded(static_cast<std::uint64_t>(n - 1)));
                if (key >= gold_key) ++key;  // any key but the gold one
            }
            const int ans = answer_of_key(key);
            p.tokens = {VocabMap::kCandidateKey, vocab.key_token(key), VocabMap::kCandidateAns,
                        vocab.answer_token(ans)};
            p.answer = std::to_string(ans);
            rec.payloads.push_back(std::move(p));
        }
        records.push_back(std::move(rec));
    }
    return records;
}

inline nlohmann::json dataset_record_to_json(const DatasetRecord& rec) {
    nlohmann::json j;
    j["v"] = 1;
    j["id"] = rec.example.id;
    j["family"] = family_name(rec.example.family);
    j["question"] = rec.example.question;
    j["gold"] = rec.example.gold;
    if (rec.example.question_text) j["question_text"] = *rec.example.question_text;
    nlohmann::json cands = nlohmann::json::array();
    for (const CandidatePayload& p : rec.payloads) {
        cands.push_back({{"agent_id", p.agent_id}, {"tokens", p.tokens}, {"answer", p.answer}});
    }
    j["candidates"] = cands;
    return j;
}

inline DatasetRecord dataset_record_from_json(const nlohmann::json& j) {
    DatasetRecord rec;
    rec.example.id = j.at("id").get<std::string>();
    rec.example.family = family_from_name(j.at("family").get<std::string>());
    rec.example.question = j.at("question").get<std::vector<Tok>>();
    rec.example.gold = j.at("gold").get<std::string>();
    if (j.contains("question_text")) rec.example.question_text = j["question_text"].get<std::string>();
    for (const auto& c : j.at("candidates")) {
        CandidatePayload p;
        p.agent_id = c.at("agent_id").get<int>();
        p.tokens = c.at("tokens").get<std::vector<Tok>>();
        p.answer = c.at("answer").get<std::string>();
        rec.payloads.push_back(std::move(p));
    }
    return rec;
}

inline std::string serialize_dataset(const std::vector<DatasetRecord>& records) {
    std::string out;
    for (const DatasetRecord& r : records) {
        out += dataset_record_to_json(r).dump();
        out += "\n";
    }
    return out;
}

inline std::vector<DatasetRecord> parse_dataset(const std::string& text) {
    std::vector<DatasetRecord> records;
    for (const std::string& line : split_lines(text)) {
        if (line.empty()) continue;
        records.push_back(dataset_record_from_json(nlohmann::json::parse(line)));
    }
    return records;
}

}  // namespace kvlab
