#pragma once

#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "kvlab/anchors.hpp"
#include "kvlab/textio.hpp"

namespace kvlab {

// One decision-log line: the judge's decision plus per-slot reuse flags.
// This schema is the replay contract; externally produced logs that conform
// to it can be scored by the metrics subcommand.
struct DecisionRecord {
    int v = 1;
    std::string example_id;
    std::string strategy;
    std::vector<int> permutation;     // slot -> original agent id
    int selected_agent = -1;          // -1 marks a parse failure
    std::string answer;
    bool parse_ok = false;
    std::vector<int> reused_flags;    // one per display slot, 0/1
    std::vector<std::string> fallback_reasons;
    std::optional<std::vector<double>> region_masses;  // prefix, slot 1..N
};

inline nlohmann::json decision_to_json(const DecisionRecord& r) {
    nlohmann::json j;
    j["v"] = r.v;
    j["example_id"] = r.example_id;
    j["strategy"] = r.strategy;
    j["permutation"] = r.permutation;
    j["selected_agent"] = r.selected_agent;
    j["answer"] = r.answer;
    j["parse_ok"] = r.parse_ok;
    j["reused_flags"] = r.reused_flags;
    j["fallback_reasons"] = r.fallback_reasons;
    if (r.region_masses) j["region_masses"] = *r.region_masses;
    return j;
}

inline DecisionRecord decision_from_json(const nlohmann::json& j) {
    DecisionRecord r;
    r.v = j.value("v", 1);
    r.example_id = j.at("example_id").get<std::string>();
    r.strategy = j.at("strategy").get<std::string>();
    r.permutation = j.at("permutation").get<std::vector<int>>();
    r.selected_agent = j.at("selected_agent").get<int>();
    r.answer = j.at("answer").get<std::string>();
    r.parse_ok = j.at("parse_ok").get<bool>();
    r.reused_flags = j.value("reused_flags", std::vector<int>{});
    r.fallback_reasons = j.value("fallback_reasons", std::vector<std::string>{});
    if (j.contains("region_masses")) {
        r.region_masses = j["region_masses"].get<std::vector<double>>();
    }
    return r;
}

inline std::string serialize_decision_log(const std::vector<DecisionRecord>& records) {
    std::string out;
    for (const DecisionRecord& r : records) {
        out += decision_to_json(r).dump();
        out += "\n";
    }
    return out;
}

inline std::vector<DecisionRecord> parse_decision_log(const std::string& text) {
    std::vector<DecisionRecord> out;
    for (const std::string& line : split_lines(text)) {
        if (line.empty()) continue;
        out.push_back(decision_from_json(nlohmann::json::parse(line)));
    }
    return out;
}

}  // namespace kvlab
