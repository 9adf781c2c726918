#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "kvlab/gating.hpp"
#include "kvlab/metrics.hpp"
#include "kvlab/pipeline.hpp"
#include "kvlab/version.hpp"

namespace kvlab {

struct GenerationConfig {
    std::uint64_t agent_seed_base = 100;
    std::size_t filler_min = 4;
    std::size_t filler_max = 8;
    double temperature = 0.8;
};

// One experiment: a dataset, a model, a strategy list (dense always first,
// it is the JCR reference), and every seed spelled out. Serializes to a
// single JSON document whose digest identifies the run.
struct ExperimentConfig {
    ModelConfig model;
    int n_agents = 4;
    Regime regime = Regime::progressive;
    ShuffleMode shuffle = ShuffleMode::no_shuffle;
    JudgeMode judge_mode = JudgeMode::toy;
    std::vector<StrategyConfig> strategies;
    DatasetSpec dataset;
    GenerationConfig generation;
    std::uint64_t permutation_seed = 7;
    // Warm-replay protocol: an unmeasured pass with warm_gamma builds the
    // anchor pools, then the measured pass runs (frozen when requested).
    bool warm_replay = false;
    double warm_gamma = 0.0;
    bool freeze_measured_pass = false;
    bool cross_candidate_mask = false;
    bool record_attention = false;
    bool emit_svg = false;
    std::string out_dir;
    std::string load_pools_dir;

    void validate() const {
        model.validate();
        dataset.validate();
        if (n_agents < 1 || n_agents > VocabMap::kMaxSlots) {
            throw ConfigError("n_agents must be in 1.." + std::to_string(VocabMap::kMaxSlots));
        }
        if (strategies.empty()) throw ConfigError("strategy list is empty");
        bool has_dense = false;
        std::vector<bool> seen(8, false);
        for (const StrategyConfig& s : strategies) {
            s.validate();
            const auto idx = static_cast<std::size_t>(s.kind);
            if (seen[idx]) throw ConfigError("duplicate strategy in list");
            seen[idx] = true;
            has_dense |= s.kind == StrategyKind::dense;
        }
        if (!has_dense) throw ConfigError("strategy list must include dense (the JCR reference)");
        if (generation.filler_min > generation.filler_max) {
            throw ConfigError("filler_len_min exceeds filler_len_max");
        }
        if (!(generation.temperature > 0.0)) throw ConfigError("temperature must be positive");
        if (warm_gamma < 0.0) throw ConfigError("warm_gamma must be non-negative");
    }

    // Dense first, other strategies in listed order.
    std::vector<StrategyConfig> ordered_strategies() const {
        std::vector<StrategyConfig> out;
        for (const StrategyConfig& s : strategies) {
            if (s.kind == StrategyKind::dense) out.push_back(s);
        }
        for (const StrategyConfig& s : strategies) {
            if (s.kind != StrategyKind::dense) out.push_back(s);
        }
        return out;
    }

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["model"] = {{"vocab_size", model.vocab_size}, {"d_model", model.d_model},
                      {"n_layers", model.n_layers},     {"n_heads", model.n_heads},
                      {"head_dim", model.head_dim},     {"rope_base", model.rope_base},
                      {"seed", model.seed}};
        j["n_agents"] = n_agents;
        j["regime"] = regime_name(regime);
        j["shuffle"] = shuffle_name(shuffle);
        j["judge_mode"] = judge_mode_name(judge_mode);
        nlohmann::json strats = nlohmann::json::array();
        for (const StrategyConfig& s : strategies) {
            nlohmann::json js = {{"kind", strategy_name(s.kind)},
                                 {"gamma", s.gamma},
                                 {"softmax_temperature", s.softmax_temperature},
                                 {"pool_limit", s.pool_limit}};
            if (s.top_k) js["top_k"] = *s.top_k;
            strats.push_back(js);
        }
        j["strategies"] = strats;
        j["dataset"] = {{"family", dataset.family},   {"size", dataset.size},
                        {"seed", dataset.seed},       {"n_agents", dataset.n_agents},
                        {"correct_mix", dataset.correct_mix},
                        {"question_len", dataset.question_len}};
        j["generation"] = {{"agent_seed_base", generation.agent_seed_base},
                           {"filler_len_min", generation.filler_min},
                           {"filler_len_max", generation.filler_max},
                           {"temperature", generation.temperature}};
        j["permutation_seed"] = permutation_seed;
        j["warm_replay"] = warm_replay;
        j["warm_gamma"] = warm_gamma;
        j["freeze_measured_pass"] = freeze_measured_pass;
        j["cross_candidate_mask"] = cross_candidate_mask;
        j["record_attention"] = record_attention;
        j["emit_svg"] = emit_svg;
        j["out_dir"] = out_dir;
        j["load_pools_dir"] = load_pools_dir;
        return j;
    }

    static ExperimentConfig from_json(const nlohmann::json& j) {
        ExperimentConfig c;
        if (j.contains("model")) {
            const auto& m = j["model"];
            c.model.vocab_size = m.value("vocab_size", c.model.vocab_size);
            c.model.d_model = m.value("d_model", c.model.d_model);
            c.model.n_layers = m.value("n_layers", c.model.n_layers);
            c.model.n_heads = m.value("n_heads", c.model.n_heads);
            c.model.head_dim = m.value("head_dim", c.model.head_dim);
            c.model.rope_base = m.value("rope_base", c.model.rope_base);
            c.model.seed = m.value("seed", c.model.seed);
        }
        c.n_agents = j.value("n_agents", c.n_agents);
        c.regime = regime_from_name(j.value("regime", "progressive"));
        c.shuffle = shuffle_from_name(j.value("shuffle", "no_shuffle"));
        c.judge_mode = judge_mode_from_name(j.value("judge_mode", "toy"));
        if (j.contains("strategies")) {
            for (const auto& js : j["strategies"]) {
                StrategyConfig s;
                s.kind = strategy_from_name(js.at("kind").get<std::string>());
                s.gamma = js.value("gamma", 0.0);
                s.softmax_temperature = js.value("softmax_temperature", 1.0);
                s.pool_limit = js.value("pool_limit", std::size_t{5});
                if (js.contains("top_k")) s.top_k = js["top_k"].get<std::size_t>();
                c.strategies.push_back(s);
            }
        } else {
            c.strategies.push_back(StrategyConfig{});
        }
        if (j.contains("dataset")) {
            const auto& d = j["dataset"];
            c.dataset.family = d.value("family", c.dataset.family);
            c.dataset.size = d.value("size", c.dataset.size);
            c.dataset.seed = d.value("seed", c.dataset.seed);
            c.dataset.n_agents = d.value("n_agents", c.n_agents);
            c.dataset.correct_mix = d.value("correct_mix", c.dataset.correct_mix);
            c.dataset.question_len = d.value("question_len", c.dataset.question_len);
        }
        if (j.contains("generation")) {
            const auto& g = j["generation"];
            c.generation.agent_seed_base = g.value("agent_seed_base",
                                                   c.generation.agent_seed_base);
            c.generation.filler_min = g.value("filler_len_min", c.generation.filler_min);
            c.generation.filler_max = g.value("filler_len_max", c.generation.filler_max);
            c.generation.temperature = g.value("temperature", c.generation.temperature);
        }
        c.permutation_seed = j.value("permutation_seed", c.permutation_seed);
        c.warm_replay = j.value("warm_replay", false);
        c.warm_gamma = j.value("warm_gamma", 0.0);
        c.freeze_measured_pass = j.value("freeze_measured_pass", false);
        c.cross_candidate_mask = j.value("cross_candidate_mask", false);
        c.record_attention = j.value("record_attention", false);
        c.emit_svg = j.value("emit_svg", false);
        c.out_dir = j.value("out_dir", "");
        c.load_pools_dir = j.value("load_pools_dir", "");
        return c;
    }

    std::string digest() const { return fnv1a_hex(to_json().dump()); }
};

struct RunManifest {
    std::string config_digest;
    std::string version;
    std::map<std::string, std::string> file_digests;

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["config_digest"] = config_digest;
        j["version"] = version;
        j["files"] = file_digests;
        return j;
    }
};

struct StrategyOutputs {
    StrategyConfig cfg;
    std::vector<DecisionRecord> decisions;
    std::vector<ReuseReport> reports;
    std::optional<RegionMassProfile> mean_profile;
    std::string pool_snapshot;  // anchored strategies only
};

struct RunOutputs {
    ExperimentConfig config;
    std::vector<DatasetRecord> dataset;
    std::vector<StrategyOutputs> strategies;  // dense first
    std::vector<MetricReport> metrics;
    std::vector<std::vector<std::uint64_t>> crosstab;  // empty without reuse strategies
    bool candidate_fixity_ok = false;
    RunManifest manifest;
};

namespace detail {

template <typename Fn>
auto stage_guard(const std::string& stage, const std::string& example_id, Fn&& fn) {
    const std::string tag = "[stage=" + stage +
                            (example_id.empty() ? "" : " example=" + example_id) + "] ";
    try {
        return fn();
    } catch (ConfigError& e) {
        throw ConfigError(tag + e.what());
    } catch (UsageError& e) {
        throw UsageError(tag + e.what());
    } catch (AssemblyError& e) {
        throw AssemblyError(tag + e.what());
    } catch (LayoutError& e) {
        throw LayoutError(tag + e.what());
    } catch (ProtocolError& e) {
        throw ProtocolError(tag + e.what());
    }
}

struct PreparedExample {
    DatasetRecord record;
    std::vector<Candidate> candidates;
    JudgeInput input;
    AttentionMask mask;
    JudgeOptions judge_opts;
};

inline std::vector<std::uint64_t> agent_seeds_for(const GenerationConfig& gen, std::size_t e,
                                                  int n_agents) {
    const std::uint64_t base = derive_seed(gen.agent_seed_base, e);
    std::vector<std::uint64_t> seeds;
    for (int a = 1; a <= n_agents; ++a) {
        seeds.push_back(derive_seed(base, static_cast<std::uint64_t>(a)));
    }
    return seeds;
}

inline std::vector<PreparedExample> prepare_examples(const ExperimentConfig& config,
                                                     const Weights& weights,
                                                     const VocabMap& vocab) {
    DatasetSpec spec = config.dataset;
    spec.n_agents = config.n_agents;
    std::vector<DatasetRecord> records =
        stage_guard("dataset", "", [&] { return generate_dataset(spec, vocab); });

    GenOptions gen_opts;
    gen_opts.filler_min = config.generation.filler_min;
    gen_opts.filler_max = config.generation.filler_max;
    gen_opts.temperature = config.generation.temperature;
    const JudgeTemplate tmpl = JudgeTemplate::standard(vocab);

    Rng perm_rng(config.permutation_seed);
    std::vector<PreparedExample> prepared;
    prepared.reserve(records.size());
    for (std::size_t e = 0; e < records.size(); ++e) {
        PreparedExample pe;
        pe.record = std::move(records[e]);
        const std::string& id = pe.record.example.id;
        pe.candidates = stage_guard("candidates", id, [&] {
            return generate_candidates(pe.record, config.n_agents, config.regime, weights,
                                       agent_seeds_for(config.generation, e, config.n_agents),
                                       gen_opts, vocab);
        });
        const Permutation perm = sample_permutation(config.n_agents, config.shuffle, perm_rng);
        pe.input = stage_guard("judge-input", id, [&] {
            return build_judge_input(tmpl, pe.record.example, pe.candidates, perm, vocab);
        });
        pe.mask = config.cross_candidate_mask ? build_cross_candidate_mask(pe.input.layout)
                                              : AttentionMask::causal();
        pe.judge_opts.mode = config.judge_mode;
        pe.judge_opts.record_attention = config.record_attention;
        for (int s = 1; s <= config.n_agents; ++s) {
            pe.judge_opts.slot_tokens.push_back(vocab.slot_token(s));
        }
        for (const Candidate& c : pe.candidates) {
            pe.judge_opts.answer_tokens.push_back(vocab.answer_token(std::stoi(c.answer)));
        }
        std::sort(pe.judge_opts.answer_tokens.begin(), pe.judge_opts.answer_tokens.end());
        pe.judge_opts.answer_tokens.erase(std::unique(pe.judge_opts.answer_tokens.begin(),
                                                      pe.judge_opts.answer_tokens.end()),
                                          pe.judge_opts.answer_tokens.end());
        prepared.push_back(std::move(pe));
    }
    return prepared;
}

inline bool anchored_kind(StrategyKind k) {
    return k == StrategyKind::kvcomm || k == StrategyKind::palkv ||
           k == StrategyKind::slotalign;
}

// One sequential pass of a strategy over the example stream. Pools mutate in
// example order; decisions and reuse reports are collected when measured.
inline void strategy_pass(const ExperimentConfig& config, const Weights& weights,
                          const VocabMap& vocab, std::vector<PreparedExample>& prepared,
                          const StrategyConfig& strat, AnchorPool& pool, bool freeze,
                          StrategyOutputs* out) {
    for (PreparedExample& pe : prepared) {
        const std::string& id = pe.record.example.id;
        Assembly assembly = stage_guard("assemble", id, [&] {
            std::vector<Chunk> chunks;
            chunks.reserve(pe.candidates.size());
            for (const Candidate& c : pe.candidates) chunks.push_back(c.exec_chunk);
            return assemble_with_strategy(strat.kind, weights, pe.input, chunks, pool, strat,
                                          pe.mask, freeze);
        });
        if (!out) continue;
        JudgeDecision decision = stage_guard("judge", id, [&] {
            return judge_decide(weights, assembly.cache, pe.input, pe.judge_opts, pe.mask,
                                vocab, pe.record.example.family);
        });
        DecisionRecord rec;
        rec.example_id = id;
        rec.strategy = strategy_name(strat.kind);
        rec.permutation = pe.input.layout.permutation;
        rec.selected_agent = decision.selected_agent;
        rec.answer = decision.answer;
        rec.parse_ok = decision.parse_ok;
        for (const CandidateReuse& c : assembly.report.candidates) {
            rec.reused_flags.push_back(c.reused ? 1 : 0);
            rec.fallback_reasons.push_back(fallback_name(c.fallback));
        }
        if (decision.first_step_attention) {
            const RegionMassProfile profile = stage_guard("diagnostics", id, [&] {
                return attention_region_mass(*decision.first_step_attention, pe.input.layout);
            });
            std::vector<double> masses = {profile.prefix};
            masses.insert(masses.end(), profile.slots.begin(), profile.slots.end());
            rec.region_masses = masses;
        }
        out->decisions.push_back(std::move(rec));
        out->reports.push_back(std::move(assembly.report));
    }
}

inline StrategyOutputs run_strategy_stream(const ExperimentConfig& config,
                                           const Weights& weights, const VocabMap& vocab,
                                           std::vector<PreparedExample>& prepared,
                                           const StrategyConfig& strat) {
    StrategyOutputs out;
    out.cfg = strat;

    AnchorPool pool;
    if (anchored_kind(strat.kind) && !config.load_pools_dir.empty()) {
        const std::filesystem::path snap = std::filesystem::path(config.load_pools_dir) /
                                           ("pools_" + std::string(strategy_name(strat.kind)) +
                                            ".txt");
        if (std::filesystem::exists(snap)) {
            pool = AnchorPool::deserialize(read_file(snap));
        }
    }
    if (anchored_kind(strat.kind) && config.warm_replay) {
        StrategyConfig warm = strat;
        warm.gamma = config.warm_gamma;
        strategy_pass(config, weights, vocab, prepared, warm, pool, false, nullptr);
    }
    strategy_pass(config, weights, vocab, prepared, strat, pool,
                  config.freeze_measured_pass, &out);
    if (anchored_kind(strat.kind)) out.pool_snapshot = pool.serialize();

    if (config.record_attention) {
        RegionMassProfile mean;
        std::size_t count = 0;
        for (const DecisionRecord& d : out.decisions) {
            if (!d.region_masses) continue;
            if (count == 0) mean.slots.assign(d.region_masses->size() - 1, 0.0);
            mean.prefix += (*d.region_masses)[0];
            for (std::size_t i = 1; i < d.region_masses->size(); ++i) {
                mean.slots[i - 1] += (*d.region_masses)[i];
            }
            ++count;
        }
        if (count > 0) {
            mean.prefix /= static_cast<double>(count);
            for (double& s : mean.slots) s /= static_cast<double>(count);
            out.mean_profile = mean;
        }
    }
    return out;
}

inline void compute_run_metrics(RunOutputs& run) {
    const std::vector<DecisionRecord>& dense = run.strategies.front().decisions;
    std::map<std::string, std::string> gold;
    for (const DatasetRecord& r : run.dataset) gold[r.example.id] = r.example.gold;

    const std::string regime = regime_name(run.config.regime);
    const std::string shuffle = shuffle_name(run.config.shuffle);
    auto tag = [&](MetricReport m, const char* strategy) {
        m.strategy = strategy;
        m.regime = regime;
        m.shuffle = shuffle;
        return m;
    };

    for (const StrategyOutputs& s : run.strategies) {
        const char* name = strategy_name(s.cfg.kind);
        run.metrics.push_back(tag(accuracy(s.decisions, gold), name));
        run.metrics.push_back(tag(jcr(s.decisions, dense), name));
        run.metrics.push_back(tag(jcr_filtered(s.decisions, dense), name));
        run.metrics.push_back(tag(reuse_rate(std::span<const ReuseReport>(s.reports)), name));
        run.metrics.push_back(tag(parse_failure_rate(s.decisions), name));
    }

    // ACC/JCR counts cross-tab over the reuse strategies.
    std::vector<const StrategyOutputs*> reuse_strategies;
    for (const StrategyOutputs& s : run.strategies) {
        if (s.cfg.kind != StrategyKind::dense) reuse_strategies.push_back(&s);
    }
    if (!reuse_strategies.empty()) {
        std::vector<int> acc_counts, jcr_counts;
        for (std::size_t e = 0; e < dense.size(); ++e) {
            int acc_n = 0, jcr_n = 0;
            for (const StrategyOutputs* s : reuse_strategies) {
                const DecisionRecord& d = s->decisions[e];
                if (d.parse_ok && d.answer == gold[d.example_id]) ++acc_n;
                if (d.parse_ok && dense[e].parse_ok &&
                    d.selected_agent == dense[e].selected_agent) {
                    ++jcr_n;
                }
            }
            acc_counts.push_back(acc_n);
            jcr_counts.push_back(jcr_n);
        }
        run.crosstab = counts_crosstab(acc_counts, jcr_counts,
                                       static_cast<int>(reuse_strategies.size()));
    }
}

// Layout fidelity self-test: every candidate span holds that candidate's
// response tokens verbatim.
inline bool check_candidate_fixity(const std::vector<PreparedExample>& prepared) {
    for (const PreparedExample& pe : prepared) {
        for (const CandidateRegion& r : pe.input.layout.candidates) {
            const auto& resp =
                pe.candidates[static_cast<std::size_t>(r.agent_id - 1)].response;
            if (r.body.len != resp.size()) return false;
            for (std::size_t i = 0; i < resp.size(); ++i) {
                if (pe.input.tokens[r.body.start + i] != resp[i]) return false;
            }
        }
    }
    return true;
}

inline std::string metrics_csv(const RunOutputs& run) {
    std::string csv = "strategy,regime,shuffle,metric,value,numerator,denominator\n";
    for (const MetricReport& m : run.metrics) {
        csv += m.strategy + "," + m.regime + "," + m.shuffle + "," + m.name + "," +
               fixed2(m.value) + "," + std::to_string(m.numerator) + "," +
               std::to_string(m.denominator) + "\n";
    }
    return csv;
}

inline std::string crosstab_csv(const RunOutputs& run) {
    std::string csv = "acc_count,jcr_count,examples\n";
    for (std::size_t i = 0; i < run.crosstab.size(); ++i) {
        for (std::size_t j = 0; j < run.crosstab[i].size(); ++j) {
            csv += std::to_string(i) + "," + std::to_string(j) + "," +
                   std::to_string(run.crosstab[i][j]) + "\n";
        }
    }
    return csv;
}

inline std::string profiles_csv(const RunOutputs& run) {
    std::string csv = "strategy,region,mass\n";
    for (const StrategyOutputs& s : run.strategies) {
        if (!s.mean_profile) continue;
        csv += std::string(strategy_name(s.cfg.kind)) + ",prefix," +
               float_compact(s.mean_profile->prefix) + "\n";
        for (std::size_t i = 0; i < s.mean_profile->slots.size(); ++i) {
            csv += std::string(strategy_name(s.cfg.kind)) + ",slot" + std::to_string(i + 1) +
                   "," + float_compact(s.mean_profile->slots[i]) + "\n";
        }
    }
    return csv;
}

// Grouped bar chart of mean region masses, one group per strategy.
inline std::string profiles_svg(const RunOutputs& run) {
    std::vector<const StrategyOutputs*> with_profiles;
    for (const StrategyOutputs& s : run.strategies) {
        if (s.mean_profile) with_profiles.push_back(&s);
    }
    if (with_profiles.empty()) return "";
    const std::size_t regions = 1 + with_profiles.front()->mean_profile->slots.size();
    const int bar_w = 18, gap = 8, group_gap = 30, chart_h = 160, margin = 40;
    const int group_w = static_cast<int>(regions) * (bar_w + gap) + group_gap;
    const int width = margin * 2 + group_w * static_cast<int>(with_profiles.size());
    const int height = chart_h + 2 * margin;
    std::string svg = "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" +
                      std::to_string(width) + "\" height=\"" + std::to_string(height) + "\">\n";
    const char* palette[] = {"#4878d0", "#ee854a", "#6acc64", "#d65f5f", "#956cb4",
                             "#8c613c", "#dc7ec0", "#797979"};
    for (std::size_t g = 0; g < with_profiles.size(); ++g) {
        const RegionMassProfile& p = *with_profiles[g]->mean_profile;
        std::vector<double> masses = {p.prefix};
        masses.insert(masses.end(), p.slots.begin(), p.slots.end());
        const int gx = margin + static_cast<int>(g) * group_w;
        for (std::size_t r = 0; r < masses.size(); ++r) {
            const int h = static_cast<int>(masses[r] * chart_h);
            const int x = gx + static_cast<int>(r) * (bar_w + gap);
            const int y = margin + chart_h - h;
            svg += "<rect x=\"" + std::to_string(x) + "\" y=\"" + std::to_string(y) +
                   "\" width=\"" + std::to_string(bar_w) + "\" height=\"" + std::to_string(h) +
                   "\" fill=\"" + palette[r % 8] + "\"/>\n";
        }
        svg += "<text x=\"" + std::to_string(gx) + "\" y=\"" +
               std::to_string(margin + chart_h + 16) + "\" font-size=\"11\">" +
               strategy_name(with_profiles[g]->cfg.kind) + "</text>\n";
    }
    svg += "</svg>\n";
    return svg;
}

inline nlohmann::json summary_json(const RunOutputs& run) {
    nlohmann::json j;
    j["version"] = kArtifactVersion;
    j["config_digest"] = run.config.digest();
    j["examples"] = run.dataset.size();
    j["candidate_fixity_ok"] = run.candidate_fixity_ok;
    nlohmann::json metrics = nlohmann::json::array();
    for (const MetricReport& m : run.metrics) {
        metrics.push_back({{"strategy", m.strategy},
                           {"regime", m.regime},
                           {"shuffle", m.shuffle},
                           {"metric", m.name},
                           {"value", m.value},
                           {"numerator", m.numerator},
                           {"denominator", m.denominator}});
    }
    j["metrics"] = metrics;
    if (!run.crosstab.empty()) j["crosstab"] = run.crosstab;
    return j;
}

}  // namespace detail

// Writes every artifact of a completed run and finishes with the manifest.
// Byte-deterministic given identical outputs.
inline RunManifest emit_report(RunOutputs& run, const std::filesystem::path& out_dir) {
    RunManifest manifest;
    manifest.config_digest = run.config.digest();
    manifest.version = kArtifactVersion;
    auto emit = [&](const std::string& name, const std::string& content) {
        write_file(out_dir / name, content);
        manifest.file_digests[name] = fnv1a_hex(content);
    };
    emit("config.json", run.config.to_json().dump(2) + "\n");
    emit("dataset.jsonl", serialize_dataset(run.dataset));
    for (const StrategyOutputs& s : run.strategies) {
        emit("decisions_" + std::string(strategy_name(s.cfg.kind)) + ".jsonl",
             serialize_decision_log(s.decisions));
        if (!s.pool_snapshot.empty()) {
            emit("pools_" + std::string(strategy_name(s.cfg.kind)) + ".txt", s.pool_snapshot);
        }
    }
    emit("metrics.csv", detail::metrics_csv(run));
    if (!run.crosstab.empty()) emit("crosstab.csv", detail::crosstab_csv(run));
    if (run.config.record_attention) {
        emit("profiles.csv", detail::profiles_csv(run));
        if (run.config.emit_svg) {
            const std::string svg = detail::profiles_svg(run);
            if (!svg.empty()) emit("profiles.svg", svg);
        }
    }
    emit("summary.json", detail::summary_json(run).dump(2) + "\n");
    write_file(out_dir / "manifest.json", manifest.to_json().dump(2) + "\n");
    run.manifest = manifest;
    return manifest;
}

// Full experiment: candidates generated once (dense execution side), every
// strategy judges the identical inputs under the identical permutations,
// anchor pools evolve in example order, metrics computed against dense.
inline RunOutputs run_experiment(const ExperimentConfig& config) {
    config.validate();
    RunOutputs run;
    run.config = config;

    const VocabMap vocab = VocabMap::for_config(config.model);
    const Weights weights = init_weights(config.model);
    std::vector<detail::PreparedExample> prepared =
        detail::prepare_examples(config, weights, vocab);
    run.candidate_fixity_ok = detail::check_candidate_fixity(prepared);

    for (const StrategyConfig& strat : config.ordered_strategies()) {
        run.strategies.push_back(
            detail::run_strategy_stream(config, weights, vocab, prepared, strat));
    }
    for (detail::PreparedExample& pe : prepared) run.dataset.push_back(std::move(pe.record));

    detail::compute_run_metrics(run);
    if (!config.out_dir.empty()) emit_report(run, config.out_dir);
    return run;
}

enum class SweepAxis { anchor_pool_size, n_agents, model_size, gamma, k_percent };

inline const char* sweep_axis_name(SweepAxis a) {
    switch (a) {
        case SweepAxis::anchor_pool_size: return "anchor_pool_size";
        case SweepAxis::n_agents: return "n_agents";
        case SweepAxis::model_size: return "model_size";
        case SweepAxis::gamma: return "gamma";
        case SweepAxis::k_percent: return "k_percent";
    }
    return "unknown";
}

inline SweepAxis sweep_axis_from_name(const std::string& name) {
    if (name == "anchor_pool_size") return SweepAxis::anchor_pool_size;
    if (name == "n_agents") return SweepAxis::n_agents;
    if (name == "model_size") return SweepAxis::model_size;
    if (name == "gamma") return SweepAxis::gamma;
    if (name == "k_percent") return SweepAxis::k_percent;
    throw ConfigError("unknown sweep axis: " + name);
}

// Companion model for the small-vs-large salience comparison: half width,
// half depth, same head size and vocabulary.
inline ModelConfig companion_model(const ModelConfig& base) {
    ModelConfig small = base;
    small.d_model = base.d_model / 2;
    small.n_heads = std::max<std::size_t>(1, base.n_heads / 2);
    small.head_dim = small.d_model / small.n_heads;
    small.n_layers = std::max<std::size_t>(1, base.n_layers / 2);
    small.seed = derive_seed(base.seed, 0x5a11);
    small.validate();
    return small;
}

namespace detail {

// Per-token attention mass received at the judge's first decode step,
// averaged over layers and heads, truncated to the layout.
inline std::vector<double> first_step_salience(const Weights& w, const PreparedExample& pe) {
    auto res = prefill(w, pe.input.tokens, pe.mask);
    auto step = decode_step(w, res.cache, VocabMap::kSelTrigger, res.cache.size(), pe.mask,
                            true);
    std::vector<double> salience(pe.input.layout.total_len, 0.0);
    std::size_t vectors = 0;
    for (const auto& layer : step.record.weights) {
        for (const auto& head : layer) {
            ++vectors;
            for (std::size_t p = 0; p < salience.size(); ++p) salience[p] += head[p];
        }
    }
    for (double& s : salience) s /= static_cast<double>(vectors);
    return salience;
}

}  // namespace detail

struct SweepRow {
    std::string axis;
    double value = 0.0;
    std::string strategy;
    std::string metric;
    double metric_value = 0.0;
    std::uint64_t numerator = 0;
    std::uint64_t denominator = 0;
};

inline std::string sweep_csv(const std::vector<SweepRow>& rows) {
    std::string csv = "axis,value,strategy,metric,metric_value,numerator,denominator\n";
    for (const SweepRow& r : rows) {
        csv += r.axis + "," + float_compact(r.value) + "," + r.strategy + "," + r.metric + "," +
               fixed2(r.metric_value) + "," + std::to_string(r.numerator) + "," +
               std::to_string(r.denominator) + "\n";
    }
    return csv;
}

// One run_experiment per axis value (only that axis varied), consolidated
// into one table. The k_percent axis instead sweeps the salience-overlap
// budget between the base model and its half-size companion.
inline std::vector<SweepRow> run_sweep(const ExperimentConfig& base, SweepAxis axis,
                                       std::span<const double> values,
                                       const std::string& out_dir = "") {
    std::vector<SweepRow> rows;
    if (axis == SweepAxis::k_percent) {
        ExperimentConfig cfg = base;
        cfg.out_dir.clear();
        cfg.validate();
        const VocabMap vocab = VocabMap::for_config(cfg.model);
        const Weights big = init_weights(cfg.model);
        const Weights small = init_weights(companion_model(cfg.model));
        const auto prepared = detail::prepare_examples(cfg, big, vocab);
        std::vector<std::pair<std::vector<double>, std::vector<double>>> saliences;
        for (const auto& pe : prepared) {
            saliences.emplace_back(detail::first_step_salience(big, pe),
                                   detail::first_step_salience(small, pe));
        }
        for (double k : values) {
            double mean = 0.0;
            for (const auto& [a, b] : saliences) mean += jaccard_topk(a, b, k);
            mean /= static_cast<double>(saliences.size());
            rows.push_back({sweep_axis_name(axis), k, "dense", "jaccard_topk", 100.0 * mean,
                            0, static_cast<std::uint64_t>(saliences.size())});
        }
    } else {
        for (double v : values) {
            ExperimentConfig cfg = base;
            switch (axis) {
                case SweepAxis::anchor_pool_size:
                    for (StrategyConfig& s : cfg.strategies) {
                        s.pool_limit = static_cast<std::size_t>(v);
                    }
                    break;
                case SweepAxis::n_agents:
                    cfg.n_agents = static_cast<int>(v);
                    break;
                case SweepAxis::model_size: {
                    const auto d = static_cast<std::size_t>(v);
                    if (d % 16 != 0) throw ConfigError("model_size values must be multiples of 16");
                    cfg.model.d_model = d;
                    cfg.model.head_dim = 16;
                    cfg.model.n_heads = d / 16;
                    break;
                }
                case SweepAxis::gamma:
                    for (StrategyConfig& s : cfg.strategies) s.gamma = v;
                    break;
                case SweepAxis::k_percent: break;
            }
            cfg.out_dir = out_dir.empty()
                              ? ""
                              : out_dir + "/" + sweep_axis_name(axis) + "_" + float_compact(v);
            const RunOutputs run = run_experiment(cfg);
            for (const MetricReport& m : run.metrics) {
                if (m.name != "acc" && m.name != "jcr" && m.name != "reuse") continue;
                rows.push_back({sweep_axis_name(axis), v, m.strategy, m.name, m.value,
                                m.numerator, m.denominator});
            }
        }
    }
    if (!out_dir.empty()) write_file(std::filesystem::path(out_dir) / "sweep.csv",
                                     sweep_csv(rows));
    return rows;
}

// Masking ablation: the same config judged dense twice, with and without the
// cross-candidate mask, compared on Acc and JCR.
struct MaskingAblation {
    MetricReport acc_original;
    MetricReport acc_masked;
    MetricReport jcr_masked_vs_original;

    std::string csv() const {
        std::string out = "metric,original,masked\n";
        out += "acc," + fixed2(acc_original.value) + "," + fixed2(acc_masked.value) + "\n";
        out += "jcr,100.00," + fixed2(jcr_masked_vs_original.value) + "\n";
        return out;
    }
};

inline MaskingAblation run_masking_ablation(const ExperimentConfig& base,
                                            const std::string& out_dir = "") {
    ExperimentConfig original = base;
    original.strategies = {StrategyConfig{}};
    original.cross_candidate_mask = false;
    original.out_dir = out_dir.empty() ? "" : out_dir + "/masking_original";
    ExperimentConfig masked = original;
    masked.cross_candidate_mask = true;
    masked.out_dir = out_dir.empty() ? "" : out_dir + "/masking_masked";

    const RunOutputs run_orig = run_experiment(original);
    const RunOutputs run_mask = run_experiment(masked);

    std::map<std::string, std::string> gold;
    for (const DatasetRecord& r : run_orig.dataset) gold[r.example.id] = r.example.gold;

    MaskingAblation out;
    out.acc_original = accuracy(run_orig.strategies.front().decisions, gold);
    out.acc_masked = accuracy(run_mask.strategies.front().decisions, gold);
    out.jcr_masked_vs_original =
        jcr(run_mask.strategies.front().decisions, run_orig.strategies.front().decisions);
    if (!out_dir.empty()) {
        write_file(std::filesystem::path(out_dir) / "masking.csv", out.csv());
    }
    return out;
}

}  // namespace kvlab
