// Command-line orchestrator for the judge-side KV reuse lab.
//
// Subcommands:
//   generate  synthesize a key-match dataset file
//   run       execute one experiment config (all strategies, all metrics)
//   sweep     re-run a config across one axis and consolidate the table
//   metrics   recompute metrics from existing decision logs (replay mode)
//   diagnose  attention profiles, masking ablation, salience-overlap curve
//   gate      train/evaluate the universally-safe reuse classifier

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "kvlab/kvlab.hpp"

namespace fs = std::filesystem;
using namespace kvlab;

namespace {

ExperimentConfig load_config(const std::string& path) {
    if (path.empty()) return ExperimentConfig{};
    return ExperimentConfig::from_json(nlohmann::json::parse(read_file(path)));
}

void print_metrics(const std::vector<MetricReport>& metrics) {
    std::printf("%-10s %-13s %-12s %8s %8s %8s\n", "strategy", "regime/shuffle", "metric",
                "value", "num", "den");
    for (const MetricReport& m : metrics) {
        const std::string rs = m.regime + "/" + m.shuffle;
        std::printf("%-10s %-13s %-12s %8s %8llu %8llu\n", m.strategy.c_str(), rs.c_str(),
                    m.name.c_str(), fixed2(m.value).c_str(),
                    static_cast<unsigned long long>(m.numerator),
                    static_cast<unsigned long long>(m.denominator));
    }
}

struct CommonOverrides {
    std::string out_dir;
    std::string shuffle;
    std::string regime;
    std::string judge_mode;
    int n_agents = -1;
    long examples = -1;
    long dataset_seed = -1;
    bool record_attention = false;
    bool emit_svg = false;

    void apply(ExperimentConfig& cfg) const {
        if (!out_dir.empty()) cfg.out_dir = out_dir;
        if (!shuffle.empty()) cfg.shuffle = shuffle_from_name(shuffle);
        if (!regime.empty()) cfg.regime = regime_from_name(regime);
        if (!judge_mode.empty()) cfg.judge_mode = judge_mode_from_name(judge_mode);
        if (n_agents > 0) cfg.n_agents = n_agents;
        if (examples > 0) cfg.dataset.size = static_cast<std::size_t>(examples);
        if (dataset_seed >= 0) cfg.dataset.seed = static_cast<std::uint64_t>(dataset_seed);
        if (record_attention) cfg.record_attention = true;
        if (emit_svg) cfg.emit_svg = true;
    }

    void attach(CLI::App* cmd) {
        cmd->add_option("--out", out_dir, "output directory");
        cmd->add_option("--shuffle", shuffle, "no_shuffle|shuffle");
        cmd->add_option("--regime", regime, "progressive|parallel");
        cmd->add_option("--judge-mode", judge_mode, "toy|text");
        cmd->add_option("--n-agents", n_agents, "number of execution agents");
        cmd->add_option("--examples", examples, "dataset size");
        cmd->add_option("--dataset-seed", dataset_seed, "dataset seed");
        cmd->add_flag("--record-attention", record_attention, "capture attention profiles");
        cmd->add_flag("--svg", emit_svg, "emit the region-mass bar chart");
    }
};

int cmd_generate(const std::string& config_path, const DatasetSpec& cli_spec,
                 const std::string& out_file, bool spec_from_cli) {
    ExperimentConfig cfg = load_config(config_path);
    DatasetSpec spec = spec_from_cli ? cli_spec : cfg.dataset;
    const VocabMap vocab = VocabMap::for_config(cfg.model);
    const auto records = generate_dataset(spec, vocab);
    const std::string text = serialize_dataset(records);
    if (out_file.empty()) {
        std::fputs(text.c_str(), stdout);
    } else {
        write_file(out_file, text);
        std::printf("wrote %zu records to %s\n", records.size(), out_file.c_str());
    }
    return 0;
}

int cmd_run(const std::string& config_path, const CommonOverrides& overrides) {
    ExperimentConfig cfg = load_config(config_path);
    overrides.apply(cfg);
    const RunOutputs run = run_experiment(cfg);
    print_metrics(run.metrics);
    if (!run.candidate_fixity_ok) {
        std::fprintf(stderr, "error [stage=self-test]: candidate fixity check failed\n");
        return 1;
    }
    if (!cfg.out_dir.empty()) {
        std::printf("run artifacts in %s (config digest %s)\n", cfg.out_dir.c_str(),
                    run.manifest.config_digest.c_str());
    }
    return 0;
}

int cmd_sweep(const std::string& config_path, const CommonOverrides& overrides,
              const std::string& axis_name, const std::vector<double>& values) {
    ExperimentConfig cfg = load_config(config_path);
    overrides.apply(cfg);
    const std::string out_dir = cfg.out_dir;
    cfg.out_dir.clear();
    const auto rows = run_sweep(cfg, sweep_axis_from_name(axis_name), values, out_dir);
    std::fputs(sweep_csv(rows).c_str(), stdout);
    return 0;
}

int cmd_metrics(const std::string& dataset_file, const std::string& dense_file,
                const std::vector<std::string>& log_files, const std::string& out_dir) {
    const auto dataset = parse_dataset(read_file(dataset_file));
    std::map<std::string, std::string> gold;
    for (const DatasetRecord& r : dataset) gold[r.example.id] = r.example.gold;
    const auto dense = parse_decision_log(read_file(dense_file));

    std::vector<MetricReport> metrics;
    auto add = [&](MetricReport m, const std::string& strategy) {
        m.strategy = strategy;
        m.regime = "replay";
        m.shuffle = "replay";
        metrics.push_back(std::move(m));
    };
    add(accuracy(dense, gold), dense.empty() ? "dense" : dense.front().strategy);
    add(jcr(dense, dense), dense.empty() ? "dense" : dense.front().strategy);
    for (const std::string& file : log_files) {
        const auto log = parse_decision_log(read_file(file));
        const std::string name = log.empty() ? fs::path(file).stem().string()
                                             : log.front().strategy;
        add(accuracy(log, gold), name);
        add(jcr(log, dense), name);
        add(jcr_filtered(log, dense), name);
        add(reuse_rate(std::span<const DecisionRecord>(log)), name);
        add(parse_failure_rate(log), name);
    }
    print_metrics(metrics);
    if (!out_dir.empty()) {
        std::string csv = "strategy,regime,shuffle,metric,value,numerator,denominator\n";
        for (const MetricReport& m : metrics) {
            csv += m.strategy + "," + m.regime + "," + m.shuffle + "," + m.name + "," +
                   fixed2(m.value) + "," + std::to_string(m.numerator) + "," +
                   std::to_string(m.denominator) + "\n";
        }
        write_file(fs::path(out_dir) / "metrics.csv", csv);
    }
    return 0;
}

int cmd_diagnose(const std::string& config_path, const CommonOverrides& overrides,
                 const std::vector<double>& k_values) {
    ExperimentConfig cfg = load_config(config_path);
    overrides.apply(cfg);
    const std::string out_dir = cfg.out_dir;

    // attention profiles per strategy
    ExperimentConfig prof = cfg;
    prof.record_attention = true;
    prof.emit_svg = true;
    prof.out_dir = out_dir.empty() ? "" : out_dir + "/profiles";
    const RunOutputs run = run_experiment(prof);
    std::printf("attention region masses (mean over %zu examples):\n", run.dataset.size());
    for (const StrategyOutputs& s : run.strategies) {
        if (!s.mean_profile) continue;
        std::printf("  %-10s prefix=%s", strategy_name(s.cfg.kind),
                    fixed2(100.0 * s.mean_profile->prefix).c_str());
        for (std::size_t i = 0; i < s.mean_profile->slots.size(); ++i) {
            std::printf(" slot%zu=%s", i + 1,
                        fixed2(100.0 * s.mean_profile->slots[i]).c_str());
        }
        std::printf("\n");
    }

    const MaskingAblation ab = run_masking_ablation(cfg, out_dir);
    std::printf("masking ablation: acc %s -> %s, jcr(masked vs dense) %s\n",
                fixed2(ab.acc_original.value).c_str(), fixed2(ab.acc_masked.value).c_str(),
                fixed2(ab.jcr_masked_vs_original.value).c_str());

    const auto rows = run_sweep(cfg, SweepAxis::k_percent, k_values,
                                out_dir.empty() ? "" : out_dir + "/jaccard");
    std::printf("salience overlap (small vs large model, top-k%% tokens):\n");
    for (const SweepRow& r : rows) {
        std::printf("  k=%-5s jaccard=%s\n", float_compact(r.value).c_str(),
                    fixed2(r.metric_value).c_str());
    }
    return 0;
}

int cmd_gate(const std::string& run_dir, GateTrainConfig train_cfg, double test_fraction,
             std::uint64_t split_seed, const std::string& out_dir) {
    const fs::path dir(run_dir);
    const ExperimentConfig cfg =
        ExperimentConfig::from_json(nlohmann::json::parse(read_file(dir / "config.json")));
    const auto dataset = parse_dataset(read_file(dir / "dataset.jsonl"));
    const auto dense = parse_decision_log(read_file(dir / "decisions_dense.jsonl"));

    std::vector<std::vector<DecisionRecord>> strategy_logs;
    std::vector<std::string> strategy_names;
    for (const StrategyConfig& s : cfg.ordered_strategies()) {
        if (s.kind == StrategyKind::dense) continue;
        const fs::path log = dir / ("decisions_" + std::string(strategy_name(s.kind)) +
                                    ".jsonl");
        if (!fs::exists(log)) continue;
        strategy_logs.push_back(parse_decision_log(read_file(log)));
        strategy_names.push_back(strategy_name(s.kind));
    }
    if (strategy_logs.empty()) {
        throw UsageError("run directory has no reuse-strategy decision logs to gate on");
    }

    // Candidates are regenerated deterministically from the run config.
    const VocabMap vocab = VocabMap::for_config(cfg.model);
    const Weights weights = init_weights(cfg.model);
    GenOptions gen_opts;
    gen_opts.filler_min = cfg.generation.filler_min;
    gen_opts.filler_max = cfg.generation.filler_max;
    gen_opts.temperature = cfg.generation.temperature;

    std::vector<std::vector<double>> features;
    std::string features_csv = "example_id";
    for (std::size_t f = 0; f < kGateFeatureCount; ++f) {
        features_csv += std::string(",") + gate_feature_name(f);
    }
    features_csv += ",label\n";
    const auto labels = label_universally_safe(dense, strategy_logs);
    for (std::size_t e = 0; e < dataset.size(); ++e) {
        std::vector<std::uint64_t> seeds;
        const std::uint64_t base = derive_seed(cfg.generation.agent_seed_base, e);
        for (int a = 1; a <= cfg.n_agents; ++a) {
            seeds.push_back(derive_seed(base, static_cast<std::uint64_t>(a)));
        }
        const auto cands = generate_candidates(dataset[e], cfg.n_agents, cfg.regime, weights,
                                               seeds, gen_opts, vocab);
        features.push_back(
            extract_features(dataset[e].example, cands, dataset[e].example.gold));
        features_csv += dataset[e].example.id;
        for (double v : features.back()) features_csv += "," + float_compact(v);
        features_csv += "," + std::to_string(labels[e]) + "\n";
    }

    // Seeded split by example index.
    std::vector<std::size_t> order(features.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng split_rng(split_seed);
    for (std::size_t i = order.size(); i > 1; --i) {
        std::swap(order[i - 1], order[split_rng.bounded(i)]);
    }
    const auto test_count = static_cast<std::size_t>(
        test_fraction * static_cast<double>(order.size()));
    std::vector<std::vector<double>> x_train, x_test;
    std::vector<int> y_train, y_test;
    for (std::size_t i = 0; i < order.size(); ++i) {
        const bool test = i < test_count;
        (test ? x_test : x_train).push_back(features[order[i]]);
        (test ? y_test : y_train).push_back(labels[order[i]]);
    }

    const GateModel model = train_gate(x_train, y_train, train_cfg);
    auto evaluate = [&](const std::vector<std::vector<double>>& x, const std::vector<int>& y) {
        std::vector<double> scores;
        scores.reserve(x.size());
        for (const auto& f : x) scores.push_back(predict_gate(model, f));
        return ranking_metrics(scores, y);
    };
    const RankingMetrics train_m = evaluate(x_train, y_train);
    const RankingMetrics test_m = evaluate(x_test, y_test);
    std::printf("universally-safe gate: train AUC=%.3f AP=%.3f | test AUC=%.3f AP=%.3f\n",
                train_m.auc, train_m.ap, test_m.auc, test_m.ap);

    std::string csv = "target,split,auc,ap\n";
    csv += "universally_safe,train," + float_compact(train_m.auc) + "," +
           float_compact(train_m.ap) + "\n";
    csv += "universally_safe,test," + float_compact(test_m.auc) + "," +
           float_compact(test_m.ap) + "\n";

    // Secondary framing: per-strategy selection-match prediction. Reported,
    // not optimized for.
    for (std::size_t s = 0; s < strategy_logs.size(); ++s) {
        std::vector<int> per(labels.size(), 0);
        std::map<std::string, const DecisionRecord*> by_id;
        for (const DecisionRecord& d : strategy_logs[s]) by_id[d.example_id] = &d;
        for (std::size_t e = 0; e < dense.size(); ++e) {
            const DecisionRecord* d = by_id.at(dense[e].example_id);
            per[e] = (d->parse_ok && dense[e].parse_ok &&
                      d->selected_agent == dense[e].selected_agent)
                         ? 1
                         : 0;
        }
        bool both = false, either = false;
        for (int v : per) {
            both |= v == 1;
            either |= v == 0;
        }
        if (!both || !either) {
            std::printf("per-strategy %s: degenerate labels, skipped\n",
                        strategy_names[s].c_str());
            continue;
        }
        std::vector<int> y2_train, y2_test;
        for (std::size_t i = 0; i < order.size(); ++i) {
            (i < test_count ? y2_test : y2_train).push_back(per[order[i]]);
        }
        try {
            const GateModel m2 = train_gate(x_train, y2_train, train_cfg);
            std::vector<double> scores;
            for (const auto& f : x_test) scores.push_back(predict_gate(m2, f));
            const RankingMetrics r = ranking_metrics(scores, y2_test);
            std::printf("per-strategy %s: test AUC=%.3f AP=%.3f\n", strategy_names[s].c_str(),
                        r.auc, r.ap);
            csv += "strategy_" + strategy_names[s] + ",test," + float_compact(r.auc) + "," +
                   float_compact(r.ap) + "\n";
        } catch (const UsageError&) {
            std::printf("per-strategy %s: degenerate split, skipped\n",
                        strategy_names[s].c_str());
        }
    }

    if (!out_dir.empty()) {
        write_file(fs::path(out_dir) / "gate_model.txt", serialize_gate_model(model));
        write_file(fs::path(out_dir) / "gate_metrics.csv", csv);
        write_file(fs::path(out_dir) / "features.csv", features_csv);
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"judge-side KV-cache reuse laboratory"};
    app.require_subcommand(1);

    // generate
    auto* generate = app.add_subcommand("generate", "synthesize a key-match dataset");
    std::string gen_config, gen_out;
    DatasetSpec gen_spec;
    bool gen_cli_spec = false;
    generate->add_option("--config", gen_config, "experiment config (dataset section)");
    generate->add_option("--size", gen_spec.size, "examples")->each([&](const std::string&) {
        gen_cli_spec = true;
    });
    generate->add_option("--seed", gen_spec.seed, "dataset seed")->each([&](const std::string&) {
        gen_cli_spec = true;
    });
    generate->add_option("--agents", gen_spec.n_agents, "candidates per example")
        ->each([&](const std::string&) { gen_cli_spec = true; });
    generate->add_option("--mix", gen_spec.correct_mix, "gold-matching candidate probability")
        ->each([&](const std::string&) { gen_cli_spec = true; });
    generate->add_option("--question-len", gen_spec.question_len, "question filler words")
        ->each([&](const std::string&) { gen_cli_spec = true; });
    generate->add_option("--out", gen_out, "output dataset file (jsonl)");

    // run
    auto* run = app.add_subcommand("run", "run one experiment config");
    std::string run_config;
    CommonOverrides run_over;
    run->add_option("--config", run_config, "experiment config json");
    run_over.attach(run);

    // sweep
    auto* sweep = app.add_subcommand("sweep", "vary one axis of a base config");
    std::string sweep_config, sweep_axis;
    std::vector<double> sweep_values;
    CommonOverrides sweep_over;
    sweep->add_option("--config", sweep_config, "base experiment config json");
    sweep->add_option("--axis", sweep_axis,
                      "anchor_pool_size|n_agents|model_size|gamma|k_percent")
        ->required();
    sweep->add_option("--values", sweep_values, "axis values")->required();
    sweep_over.attach(sweep);

    // metrics (replay)
    auto* metrics = app.add_subcommand("metrics", "recompute metrics from decision logs");
    std::string m_dataset, m_dense, m_out;
    std::vector<std::string> m_logs;
    metrics->add_option("--dataset", m_dataset, "dataset jsonl (gold answers)")->required();
    metrics->add_option("--dense", m_dense, "dense decision log (JCR reference)")->required();
    metrics->add_option("--log", m_logs, "strategy decision logs");
    metrics->add_option("--out", m_out, "output directory");

    // diagnose
    auto* diagnose = app.add_subcommand("diagnose",
                                        "attention profiles + masking ablation + salience");
    std::string d_config;
    std::vector<double> d_ks = {5, 10, 20, 30, 50, 80, 100};
    CommonOverrides d_over;
    diagnose->add_option("--config", d_config, "experiment config json");
    diagnose->add_option("--k-values", d_ks, "top-k%% budgets for the salience curve");
    d_over.attach(diagnose);

    // gate
    auto* gate = app.add_subcommand("gate", "train the universally-safe reuse classifier");
    std::string g_run, g_out;
    GateTrainConfig g_train;
    double g_test_fraction = 0.3;
    std::uint64_t g_split_seed = 9;
    gate->add_option("--run", g_run, "completed run directory")->required();
    gate->add_option("--epochs", g_train.epochs, "training epochs");
    gate->add_option("--lr", g_train.learning_rate, "learning rate");
    gate->add_option("--seed", g_train.seed, "init seed");
    gate->add_option("--test-fraction", g_test_fraction, "held-out fraction");
    gate->add_option("--split-seed", g_split_seed, "split seed");
    gate->add_option("--out", g_out, "output directory");

    CLI11_PARSE(app, argc, argv);

    try {
        if (generate->parsed()) return cmd_generate(gen_config, gen_spec, gen_out, gen_cli_spec);
        if (run->parsed()) return cmd_run(run_config, run_over);
        if (sweep->parsed()) return cmd_sweep(sweep_config, sweep_over, sweep_axis, sweep_values);
        if (metrics->parsed()) return cmd_metrics(m_dataset, m_dense, m_logs, m_out);
        if (diagnose->parsed()) return cmd_diagnose(d_config, d_over, d_ks);
        if (gate->parsed()) return cmd_gate(g_run, g_train, g_test_fraction, g_split_seed, g_out);
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return 2;
    } catch (const UsageError& e) {
        std::fprintf(stderr, "usage error: %s\n", e.what());
        return 3;
    } catch (const AssemblyError& e) {
        std::fprintf(stderr, "assembly error: %s\n", e.what());
        return 4;
    } catch (const LayoutError& e) {
        std::fprintf(stderr, "layout error: %s\n", e.what());
        return 5;
    } catch (const ProtocolError& e) {
        std::fprintf(stderr, "protocol error: %s\n", e.what());
        return 6;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}
