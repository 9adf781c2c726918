#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "kvlab/metrics.hpp"
#include "kvlab/pipeline.hpp"

namespace kvlab {

// Fixed feature order for the risk-gating probe. Degenerate statistics
// (single candidate, zero-length responses) default to 0.
//   0 pairwise token-Jaccard mean     3 answer-agreement rate
//   1 pairwise token-Jaccard min      4 response length mean
//   2 pairwise token-Jaccard max      5 response length coefficient of variation
//   6 count of candidates matching gold (0 when gold unavailable)
//   7 candidate count N
inline constexpr std::size_t kGateFeatureCount = 8;

inline const char* gate_feature_name(std::size_t i) {
    static const char* names[kGateFeatureCount] = {
        "jaccard_mean", "jaccard_min", "jaccard_max", "answer_agreement",
        "len_mean",     "len_cv",      "gold_matches", "n_candidates"};
    return names[i];
}

inline double token_set_jaccard(std::span<const Tok> a, std::span<const Tok> b) {
    const std::set<Tok> sa(a.begin(), a.end());
    const std::set<Tok> sb(b.begin(), b.end());
    std::vector<Tok> uni;
    std::set_union(sa.begin(), sa.end(), sb.begin(), sb.end(), std::back_inserter(uni));
    if (uni.empty()) return 0.0;
    std::vector<Tok> inter;
    std::set_intersection(sa.begin(), sa.end(), sb.begin(), sb.end(), std::back_inserter(inter));
    return static_cast<double>(inter.size()) / static_cast<double>(uni.size());
}

inline std::vector<double> extract_features(const Example& example,
                                            std::span<const Candidate> candidates,
                                            const std::optional<std::string>& gold) {
    (void)example;
    const std::size_t n = candidates.size();
    std::vector<double> f(kGateFeatureCount, 0.0);
    if (n >= 2) {
        double mean = 0.0, mn = 1.0, mx = 0.0;
        double agree = 0.0;
        std::size_t pairs = 0;
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = i + 1; j < n; ++j) {
                const double jac = token_set_jaccard(candidates[i].response,
                                                     candidates[j].response);
                mean += jac;
                mn = std::min(mn, jac);
                mx = std::max(mx, jac);
                agree += candidates[i].answer == candidates[j].answer ? 1.0 : 0.0;
                ++pairs;
            }
        }
        f[0] = mean / static_cast<double>(pairs);
        f[1] = mn;
        f[2] = mx;
        f[3] = agree / static_cast<double>(pairs);
    }
    double len_mean = 0.0;
    for (const Candidate& c : candidates) len_mean += static_cast<double>(c.response.size());
    len_mean /= static_cast<double>(n);
    double len_var = 0.0;
    for (const Candidate& c : candidates) {
        const double d = static_cast<double>(c.response.size()) - len_mean;
        len_var += d * d;
    }
    len_var /= static_cast<double>(n);
    f[4] = len_mean;
    f[5] = len_mean > 0.0 ? std::sqrt(len_var) / len_mean : 0.0;
    if (gold) {
        for (const Candidate& c : candidates) f[6] += c.answer == *gold ? 1.0 : 0.0;
    }
    f[7] = static_cast<double>(n);
    return f;
}

// Label 1 iff every reuse strategy's selected original agent id matches the
// dense selection with all parses ok. Logs must be aligned on example id and
// permutation.
inline std::vector<int> label_universally_safe(
    std::span<const DecisionRecord> dense_log,
    std::span<const std::vector<DecisionRecord>> strategy_logs) {
    std::vector<int> labels;
    labels.reserve(dense_log.size());
    std::vector<std::map<std::string, const DecisionRecord*>> by_id(strategy_logs.size());
    for (std::size_t s = 0; s < strategy_logs.size(); ++s) {
        for (const DecisionRecord& d : strategy_logs[s]) by_id[s][d.example_id] = &d;
    }
    for (const DecisionRecord& dense : dense_log) {
        int label = dense.parse_ok ? 1 : 0;
        for (std::size_t s = 0; s < strategy_logs.size(); ++s) {
            const auto it = by_id[s].find(dense.example_id);
            if (it == by_id[s].end()) {
                throw ProtocolError("strategy log missing example " + dense.example_id);
            }
            if (it->second->permutation != dense.permutation) {
                throw ProtocolError("permutation mismatch for example " + dense.example_id);
            }
            if (!it->second->parse_ok || it->second->selected_agent != dense.selected_agent) {
                label = 0;
            }
        }
        labels.push_back(label);
    }
    return labels;
}

struct GateTrainConfig {
    std::size_t epochs = 800;
    double learning_rate = 0.1;
    std::uint64_t seed = 1;
};

struct GateModel {
    std::vector<double> weights;
    double bias = 0.0;
    std::vector<double> feature_mean;
    std::vector<double> feature_std;
    std::size_t epochs = 0;
    double learning_rate = 0.0;
    std::uint64_t seed = 0;
};

inline double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

// Mean cross-entropy and its gradient at (w, b) over standardized features.
// Kept public so the finite-difference check exercises the same code path
// the trainer uses.
struct GateLossGrad {
    double loss = 0.0;
    std::vector<double> grad_w;
    double grad_b = 0.0;
};

inline GateLossGrad gate_loss_and_grad(std::span<const double> w, double b,
                                       const std::vector<std::vector<double>>& x,
                                       std::span<const int> y) {
    GateLossGrad out;
    out.grad_w.assign(w.size(), 0.0);
    const double n = static_cast<double>(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        double z = b;
        for (std::size_t j = 0; j < w.size(); ++j) z += w[j] * x[i][j];
        const double p = sigmoid(z);
        const double eps = 1e-12;  // clamp away from log(0)
        out.loss += y[i] == 1 ? -std::log(std::max(p, eps))
                              : -std::log(std::max(1.0 - p, eps));
        const double err = p - static_cast<double>(y[i]);
        for (std::size_t j = 0; j < w.size(); ++j) out.grad_w[j] += err * x[i][j];
        out.grad_b += err;
    }
    out.loss /= n;
    for (double& g : out.grad_w) g /= n;
    out.grad_b /= n;
    return out;
}

// Full-batch gradient descent on the logistic cross-entropy. Deterministic
// given the seed; features are standardized with the stored constants.
inline GateModel train_gate(const std::vector<std::vector<double>>& features,
                            std::span<const int> labels, const GateTrainConfig& config) {
    if (features.empty() || features.size() != labels.size()) {
        throw UsageError("features and labels must be non-empty and aligned");
    }
    bool has_pos = false, has_neg = false;
    for (int l : labels) {
        if (l == 1) has_pos = true;
        else if (l == 0) has_neg = true;
        else throw UsageError("labels must be 0 or 1");
    }
    if (!has_pos || !has_neg) throw UsageError("training needs both classes present");

    const std::size_t dim = features[0].size();
    for (const auto& f : features) {
        if (f.size() != dim) throw UsageError("inconsistent feature dimensions");
    }

    GateModel model;
    model.epochs = config.epochs;
    model.learning_rate = config.learning_rate;
    model.seed = config.seed;
    model.feature_mean.assign(dim, 0.0);
    model.feature_std.assign(dim, 0.0);
    const double n = static_cast<double>(features.size());
    for (const auto& f : features) {
        for (std::size_t j = 0; j < dim; ++j) model.feature_mean[j] += f[j];
    }
    for (double& m : model.feature_mean) m /= n;
    for (const auto& f : features) {
        for (std::size_t j = 0; j < dim; ++j) {
            const double d = f[j] - model.feature_mean[j];
            model.feature_std[j] += d * d;
        }
    }
    for (double& s : model.feature_std) {
        s = std::sqrt(s / n);
        if (s < 1e-12) s = 1.0;  // constant features pass through unscaled
    }

    std::vector<std::vector<double>> x(features.size(), std::vector<double>(dim));
    for (std::size_t i = 0; i < features.size(); ++i) {
        for (std::size_t j = 0; j < dim; ++j) {
            x[i][j] = (features[i][j] - model.feature_mean[j]) / model.feature_std[j];
        }
    }

    Rng rng(config.seed);
    model.weights.resize(dim);
    for (double& w : model.weights) w = rng.normal() * 0.01;
    model.bias = 0.0;
    for (std::size_t e = 0; e < config.epochs; ++e) {
        const GateLossGrad g = gate_loss_and_grad(model.weights, model.bias, x, labels);
        for (std::size_t j = 0; j < dim; ++j) {
            model.weights[j] -= config.learning_rate * g.grad_w[j];
        }
        model.bias -= config.learning_rate * g.grad_b;
    }
    return model;
}

inline double predict_gate(const GateModel& model, std::span<const double> features) {
    if (features.size() != model.weights.size()) {
        throw UsageError("feature dimension does not match the gate model");
    }
    double z = model.bias;
    for (std::size_t j = 0; j < features.size(); ++j) {
        z += model.weights[j] * (features[j] - model.feature_mean[j]) / model.feature_std[j];
    }
    return sigmoid(z);
}

inline std::string serialize_gate_model(const GateModel& m) {
    std::ostringstream out;
    out << "kvlab-gate v1\n";
    out << "dim " << m.weights.size() << "\n";
    out << "epochs " << m.epochs << " lr " << hex_double(m.learning_rate) << " seed " << m.seed
        << "\n";
    auto line = [&](const char* tag, std::span<const double> values) {
        out << tag;
        for (double v : values) out << ' ' << hex_double(v);
        out << "\n";
    };
    line("weights", m.weights);
    out << "bias " << hex_double(m.bias) << "\n";
    line("mean", m.feature_mean);
    line("std", m.feature_std);
    return out.str();
}

inline GateModel parse_gate_model(const std::string& text) {
    const auto lines = split_lines(text);
    if (lines.size() < 7 || lines[0] != "kvlab-gate v1") throw UsageError("not a gate model");
    GateModel m;
    std::size_t dim = 0;
    {
        std::istringstream in(lines[1]);
        std::string tag;
        in >> tag >> dim;
        if (tag != "dim") throw UsageError("malformed gate model");
    }
    {
        std::istringstream in(lines[2]);
        std::string tag, lr;
        in >> tag >> m.epochs;
        in >> tag >> lr;
        m.learning_rate = parse_hex_double(lr);
        in >> tag >> m.seed;
    }
    auto read_vec = [&](const std::string& line, const char* tag) {
        std::istringstream in(line);
        std::string word;
        in >> word;
        if (word != tag) throw UsageError("malformed gate model");
        std::vector<double> v(dim);
        for (double& x : v) {
            in >> word;
            x = parse_hex_double(word);
        }
        return v;
    };
    m.weights = read_vec(lines[3], "weights");
    {
        std::istringstream in(lines[4]);
        std::string tag, b;
        in >> tag >> b;
        m.bias = parse_hex_double(b);
    }
    m.feature_mean = read_vec(lines[5], "mean");
    m.feature_std = read_vec(lines[6], "std");
    return m;
}

}  // namespace kvlab
