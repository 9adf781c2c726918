#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "kvlab/layout.hpp"
#include "kvlab/logs.hpp"
#include "kvlab/model.hpp"
#include "kvlab/strategies.hpp"

namespace kvlab {

// A scalar rate with its exact counts. value is a percentage in [0, 100]
// for rates and a fraction in [0, 1] for ranking metrics.
struct MetricReport {
    std::string name;
    double value = 0.0;
    std::uint64_t numerator = 0;
    std::uint64_t denominator = 0;
    std::string strategy;
    std::string regime;
    std::string shuffle;
};

inline MetricReport make_rate(std::string name, std::uint64_t num, std::uint64_t den) {
    MetricReport r;
    r.name = std::move(name);
    r.numerator = num;
    r.denominator = den;
    r.value = den == 0 ? 0.0 : 100.0 * static_cast<double>(num) / static_cast<double>(den);
    return r;
}

// Exact-match accuracy over a decision log; parse failures count as wrong.
inline MetricReport accuracy(std::span<const DecisionRecord> decisions,
                             const std::map<std::string, std::string>& gold) {
    std::uint64_t correct = 0;
    for (const DecisionRecord& d : decisions) {
        const auto it = gold.find(d.example_id);
        if (it == gold.end()) throw UsageError("no gold answer for example " + d.example_id);
        if (d.parse_ok && d.answer == it->second) ++correct;
    }
    return make_rate("acc", correct, decisions.size());
}

namespace detail {

struct JcrCounts {
    std::uint64_t matches = 0;
    std::uint64_t total = 0;            // all aligned examples
    std::uint64_t both_parsed = 0;      // denominator of the filtered variant
};

inline JcrCounts jcr_counts(std::span<const DecisionRecord> a,
                            std::span<const DecisionRecord> b) {
    std::map<std::string, const DecisionRecord*> by_id;
    for (const DecisionRecord& d : b) by_id[d.example_id] = &d;
    JcrCounts c;
    for (const DecisionRecord& d : a) {
        const auto it = by_id.find(d.example_id);
        if (it == by_id.end()) {
            throw ProtocolError("logs are not aligned: missing example " + d.example_id);
        }
        if (d.permutation != it->second->permutation) {
            throw ProtocolError("permutations differ for example " + d.example_id +
                                "; JCR requires identical orderings");
        }
        ++c.total;
        if (d.parse_ok && it->second->parse_ok) {
            ++c.both_parsed;
            if (d.selected_agent == it->second->selected_agent) ++c.matches;
        }
    }
    return c;
}

}  // namespace detail

// Judge Consistency Rate, strict variant: any parse failure on either side
// is a mismatch and stays in the denominator.
inline MetricReport jcr(std::span<const DecisionRecord> strategy_log,
                        std::span<const DecisionRecord> dense_log) {
    const auto c = detail::jcr_counts(strategy_log, dense_log);
    return make_rate("jcr", c.matches, c.total);
}

// Filtered variant: examples where either side failed to parse are dropped
// from the denominator. Emitted alongside the strict number.
inline MetricReport jcr_filtered(std::span<const DecisionRecord> strategy_log,
                                 std::span<const DecisionRecord> dense_log) {
    const auto c = detail::jcr_counts(strategy_log, dense_log);
    return make_rate("jcr_filtered", c.matches, c.both_parsed);
}

inline MetricReport parse_failure_rate(std::span<const DecisionRecord> decisions) {
    std::uint64_t failures = 0;
    for (const DecisionRecord& d : decisions) failures += d.parse_ok ? 0 : 1;
    return make_rate("parse_failure", failures, decisions.size());
}

// Fraction of candidate blocks assembled via reuse, over every candidate
// flag in the run.
inline MetricReport reuse_rate(std::span<const DecisionRecord> decisions) {
    std::uint64_t reused = 0, total = 0;
    for (const DecisionRecord& d : decisions) {
        for (int f : d.reused_flags) {
            ++total;
            reused += f ? 1 : 0;
        }
    }
    return make_rate("reuse", reused, total);
}

inline MetricReport reuse_rate(std::span<const ReuseReport> reports) {
    std::uint64_t reused = 0, total = 0;
    for (const ReuseReport& r : reports) {
        total += r.candidates.size();
        reused += r.reused_count();
    }
    return make_rate("reuse", reused, total);
}

// Joint frequency of (ACC count, JCR count) per example, both in 0..K.
inline std::vector<std::vector<std::uint64_t>> counts_crosstab(
    std::span<const int> acc_counts, std::span<const int> jcr_counts, int k_strategies) {
    if (acc_counts.size() != jcr_counts.size()) {
        throw UsageError("count vectors must be aligned");
    }
    std::vector<std::vector<std::uint64_t>> table(
        static_cast<std::size_t>(k_strategies) + 1,
        std::vector<std::uint64_t>(static_cast<std::size_t>(k_strategies) + 1, 0));
    for (std::size_t i = 0; i < acc_counts.size(); ++i) {
        if (acc_counts[i] < 0 || acc_counts[i] > k_strategies || jcr_counts[i] < 0 ||
            jcr_counts[i] > k_strategies) {
            throw UsageError("per-example counts must lie in 0..K");
        }
        ++table[static_cast<std::size_t>(acc_counts[i])][static_cast<std::size_t>(jcr_counts[i])];
    }
    return table;
}

// Attention mass per layout region (prefix, then candidate slots 1..N).
// Header and decode positions are not reported; masses are renormalized over
// the reported regions.
struct RegionMassProfile {
    double prefix = 0.0;
    std::vector<double> slots;

    double total() const {
        double t = prefix;
        for (double s : slots) t += s;
        return t;
    }
};

inline RegionMassProfile attention_region_mass(const AttentionRecord& record,
                                               const Layout& layout) {
    layout.validate();
    RegionMassProfile profile;
    profile.slots.assign(layout.candidates.size(), 0.0);
    std::size_t vectors = 0;
    for (const auto& layer : record.weights) {
        for (const auto& head : layer) {
            if (head.size() < layout.total_len) {
                throw UsageError("attention record does not cover the layout");
            }
            ++vectors;
            for (std::size_t p = 0; p < layout.prefix.len; ++p) {
                profile.prefix += head[layout.prefix.start + p];
            }
            for (std::size_t c = 0; c < layout.candidates.size(); ++c) {
                const Span body = layout.candidates[c].body;
                for (std::size_t p = 0; p < body.len; ++p) {
                    profile.slots[c] += head[body.start + p];
                }
            }
        }
    }
    if (vectors == 0) throw UsageError("attention record is empty");
    profile.prefix /= static_cast<double>(vectors);
    for (double& s : profile.slots) s /= static_cast<double>(vectors);
    const double total = profile.total();
    if (!(total > 0.0)) throw UsageError("no attention mass on layout regions");
    profile.prefix /= total;
    for (double& s : profile.slots) s /= total;
    return profile;
}

// Jaccard overlap of the top-ceil(k% * n) indices of two salience vectors;
// ties break toward the lower index.
inline double jaccard_topk(std::span<const double> salience_a,
                           std::span<const double> salience_b, double k_percent) {
    if (salience_a.size() != salience_b.size()) {
        throw UsageError("salience vectors must have equal length");
    }
    if (!(k_percent > 0.0) || k_percent > 100.0) {
        throw UsageError("k_percent must lie in (0, 100]");
    }
    const std::size_t n = salience_a.size();
    if (n == 0) throw UsageError("salience vectors are empty");
    const auto m = static_cast<std::size_t>(
        std::ceil(k_percent / 100.0 * static_cast<double>(n)));
    auto top_set = [m, n](std::span<const double> s) {
        std::vector<std::size_t> idx(n);
        for (std::size_t i = 0; i < n; ++i) idx[i] = i;
        std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
            if (s[a] != s[b]) return s[a] > s[b];
            return a < b;
        });
        idx.resize(m);
        std::sort(idx.begin(), idx.end());
        return idx;
    };
    const auto ta = top_set(salience_a);
    const auto tb = top_set(salience_b);
    std::vector<std::size_t> inter, uni;
    std::set_intersection(ta.begin(), ta.end(), tb.begin(), tb.end(), std::back_inserter(inter));
    std::set_union(ta.begin(), ta.end(), tb.begin(), tb.end(), std::back_inserter(uni));
    return static_cast<double>(inter.size()) / static_cast<double>(uni.size());
}

struct RankingMetrics {
    double auc = 0.0;
    double ap = 0.0;
};

// AUC as the probability a random positive outranks a random negative (ties
// count one half), computed from an integer pair count so it agrees exactly
// with the O(P*N) definition. AP uses step interpolation over descending
// score thresholds.
inline RankingMetrics ranking_metrics(std::span<const double> scores,
                                      std::span<const int> labels) {
    if (scores.size() != labels.size()) throw UsageError("scores/labels length mismatch");
    std::uint64_t pos = 0, neg = 0;
    for (int l : labels) {
        if (l != 0 && l != 1) throw UsageError("labels must be 0 or 1");
        if (l == 1) ++pos; else ++neg;
    }
    if (pos == 0 || neg == 0) {
        throw UsageError("ranking metrics need at least one positive and one negative");
    }

    std::vector<std::size_t> idx(scores.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    std::sort(idx.begin(), idx.end(),
              [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

    // 2*wins + ties, walked over tie groups in ascending score order.
    std::uint64_t numerator2 = 0;
    std::uint64_t negs_below = 0;
    std::size_t i = 0;
    while (i < idx.size()) {
        std::size_t j = i;
        std::uint64_t group_pos = 0, group_neg = 0;
        while (j < idx.size() && scores[idx[j]] == scores[idx[i]]) {
            if (labels[idx[j]] == 1) ++group_pos; else ++group_neg;
            ++j;
        }
        numerator2 += 2 * group_pos * negs_below + group_pos * group_neg;
        negs_below += group_neg;
        i = j;
    }
    RankingMetrics out;
    out.auc = static_cast<double>(numerator2) / (2.0 * static_cast<double>(pos) *
                                                 static_cast<double>(neg));

    // AP over descending thresholds (one per distinct score).
    std::uint64_t tp = 0, fp = 0;
    double ap = 0.0;
    double prev_recall = 0.0;
    std::size_t d = idx.size();
    while (d > 0) {
        std::size_t j = d;
        while (j > 0 && scores[idx[j - 1]] == scores[idx[d - 1]]) {
            if (labels[idx[j - 1]] == 1) ++tp; else ++fp;
            --j;
        }
        const double recall = static_cast<double>(tp) / static_cast<double>(pos);
        const double precision = static_cast<double>(tp) / static_cast<double>(tp + fp);
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
        d = j;
    }
    out.ap = ap;
    return out;
}

}  // namespace kvlab
