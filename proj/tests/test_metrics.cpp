#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <map>
#include <vector>

#include "kvlab/metrics.hpp"
#include "kvlab/rng.hpp"

using namespace kvlab;

namespace {

DecisionRecord rec(const std::string& id, int agent, const std::string& answer,
                   bool ok = true, std::vector<int> perm = {1, 2, 3, 4}) {
    DecisionRecord r;
    r.example_id = id;
    r.strategy = "test";
    r.permutation = std::move(perm);
    r.selected_agent = agent;
    r.answer = answer;
    r.parse_ok = ok;
    return r;
}

}  // namespace

TEST_CASE("accuracy") {
    std::map<std::string, std::string> gold = {
        {"a", "1"}, {"b", "2"}, {"c", "3"}, {"d", "4"}};

    SECTION("all correct is 100.00") {
        std::vector<DecisionRecord> log = {rec("a", 1, "1"), rec("b", 1, "2")};
        const MetricReport m = accuracy(log, gold);
        REQUIRE(m.value == 100.0);
        REQUIRE(m.numerator == 2);
        REQUIRE(m.denominator == 2);
    }
    SECTION("3 of 4 correct is 75.00") {
        std::vector<DecisionRecord> log = {rec("a", 1, "1"), rec("b", 1, "2"),
                                           rec("c", 1, "3"), rec("d", 1, "9")};
        REQUIRE(accuracy(log, gold).value == 75.0);
    }
    SECTION("parse failures count as wrong") {
        std::vector<DecisionRecord> log = {rec("a", 1, "1", false), rec("b", 1, "2")};
        REQUIRE(accuracy(log, gold).value == 50.0);
    }
    SECTION("matches a brute-force recount on a seeded log") {
        Rng rng(404);
        std::vector<DecisionRecord> log;
        std::map<std::string, std::string> g;
        for (int i = 0; i < 200; ++i) {
            const std::string id = "e" + std::to_string(i);
            g[id] = std::to_string(rng.bounded(4));
            log.push_back(rec(id, 1, std::to_string(rng.bounded(4)), rng.uniform() < 0.9));
        }
        std::uint64_t want = 0;
        for (const auto& d : log) {
            if (d.parse_ok && d.answer == g[d.example_id]) ++want;
        }
        const MetricReport m = accuracy(log, g);
        REQUIRE(m.numerator == want);
        REQUIRE(m.value == 100.0 * static_cast<double>(want) / 200.0);
    }
    SECTION("missing gold is a usage error") {
        std::vector<DecisionRecord> log = {rec("zzz", 1, "1")};
        REQUIRE_THROWS_AS(accuracy(log, gold), UsageError);
    }
}

TEST_CASE("jcr") {
    SECTION("a log against itself is 100.00") {
        std::vector<DecisionRecord> log = {rec("a", 1, "1"), rec("b", 3, "2")};
        const MetricReport m = jcr(log, log);
        REQUIRE(m.value == 100.0);
    }
    SECTION("selection arithmetic") {
        std::vector<DecisionRecord> a = {rec("a", 1, ""), rec("b", 2, ""), rec("c", 3, ""),
                                         rec("d", 4, "")};
        std::vector<DecisionRecord> b = {rec("a", 1, ""), rec("b", 2, ""), rec("c", 4, ""),
                                         rec("d", 4, "")};
        REQUIRE(jcr(a, b).value == 75.0);
        REQUIRE(jcr(b, a).value == 75.0);  // symmetric
    }
    SECTION("parse failure on either side is a strict mismatch") {
        std::vector<DecisionRecord> a = {rec("a", 1, ""), rec("b", 2, "", false)};
        std::vector<DecisionRecord> b = {rec("a", 1, ""), rec("b", 2, "")};
        REQUIRE(jcr(a, b).value == 50.0);
        const MetricReport filtered = jcr_filtered(a, b);
        REQUIRE(filtered.denominator == 1);
        REQUIRE(filtered.value == 100.0);
    }
    SECTION("matches a brute-force pairwise comparison") {
        Rng rng(505);
        std::vector<DecisionRecord> a, b;
        for (int i = 0; i < 300; ++i) {
            const std::string id = "e" + std::to_string(i);
            a.push_back(rec(id, 1 + static_cast<int>(rng.bounded(4)), ""));
            b.push_back(rec(id, 1 + static_cast<int>(rng.bounded(4)), ""));
        }
        std::uint64_t want = 0;
        for (std::size_t i = 0; i < a.size(); ++i) {
            if (a[i].selected_agent == b[i].selected_agent) ++want;
        }
        REQUIRE(jcr(a, b).numerator == want);
    }
    SECTION("permutation mismatch is a protocol error") {
        std::vector<DecisionRecord> a = {rec("a", 1, "", true, {1, 2})};
        std::vector<DecisionRecord> b = {rec("a", 1, "", true, {2, 1})};
        REQUIRE_THROWS_AS(jcr(a, b), ProtocolError);
    }
    SECTION("missing example is a protocol error") {
        std::vector<DecisionRecord> a = {rec("a", 1, ""), rec("b", 1, "")};
        std::vector<DecisionRecord> b = {rec("a", 1, "")};
        REQUIRE_THROWS_AS(jcr(a, b), ProtocolError);
    }
}

TEST_CASE("reuse_rate") {
    SECTION("2 reused of 8 flags is 25.00") {
        std::vector<DecisionRecord> log(2);
        log[0].reused_flags = {1, 0, 0, 0};
        log[1].reused_flags = {0, 1, 0, 0};
        const MetricReport m = reuse_rate(std::span<const DecisionRecord>(log));
        REQUIRE(m.value == 25.0);
        REQUIRE(m.numerator == 2);
        REQUIRE(m.denominator == 8);
    }
    SECTION("dense-style and naive-style logs hit the endpoints") {
        std::vector<DecisionRecord> dense(3), naive(3);
        for (auto& d : dense) d.reused_flags = {0, 0, 0, 0};
        for (auto& d : naive) d.reused_flags = {1, 1, 1, 1};
        REQUIRE(reuse_rate(std::span<const DecisionRecord>(dense)).value == 0.0);
        REQUIRE(reuse_rate(std::span<const DecisionRecord>(naive)).value == 100.0);
    }
}

TEST_CASE("counts_crosstab") {
    SECTION("uniform counts land in a single cell") {
        std::vector<int> acc(10, 3), con(10, 3);
        const auto t = counts_crosstab(acc, con, 3);
        REQUIRE(t[3][3] == 10);
        std::uint64_t total = 0;
        for (const auto& row : t) {
            for (std::uint64_t c : row) total += c;
        }
        REQUIRE(total == 10);
    }
    SECTION("matches a brute-force tally") {
        Rng rng(606);
        std::vector<int> acc, con;
        for (int i = 0; i < 500; ++i) {
            acc.push_back(static_cast<int>(rng.bounded(4)));
            con.push_back(static_cast<int>(rng.bounded(4)));
        }
        const auto t = counts_crosstab(acc, con, 3);
        for (int i = 0; i <= 3; ++i) {
            for (int j = 0; j <= 3; ++j) {
                std::uint64_t want = 0;
                for (std::size_t e = 0; e < acc.size(); ++e) {
                    if (acc[e] == i && con[e] == j) ++want;
                }
                REQUIRE(t[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] == want);
            }
        }
    }
    SECTION("out-of-range counts rejected") {
        std::vector<int> acc = {4}, con = {0};
        REQUIRE_THROWS_AS(counts_crosstab(acc, con, 3), UsageError);
    }
}

namespace {

Layout two_slot_layout() {
    Layout layout;
    layout.prefix = {0, 4};
    layout.candidates = {
        {{4, 2}, {6, 3}, 1, 1},
        {{9, 2}, {11, 3}, 2, 2},
    };
    layout.permutation = {1, 2};
    layout.total_len = 14;
    layout.validate();
    return layout;
}

}  // namespace

TEST_CASE("attention_region_mass") {
    const Layout layout = two_slot_layout();

    SECTION("uniform attention gives masses proportional to region lengths") {
        AttentionRecord record;
        record.step = layout.total_len;  // one decode position past the layout
        const std::size_t n = layout.total_len + 1;
        record.weights = {{std::vector<double>(n, 1.0 / static_cast<double>(n)),
                           std::vector<double>(n, 1.0 / static_cast<double>(n))}};
        const RegionMassProfile p = attention_region_mass(record, layout);
        // prefix 4 tokens, bodies 3 tokens each; headers are not reported
        REQUIRE(std::abs(p.prefix - 0.4) <= 1e-12);
        REQUIRE(std::abs(p.slots[0] - 0.3) <= 1e-12);
        REQUIRE(std::abs(p.slots[1] - 0.3) <= 1e-12);
        REQUIRE(std::abs(p.total() - 1.0) <= 1e-6);
    }

    SECTION("masked run puts exactly zero mass on the earlier slot") {
        ModelConfig cfg;
        cfg.vocab_size = 256;
        cfg.d_model = 32;
        cfg.n_layers = 3;
        cfg.n_heads = 4;
        cfg.head_dim = 8;
        const Weights w = init_weights(cfg);
        Rng rng(707);
        std::vector<Tok> toks(layout.total_len);
        for (Tok& t : toks) t = static_cast<Tok>(rng.bounded(200));
        const AttentionMask mask = build_cross_candidate_mask(layout);
        auto res = prefill(w, toks, mask, nullptr, true);
        // Query at the last token of slot 2's body covers the full layout.
        const AttentionRecord& probe = res.records.back();
        const RegionMassProfile p = attention_region_mass(probe, layout);
        REQUIRE(p.slots[0] == 0.0);
        REQUIRE(p.slots[1] > 0.0);
        REQUIRE(std::abs(p.total() - 1.0) <= 1e-6);
    }

    SECTION("record shorter than the layout is a usage error") {
        AttentionRecord record;
        record.weights = {{std::vector<double>(5, 0.2)}};
        REQUIRE_THROWS_AS(attention_region_mass(record, layout), UsageError);
    }
}

TEST_CASE("jaccard_topk") {
    SECTION("identical saliences overlap fully") {
        const std::vector<double> s = {0.4, 0.1, 0.3, 0.2};
        REQUIRE(jaccard_topk(s, s, 50.0) == 1.0);
        REQUIRE(jaccard_topk(s, s, 100.0) == 1.0);
    }
    SECTION("disjoint top sets give zero") {
        const std::vector<double> a = {1.0, 0.9, 0.0, 0.0};
        const std::vector<double> b = {0.0, 0.0, 0.9, 1.0};
        REQUIRE(jaccard_topk(a, b, 50.0) == 0.0);
    }
    SECTION("partial overlap: {t1,t2} vs {t2,t3} is one third") {
        const std::vector<double> a = {1.0, 0.9, 0.1, 0.0};
        const std::vector<double> b = {0.1, 0.9, 1.0, 0.0};
        REQUIRE(std::abs(jaccard_topk(a, b, 50.0) - 1.0 / 3.0) <= 1e-12);
    }
    SECTION("k=100 on equal lengths is always 1") {
        Rng rng(808);
        std::vector<double> a(17), b(17);
        for (double& x : a) x = rng.normal();
        for (double& x : b) x = rng.normal();
        REQUIRE(jaccard_topk(a, b, 100.0) == 1.0);
    }
    SECTION("length mismatch rejected") {
        const std::vector<double> a = {1.0}, b = {1.0, 2.0};
        REQUIRE_THROWS_AS(jaccard_topk(a, b, 50.0), UsageError);
    }
}

TEST_CASE("ranking_metrics") {
    SECTION("perfect separation") {
        const std::vector<double> scores = {0.9, 0.8, 0.2, 0.1};
        const std::vector<int> labels = {1, 1, 0, 0};
        const RankingMetrics m = ranking_metrics(scores, labels);
        REQUIRE(m.auc == 1.0);
        REQUIRE(m.ap == 1.0);
    }
    SECTION("hand-computed mixed fixture") {
        const std::vector<double> scores = {0.9, 0.8, 0.7, 0.6};
        const std::vector<int> labels = {1, 0, 1, 0};
        const RankingMetrics m = ranking_metrics(scores, labels);
        REQUIRE(m.auc == 0.75);
        REQUIRE(std::abs(m.ap - 5.0 / 6.0) <= 1e-12);
    }
    SECTION("ties count one half") {
        const std::vector<double> scores = {0.5, 0.5};
        const std::vector<int> labels = {1, 0};
        REQUIRE(ranking_metrics(scores, labels).auc == 0.5);
    }
    SECTION("random scores sit near 0.5") {
        Rng rng(909);
        std::vector<double> scores(5000);
        std::vector<int> labels(5000);
        for (std::size_t i = 0; i < scores.size(); ++i) {
            scores[i] = rng.uniform();
            labels[i] = rng.uniform() < 0.5 ? 1 : 0;
        }
        const RankingMetrics m = ranking_metrics(scores, labels);
        REQUIRE(std::abs(m.auc - 0.5) <= 0.03);
    }
    SECTION("AUC equals the brute-force pairwise count on 1000 random instances") {
        Rng rng(1010);
        for (int instance = 0; instance < 1000; ++instance) {
            const std::size_t n = 8 + rng.bounded(24);
            std::vector<double> scores(n);
            std::vector<int> labels(n);
            bool pos = false, neg = false;
            for (std::size_t i = 0; i < n; ++i) {
                // quantized scores force tie handling
                scores[i] = static_cast<double>(rng.bounded(6)) / 4.0;
                labels[i] = rng.uniform() < 0.5 ? 1 : 0;
                (labels[i] ? pos : neg) = true;
            }
            if (!pos) labels[0] = 1;
            if (!neg) labels[n - 1] = 0;

            std::uint64_t numerator2 = 0, p = 0, ng = 0;
            for (std::size_t i = 0; i < n; ++i) {
                if (labels[i] != 1) continue;
                ++p;
                for (std::size_t j = 0; j < n; ++j) {
                    if (labels[j] != 0) continue;
                    if (scores[i] > scores[j]) numerator2 += 2;
                    else if (scores[i] == scores[j]) numerator2 += 1;
                }
            }
            for (std::size_t j = 0; j < n; ++j) ng += labels[j] == 0 ? 1 : 0;
            const double want = static_cast<double>(numerator2) /
                                (2.0 * static_cast<double>(p) * static_cast<double>(ng));
            REQUIRE(ranking_metrics(scores, labels).auc == want);
        }
    }
    SECTION("single-class labels rejected") {
        const std::vector<double> scores = {0.1, 0.2};
        const std::vector<int> ones = {1, 1};
        REQUIRE_THROWS_AS(ranking_metrics(scores, ones), UsageError);
    }
}
