#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "kvlab/cache.hpp"
#include "kvlab/textio.hpp"
#include "kvlab/weights.hpp"

namespace kvlab {

enum class StrategyKind { dense, naive, kvcomm, palkv, slotalign };

inline const char* strategy_name(StrategyKind k) {
    switch (k) {
        case StrategyKind::dense: return "dense";
        case StrategyKind::naive: return "naive";
        case StrategyKind::kvcomm: return "kvcomm";
        case StrategyKind::palkv: return "palkv";
        case StrategyKind::slotalign: return "slotalign";
    }
    return "unknown";
}

inline StrategyKind strategy_from_name(const std::string& name) {
    if (name == "dense") return StrategyKind::dense;
    if (name == "naive") return StrategyKind::naive;
    if (name == "kvcomm") return StrategyKind::kvcomm;
    if (name == "palkv") return StrategyKind::palkv;
    if (name == "slotalign") return StrategyKind::slotalign;
    throw ConfigError("unknown strategy: " + name);
}

struct StrategyConfig {
    StrategyKind kind = StrategyKind::dense;
    double gamma = 0.0;                 // shareability distance threshold
    std::optional<std::size_t> top_k;   // nullopt = aggregate all matched
    double softmax_temperature = 1.0;
    std::size_t pool_limit = 5;

    void validate() const {
        if (gamma < 0.0) throw ConfigError("gamma must be non-negative");
        if (pool_limit < 1) throw ConfigError("pool_limit must be at least 1");
        if (!(softmax_temperature > 0.0)) throw ConfigError("softmax_temperature must be positive");
        if (top_k && *top_k == 0) throw ConfigError("top_k must be positive when set");
    }
};

// One stored correction: the matching-view embedding under which the
// deviation was measured, plus the per-token deviation itself.
struct AnchorEntry {
    std::vector<double> view;
    std::size_t chunk_len = 0;
    DeviationTensor deviation;
    std::uint64_t order = 0;  // global insertion order
};

// Appends an entry to one pool slice, evicting the oldest beyond the limit.
inline void insert_anchor(std::vector<AnchorEntry>& slice, AnchorEntry entry,
                          std::size_t pool_limit) {
    if (entry.deviation.slab.token_len != entry.chunk_len) {
        throw UsageError("anchor deviation length disagrees with chunk_len");
    }
    slice.push_back(std::move(entry));
    while (slice.size() > pool_limit) slice.erase(slice.begin());
}

// Keyed collection of anchor slices. The key is an agent id, a display slot,
// or anything else a strategy chooses; retrieval scope is the caller's
// business (one slice for KVCOMM, the union for PAL-KV).
class AnchorPool {
public:
    const AnchorEntry& insert(int key, std::vector<double> view, std::size_t chunk_len,
                              DeviationTensor deviation, std::size_t pool_limit) {
        AnchorEntry e;
        e.view = std::move(view);
        e.chunk_len = chunk_len;
        e.deviation = std::move(deviation);
        e.order = next_order_++;
        auto& slice = slices_[key];
        insert_anchor(slice, std::move(e), pool_limit);
        return slice.back();
    }

    std::vector<const AnchorEntry*> slice(int key) const {
        std::vector<const AnchorEntry*> out;
        const auto it = slices_.find(key);
        if (it == slices_.end()) return out;
        out.reserve(it->second.size());
        for (const AnchorEntry& e : it->second) out.push_back(&e);
        return out;
    }

    // Union over all keys, deterministic order (key asc, insertion asc).
    std::vector<const AnchorEntry*> all_entries() const {
        std::vector<const AnchorEntry*> out;
        for (const auto& [key, slice] : slices_) {
            for (const AnchorEntry& e : slice) out.push_back(&e);
        }
        return out;
    }

    std::size_t total_entries() const {
        std::size_t n = 0;
        for (const auto& [key, slice] : slices_) n += slice.size();
        return n;
    }

    std::size_t max_slice_size() const {
        std::size_t n = 0;
        for (const auto& [key, slice] : slices_) n = std::max(n, slice.size());
        return n;
    }

    const std::map<int, std::vector<AnchorEntry>>& slices() const { return slices_; }

    // Line-delimited snapshot, one record per entry; hexfloat payloads make
    // the round-trip bit-exact.
    std::string serialize() const {
        std::ostringstream out;
        out << "kvlab-anchor-pool v1\n";
        for (const auto& [key, slice] : slices_) {
            for (const AnchorEntry& e : slice) {
                out << "entry key=" << key << " order=" << e.order
                    << " chunk_len=" << e.chunk_len << " view_dim=" << e.view.size()
                    << " layers=" << e.deviation.slab.n_layers
                    << " heads=" << e.deviation.slab.n_heads
                    << " head_dim=" << e.deviation.slab.head_dim << " view";
                for (double v : e.view) out << ' ' << hex_double(v);
                out << " dev";
                for (const auto& layer : e.deviation.slab.layers) {
                    for (double v : layer.k) out << ' ' << hex_double(v);
                    for (double v : layer.v) out << ' ' << hex_double(v);
                }
                out << "\n";
            }
        }
        return out.str();
    }

    static AnchorPool deserialize(const std::string& text) {
        AnchorPool pool;
        const auto lines = split_lines(text);
        if (lines.empty() || lines[0] != "kvlab-anchor-pool v1") {
            throw UsageError("not an anchor pool snapshot");
        }
        for (std::size_t i = 1; i < lines.size(); ++i) {
            if (lines[i].empty()) continue;
            std::istringstream in(lines[i]);
            std::string tag;
            in >> tag;
            if (tag != "entry") throw UsageError("malformed pool snapshot line");
            auto field = [&](const char* name) -> std::string {
                std::string kv;
                in >> kv;
                const std::string prefix = std::string(name) + "=";
                if (kv.rfind(prefix, 0) != 0) throw UsageError("malformed pool snapshot field");
                return kv.substr(prefix.size());
            };
            const int key = std::stoi(field("key"));
            AnchorEntry e;
            e.order = std::stoull(field("order"));
            e.chunk_len = std::stoull(field("chunk_len"));
            const std::size_t view_dim = std::stoull(field("view_dim"));
            const std::size_t n_layers = std::stoull(field("layers"));
            const std::size_t n_heads = std::stoull(field("heads"));
            const std::size_t head_dim = std::stoull(field("head_dim"));
            std::string word;
            in >> word;
            if (word != "view") throw UsageError("malformed pool snapshot line");
            e.view.resize(view_dim);
            for (double& v : e.view) {
                in >> word;
                v = parse_hex_double(word);
            }
            in >> word;
            if (word != "dev") throw UsageError("malformed pool snapshot line");
            e.deviation.slab = KVSlab::zeros(n_layers, n_heads, head_dim, e.chunk_len);
            for (auto& layer : e.deviation.slab.layers) {
                for (double& v : layer.k) {
                    in >> word;
                    v = parse_hex_double(word);
                }
                for (double& v : layer.v) {
                    in >> word;
                    v = parse_hex_double(word);
                }
            }
            pool.slices_[key].push_back(std::move(e));
            pool.next_order_ = std::max(pool.next_order_, pool.slices_[key].back().order + 1);
        }
        return pool;
    }

private:
    std::map<int, std::vector<AnchorEntry>> slices_;
    std::uint64_t next_order_ = 0;
};

// Matching view of a candidate chunk under a judge-side prefix: mean token
// embedding of the preceding content concatenated with the mean token
// embedding of the chunk itself (dimension 2 * d_model). Deterministic and
// prefix-sensitive, which is all the gating needs.
inline std::vector<double> matching_view(const Weights& w, std::span<const Tok> preceding,
                                         std::span<const Tok> chunk_tokens) {
    if (chunk_tokens.empty()) throw UsageError("matching_view requires a non-empty chunk");
    const std::size_t d = w.config.d_model;
    std::vector<double> view(2 * d, 0.0);
    auto mean_into = [&](std::span<const Tok> toks, std::size_t offset) {
        if (toks.empty()) return;
        for (Tok t : toks) {
            const double* row = w.embedding.data() + static_cast<std::size_t>(t) * d;
            for (std::size_t i = 0; i < d; ++i) view[offset + i] += row[i];
        }
        for (std::size_t i = 0; i < d; ++i) view[offset + i] /= static_cast<double>(toks.size());
    };
    mean_into(preceding, 0);
    mean_into(chunk_tokens, d);
    return view;
}

inline double view_distance(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) throw UsageError("view dimension mismatch");
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = a[i] - b[i];
        s += d * d;
    }
    return std::sqrt(s);
}

struct RetrievedOffset {
    DeviationTensor offset;
    std::vector<std::uint64_t> matched_ids;  // insertion orders of matched anchors
    std::vector<double> weights;
};

struct OffsetQuery {
    std::optional<RetrievedOffset> hit;
    bool saw_length_match = false;  // distinguishes gated-out from no-anchor
};

// Shareability gate and offset aggregation. Candidate anchors must match the
// chunk length exactly and sit within gamma of the query view; the offset is
// the softmax(-distance/T)-weighted sum over the top_k nearest.
inline OffsetQuery retrieve_offset(std::span<const double> view, std::size_t chunk_len,
                                   std::span<const AnchorEntry* const> pool_slice,
                                   const StrategyConfig& config) {
    config.validate();
    OffsetQuery out;
    struct Scored {
        const AnchorEntry* entry;
        double distance;
    };
    std::vector<Scored> matched;
    for (const AnchorEntry* e : pool_slice) {
        if (e->chunk_len != chunk_len) continue;
        out.saw_length_match = true;
        const double dist = view_distance(view, e->view);
        if (dist <= config.gamma) matched.push_back({e, dist});
    }
    if (matched.empty()) return out;

    std::stable_sort(matched.begin(), matched.end(), [](const Scored& a, const Scored& b) {
        if (a.distance != b.distance) return a.distance < b.distance;
        return a.entry->order < b.entry->order;
    });
    if (config.top_k && matched.size() > *config.top_k) matched.resize(*config.top_k);

    double max_neg = -matched[0].distance;
    for (const Scored& s : matched) max_neg = std::max(max_neg, -s.distance);
    double denom = 0.0;
    std::vector<double> weights(matched.size());
    for (std::size_t i = 0; i < matched.size(); ++i) {
        weights[i] = std::exp((-matched[i].distance - max_neg) / config.softmax_temperature);
        denom += weights[i];
    }
    for (double& wgt : weights) wgt /= denom;

    RetrievedOffset result;
    const KVSlab& shape = matched[0].entry->deviation.slab;
    result.offset.slab = KVSlab::zeros(shape.n_layers, shape.n_heads, shape.head_dim, chunk_len);
    for (std::size_t i = 0; i < matched.size(); ++i) {
        const KVSlab& dev = matched[i].entry->deviation.slab;
        for (std::size_t l = 0; l < dev.n_layers; ++l) {
            for (std::size_t j = 0; j < dev.layers[l].k.size(); ++j) {
                result.offset.slab.layers[l].k[j] += weights[i] * dev.layers[l].k[j];
                result.offset.slab.layers[l].v[j] += weights[i] * dev.layers[l].v[j];
            }
        }
        result.matched_ids.push_back(matched[i].entry->order);
        result.weights.push_back(weights[i]);
    }
    out.hit = std::move(result);
    return out;
}

}  // namespace kvlab
