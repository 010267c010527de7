// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "adakv/attention.hpp"
#include "adakv/budget.hpp"
#include "adakv/matrix.hpp"

namespace adakv {

enum class PolicyKind {
    snapkv,
    pyramid,
    ada_snapkv,
    ada_pyramid,
    streaming_llm,
};

inline const char* to_string(PolicyKind k) {
    switch (k) {
        case PolicyKind::snapkv: return "snapkv";
        case PolicyKind::pyramid: return "pyramid";
        case PolicyKind::ada_snapkv: return "ada_snapkv";
        case PolicyKind::ada_pyramid: return "ada_pyramid";
        case PolicyKind::streaming_llm: return "streaming_llm";
    }
    throw std::invalid_argument("to_string: unknown policy kind");
}

inline PolicyKind policy_kind_from_string(const std::string& s) {
    if (s == "snapkv") return PolicyKind::snapkv;
    if (s == "pyramid") return PolicyKind::pyramid;
    if (s == "ada_snapkv") return PolicyKind::ada_snapkv;
    if (s == "ada_pyramid") return PolicyKind::ada_pyramid;
    if (s == "streaming_llm") return PolicyKind::streaming_llm;
    throw std::invalid_argument("unknown policy kind: " + s);
}

inline bool is_adaptive(PolicyKind k) {
    return k == PolicyKind::ada_snapkv || k == PolicyKind::ada_pyramid;
}

inline bool is_pyramid(PolicyKind k) {
    return k == PolicyKind::pyramid || k == PolicyKind::ada_pyramid;
}

struct PolicyConfig {
    PolicyKind kind = PolicyKind::ada_snapkv;
    std::size_t window_size = 32;
    std::size_t pool_kernel = 7;
    double alpha = 0.2;
    std::size_t sink_tokens = 4;
    std::size_t gqa_group_size = 1;
    bool scale = true;

    void validate() const {
        if (window_size < 1) throw std::invalid_argument("PolicyConfig: window_size < 1");
        if (pool_kernel % 2 == 0 || pool_kernel == 0)
            throw std::invalid_argument("PolicyConfig: pool_kernel must be odd");
        if (!(alpha >= 0.0 && alpha <= 1.0))
            throw std::invalid_argument("PolicyConfig: alpha outside [0,1]");
        if (gqa_group_size == 0) throw std::invalid_argument("PolicyConfig: zero group size");
    }
};

/// Per-head (or per-group) observation scores over the positions outside
/// the window.
using ObservationScores = std::vector<std::vector<double>>;

/// Retain exactly the k largest entries; ties go to the lowest position.
inline std::vector<std::uint8_t> topk_decision(std::span<const double> a, std::size_t k,
                                               TieBreak = TieBreak::by_head_then_position) {
    const std::size_t n = a.size();
    if (k > n) throw std::invalid_argument("topk_decision: k exceeds length");
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) {
        if (a[x] != a[y]) return a[x] > a[y];
        return x < y;
    });
    std::vector<std::uint8_t> keep(n, 0);
    for (std::size_t r = 0; r < k; ++r) keep[order[r]] = 1;
    return keep;
}

namespace detail {

/// Sliding max with stride 1 and symmetric padding of (kernel-1)/2;
/// padded cells are excluded from each max, so the length stays n.
inline std::vector<double> maxpool_same(std::span<const double> row, std::size_t kernel) {
    if (kernel % 2 == 0 || kernel == 0) throw std::invalid_argument("maxpool: kernel must be odd");
    const std::size_t n = row.size();
    const std::size_t pad = (kernel - 1) / 2;
    std::vector<double> out(n);
    for (std::size_t j = 0; j < n; ++j) {
        const std::size_t lo = j >= pad ? j - pad : 0;
        const std::size_t hi = std::min(n, j + pad + 1);
        double m = row[lo];
        for (std::size_t t = lo + 1; t < hi; ++t) m = std::max(m, row[t]);
        out[j] = m;
    }
    return out;
}

}  // namespace detail

/// Observation scoring for one head: softmax of each window query over the
/// outside keys, max-pooled along the key axis, then averaged over the
/// window rows.
inline std::vector<double> window_scores(const Matrix& window_queries, const Matrix& outside_keys,
                                         std::size_t pool_kernel, bool scale = true) {
    if (window_queries.rows() == 0) throw std::invalid_argument("window_scores: empty window");
    const Matrix a = attention_weights(window_queries, outside_keys, scale);
    const std::size_t m = a.rows();
    const std::size_t n = a.cols();
    std::vector<double> mean(n, 0.0);
    for (std::size_t r = 0; r < m; ++r) {
        const auto pooled = detail::maxpool_same(a.row(r), pool_kernel);
        for (std::size_t j = 0; j < n; ++j) mean[j] += pooled[j];
    }
    for (std::size_t j = 0; j < n; ++j) mean[j] /= static_cast<double>(m);
    return mean;
}

/// Elementwise mean of each group's member scores; consecutive heads form
/// groups and share the resulting vector.
inline ObservationScores group_mean_scores(const ObservationScores& scores,
                                           std::size_t group_size) {
    if (group_size == 0) throw std::invalid_argument("group_mean_scores: zero group size");
    if (scores.size() % group_size != 0)
        throw std::invalid_argument("group_mean_scores: head count not divisible by group size");
    const std::size_t groups = scores.size() / group_size;
    ObservationScores out(groups);
    for (std::size_t gi = 0; gi < groups; ++gi) {
        const auto& first = scores[gi * group_size];
        std::vector<double> acc(first.size(), 0.0);
        for (std::size_t k = 0; k < group_size; ++k) {
            const auto& s = scores[gi * group_size + k];
            if (s.size() != first.size())
                throw std::invalid_argument("group_mean_scores: member length mismatch");
            for (std::size_t j = 0; j < s.size(); ++j) acc[j] += s[j];
        }
        for (double& v : acc) v /= static_cast<double>(group_size);
        out[gi] = std::move(acc);
    }
    return out;
}

/// Sink-plus-recent retention: positions [0, sink) and [n-recent, n).
inline std::vector<std::uint8_t> streaming_llm_decision(std::size_t n, std::size_t sink,
                                                        std::size_t recent) {
    std::vector<std::uint8_t> keep(n, 0);
    for (std::size_t j = 0; j < std::min(sink, n); ++j) keep[j] = 1;
    for (std::size_t j = n > recent ? n - recent : 0; j < n; ++j) keep[j] = 1;
    return keep;
}

struct EvictLayerResult {
    LayerCache retained;
    EvictionDecision decision;      // over outside positions, one entry per head
    BudgetAllocation allocation;    // outside budget split, one entry per KV group
    ObservationScores scores;       // pooled observation scores, one entry per KV group
};

namespace detail {

/// Moves single units from the most-funded groups to any zero-budget group
/// so every group retains at least one outside element.
inline void repair_zero_budgets(std::vector<std::size_t>& counts,
                                std::span<const std::size_t> caps) {
    for (std::size_t gi = 0; gi < counts.size(); ++gi) {
        while (counts[gi] == 0) {
            std::size_t donor = counts.size();
            std::size_t best = 1;
            for (std::size_t k = 0; k < counts.size(); ++k) {
                if (counts[k] > best) {
                    best = counts[k];
                    donor = k;
                }
            }
            if (donor == counts.size() || caps[gi] == 0)
                throw std::invalid_argument("evict_layer: cannot guarantee one element per head");
            --counts[donor];
            ++counts[gi];
        }
    }
}

}  // namespace detail

/// Full single-layer eviction pass. The observation window is always kept;
/// the remaining budget is split over the positions before it. Heads within
/// a GQA group share keys/values, one decision, and one budget unit per
/// retained element.
inline EvictLayerResult evict_layer(const LayerCache& cache_outside,
                                    const LayerCache& window_cache,
                                    const Matrix& window_embeddings, const LayerParams& params,
                                    std::size_t layer_budget, const PolicyConfig& config) {
    config.validate();
    params.validate();
    cache_outside.validate();
    window_cache.validate();
    const std::size_t h = params.head_count();
    if (cache_outside.head_count() != h || window_cache.head_count() != h)
        throw std::invalid_argument("evict_layer: head count mismatch");
    const std::size_t g = config.gqa_group_size;
    if (h % g != 0) throw std::invalid_argument("evict_layer: head count not divisible by group");
    const std::size_t groups = h / g;
    const std::size_t m = window_embeddings.rows();
    if (m == 0) throw std::invalid_argument("evict_layer: empty window");
    if (window_embeddings.cols() != params.embed_dim())
        throw std::invalid_argument("evict_layer: embedding width mismatch");
    for (std::size_t i = 0; i < h; ++i) {
        if (window_cache.heads[i].length() != m)
            throw std::invalid_argument("evict_layer: window cache length mismatch");
        if (cache_outside.heads[i].length() != cache_outside.heads[(i / g) * g].length())
            throw std::invalid_argument("evict_layer: unequal lengths within a group");
    }

    if (layer_budget < m * groups + groups)
        throw std::invalid_argument("evict_layer: budget below the window-plus-one floor");
    const std::size_t outside_budget = layer_budget - m * groups;

    std::vector<std::size_t> caps(groups);
    for (std::size_t gi = 0; gi < groups; ++gi) {
        caps[gi] = cache_outside.heads[gi * g].length();
        if (caps[gi] == 0) throw std::invalid_argument("evict_layer: empty outside cache head");
    }

    // Observation scoring runs for every kind so callers can always inspect
    // the score-level bound ladder.
    ObservationScores per_head(h);
    for (std::size_t i = 0; i < h; ++i) {
        const Matrix q = matmul(window_embeddings, params.heads[i].wq);
        per_head[i] = window_scores(q, cache_outside.heads[(i / g) * g].keys, config.pool_kernel,
                                    config.scale);
    }
    ObservationScores group_scores = group_mean_scores(per_head, g);

    BudgetAllocation alloc;
    if (is_adaptive(config.kind)) {
        const auto raw = adaptive_allocation(group_scores, outside_budget);
        alloc = safeguard_blend(raw, outside_budget, groups, config.alpha, caps);
        detail::repair_zero_budgets(alloc.per_head, caps);
    } else {
        alloc = uniform_allocation(outside_budget, groups, caps);
        detail::repair_zero_budgets(alloc.per_head, caps);
    }

    EvictionDecision decision;
    decision.retain.resize(h);
    for (std::size_t gi = 0; gi < groups; ++gi) {
        std::vector<std::uint8_t> keep;
        if (config.kind == PolicyKind::streaming_llm) {
            const std::size_t b = alloc.per_head[gi];
            const std::size_t sink = std::min(config.sink_tokens, b);
            keep = streaming_llm_decision(caps[gi], sink, b - sink);
        } else {
            keep = topk_decision(group_scores[gi], alloc.per_head[gi]);
        }
        for (std::size_t k = 0; k < g; ++k) decision.retain[gi * g + k] = keep;
    }

    LayerCache retained;
    retained.heads.resize(h);
    for (std::size_t i = 0; i < h; ++i) {
        const auto& src = cache_outside.heads[i];
        const auto& keep = decision.retain[i];
        Matrix keys(0, src.keys.cols());
        Matrix values(0, src.values.cols());
        for (std::size_t j = 0; j < src.length(); ++j) {
            if (!keep[j]) continue;
            keys.append_row(src.keys.row(j));
            values.append_row(src.values.row(j));
        }
        for (std::size_t j = 0; j < m; ++j) {
            keys.append_row(window_cache.heads[i].keys.row(j));
            values.append_row(window_cache.heads[i].values.row(j));
        }
        retained.heads[i] = {std::move(keys), std::move(values)};
    }

    return {std::move(retained), std::move(decision), std::move(alloc), std::move(group_scores)};
}

/// Decision directly from one weight row per head, without a window: the
/// theory-mode path for weights-only experiments. Uniform or Algorithm-1
/// allocation followed by the per-head Top-k decision.
inline std::pair<EvictionDecision, BudgetAllocation> evict_rows(const WeightRows& weights,
                                                                std::size_t total_budget,
                                                                bool adaptive,
                                                                double alpha = 1.0) {
    const std::size_t h = weights.size();
    if (h == 0) throw std::invalid_argument("evict_rows: no heads");
    std::vector<std::size_t> caps(h);
    for (std::size_t i = 0; i < h; ++i) {
        caps[i] = weights[i].size();
        if (caps[i] == 0) throw std::invalid_argument("evict_rows: empty head");
    }
    if (total_budget < h) throw std::invalid_argument("evict_rows: budget below one per head");
    BudgetAllocation alloc;
    if (adaptive) {
        const auto raw = adaptive_allocation(weights, total_budget);
        alloc = safeguard_blend(raw, total_budget, h, alpha, caps);
    } else {
        alloc = uniform_allocation(total_budget, h, caps);
    }
    detail::repair_zero_budgets(alloc.per_head, caps);
    EvictionDecision decision;
    decision.retain.resize(h);
    for (std::size_t i = 0; i < h; ++i)
        decision.retain[i] = topk_decision(weights[i], alloc.per_head[i]);
    return {std::move(decision), std::move(alloc)};
}

}  // namespace adakv
