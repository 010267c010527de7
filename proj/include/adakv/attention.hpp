// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <stdexcept>
#include <vector>

#include "adakv/matrix.hpp"

namespace adakv {

/// Projection matrices of one attention head: wq/wk/wv are d×d_h, wo is d_h×d.
struct HeadParams {
    Matrix wq;
    Matrix wk;
    Matrix wv;
    Matrix wo;

    std::size_t embed_dim() const { return wq.rows(); }
    std::size_t head_dim() const { return wq.cols(); }

    void validate() const {
        if (wk.rows() != wq.rows() || wv.rows() != wq.rows())
            throw std::invalid_argument("HeadParams: wq/wk/wv must share the embedding dim");
        if (wk.cols() != wq.cols() || wv.cols() != wq.cols() || wo.rows() != wq.cols())
            throw std::invalid_argument("HeadParams: projections must share the head dim");
        if (wo.cols() != wq.rows())
            throw std::invalid_argument("HeadParams: wo must map back to the embedding dim");
        if (!all_finite(wq) || !all_finite(wk) || !all_finite(wv) || !all_finite(wo))
            throw std::invalid_argument("HeadParams: non-finite entry");
    }
};

/// One multi-head layer: h ≥ 1 heads sharing d and d_h.
struct LayerParams {
    std::vector<HeadParams> heads;

    std::size_t head_count() const { return heads.size(); }
    std::size_t embed_dim() const { return heads.front().embed_dim(); }
    std::size_t head_dim() const { return heads.front().head_dim(); }

    void validate() const {
        if (heads.empty()) throw std::invalid_argument("LayerParams: needs at least one head");
        for (const auto& h : heads) {
            h.validate();
            if (h.embed_dim() != embed_dim() || h.head_dim() != head_dim())
                throw std::invalid_argument("LayerParams: heads must share d and d_h");
        }
    }
};

/// Per-head key/value rows. Keys and values of a head always have equal
/// row counts; heads may have different lengths.
struct HeadKV {
    Matrix keys;    // n_i × d_h
    Matrix values;  // n_i × d_h

    std::size_t length() const { return keys.rows(); }
};

struct LayerCache {
    std::vector<HeadKV> heads;

    std::size_t head_count() const { return heads.size(); }
    std::size_t total_elements() const {
        std::size_t n = 0;
        for (const auto& h : heads) n += h.length();
        return n;
    }

    void validate() const {
        for (const auto& h : heads) {
            if (h.keys.rows() != h.values.rows() || h.keys.cols() != h.values.cols())
                throw std::invalid_argument("LayerCache: keys/values shape mismatch");
            if (!all_finite(h.keys) || !all_finite(h.values))
                throw std::invalid_argument("LayerCache: non-finite entry");
        }
    }
};

/// One weight row per head (the A_i of a single query). Each row is
/// non-negative and sums to 1.
using WeightRow = std::vector<double>;
using WeightRows = std::vector<WeightRow>;

/// General m-row weight form, one matrix per head (observation windows).
using AttentionWeights = std::vector<Matrix>;

/// Per-head binary retain(1)/evict(0) indicators.
struct EvictionDecision {
    std::vector<std::vector<std::uint8_t>> retain;

    std::size_t head_count() const { return retain.size(); }
    std::size_t retained_count(std::size_t i) const {
        std::size_t c = 0;
        for (auto b : retain[i]) c += b ? 1 : 0;
        return c;
    }
    std::size_t total_retained() const {
        std::size_t c = 0;
        for (std::size_t i = 0; i < retain.size(); ++i) c += retained_count(i);
        return c;
    }
};

struct QkvRows {
    std::vector<double> q;
    std::vector<double> k;
    std::vector<double> v;
};

/// q = x·wq, k = x·wk, v = x·wv for one token embedding row.
inline QkvRows project_qkv(std::span<const double> x, const HeadParams& params) {
    if (x.size() != params.embed_dim())
        throw std::invalid_argument("project_qkv: embedding width mismatch");
    if (!all_finite(x)) throw std::invalid_argument("project_qkv: non-finite input");
    return {row_times(x, params.wq), row_times(x, params.wk), row_times(x, params.wv)};
}

/// Appends one (k, v) row to head i; other heads untouched.
inline void append_kv(LayerCache& cache, std::size_t head, std::span<const double> k,
                      std::span<const double> v) {
    if (head >= cache.heads.size()) throw std::out_of_range("append_kv: head index out of range");
    auto& slot = cache.heads[head];
    if (!slot.keys.empty() && (k.size() != slot.keys.cols() || v.size() != slot.values.cols()))
        throw std::invalid_argument("append_kv: row width mismatch");
    slot.keys.append_row(k);
    slot.values.append_row(v);
}

namespace detail {

/// Softmax over the entries of `logits` selected by `mask` (all entries when
/// mask is empty). Unselected outputs are exactly 0. Max-subtraction for
/// stability; exclusion from the normalizing sum stands in for -inf logits.
inline void masked_softmax_inplace(std::span<double> logits, std::span<const std::uint8_t> mask) {
    double maxv = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < logits.size(); ++j)
        if (mask.empty() || mask[j]) maxv = std::max(maxv, logits[j]);
    if (!std::isfinite(maxv))
        throw std::invalid_argument("softmax: no retained position");
    double denom = 0.0;
    for (std::size_t j = 0; j < logits.size(); ++j) {
        if (mask.empty() || mask[j]) {
            logits[j] = std::exp(logits[j] - maxv);
            denom += logits[j];
        } else {
            logits[j] = 0.0;
        }
    }
    for (std::size_t j = 0; j < logits.size(); ++j) logits[j] /= denom;
}

inline void scores_row(std::span<const double> q, const Matrix& keys, bool scale,
                       std::span<double> out) {
    const double inv = scale ? 1.0 / std::sqrt(static_cast<double>(keys.cols())) : 1.0;
    for (std::size_t j = 0; j < keys.rows(); ++j) out[j] = dot(q, keys.row(j)) * inv;
}

}  // namespace detail

/// Row-wise softmax(q·Kᵀ) for m query rows over n keys. `scale` divides the
/// logits by √d_h first (on by default; the bound theory holds either way).
inline Matrix attention_weights(const Matrix& queries, const Matrix& keys, bool scale = true) {
    if (keys.rows() == 0) throw std::invalid_argument("attention_weights: empty key set");
    if (queries.cols() != keys.cols())
        throw std::invalid_argument("attention_weights: head dim mismatch");
    Matrix weights(queries.rows(), keys.rows());
    for (std::size_t r = 0; r < queries.rows(); ++r) {
        detail::scores_row(queries.row(r), keys, scale, weights.row(r));
        detail::masked_softmax_inplace(weights.row(r), {});
    }
    return weights;
}

/// y = Σ_i A_i·V_i·W_i^O for single-row per-head weights.
inline std::vector<double> attention_output(const WeightRows& weights, const LayerCache& cache,
                                            const LayerParams& params) {
    const std::size_t h = params.head_count();
    if (weights.size() != h || cache.head_count() != h)
        throw std::invalid_argument("attention_output: head count mismatch");
    std::vector<double> y(params.embed_dim(), 0.0);
    for (std::size_t i = 0; i < h; ++i) {
        if (weights[i].size() != cache.heads[i].length())
            throw std::invalid_argument("attention_output: weight width mismatch");
        const auto ctx = row_times(weights[i], cache.heads[i].values);  // 1×d_h
        const auto contrib = row_times(ctx, params.heads[i].wo);        // 1×d
        for (std::size_t k = 0; k < y.size(); ++k) y[k] += contrib[k];
    }
    return y;
}

/// softmax(-inf ⊙ (1-I) + q·Kᵀ): evicted positions get weight exactly 0.
inline WeightRow masked_attention_weights(std::span<const double> q, const Matrix& keys,
                                          std::span<const std::uint8_t> decision,
                                          bool scale = true) {
    if (decision.size() != keys.rows())
        throw std::invalid_argument("masked_attention_weights: decision length mismatch");
    if (q.size() != keys.cols())
        throw std::invalid_argument("masked_attention_weights: head dim mismatch");
    if (std::find(decision.begin(), decision.end(), std::uint8_t{1}) == decision.end())
        throw std::invalid_argument("masked_attention_weights: all positions evicted");
    WeightRow row(keys.rows());
    detail::scores_row(q, keys, scale, row);
    detail::masked_softmax_inplace(row, decision);
    return row;
}

/// Post-eviction weights by renormalization: (A ⊙ I)/‖A ⊙ I‖₁. Identical to
/// the masked-softmax path when A came from the same logits. A fully
/// retained row is returned unchanged (its retained mass is 1 by the row
/// invariant), keeping the no-eviction case bit-exact.
inline WeightRow renormalized_weights(std::span<const double> a,
                                      std::span<const std::uint8_t> decision) {
    if (decision.size() != a.size())
        throw std::invalid_argument("renormalized_weights: decision length mismatch");
    double retained = 0.0;
    bool all = true;
    for (std::size_t j = 0; j < a.size(); ++j) {
        if (decision[j])
            retained += a[j];
        else
            all = false;
    }
    if (all) return WeightRow(a.begin(), a.end());
    if (retained <= 0.0)
        throw std::invalid_argument("renormalized_weights: zero retained mass");
    WeightRow out(a.size(), 0.0);
    for (std::size_t j = 0; j < a.size(); ++j)
        if (decision[j]) out[j] = a[j] / retained;
    return out;
}

/// ŷ = Σ_i Â_i·V_i·W_i^O with Â the renormalized weights. Every head must
/// retain at least one element.
inline std::vector<double> post_eviction_output(const WeightRows& weights,
                                                const EvictionDecision& decision,
                                                const LayerCache& cache,
                                                const LayerParams& params) {
    if (decision.head_count() != weights.size())
        throw std::invalid_argument("post_eviction_output: head count mismatch");
    WeightRows hatted(weights.size());
    for (std::size_t i = 0; i < weights.size(); ++i)
        hatted[i] = renormalized_weights(weights[i], decision.retain[i]);
    return attention_output(hatted, cache, params);
}

}  // namespace adakv
