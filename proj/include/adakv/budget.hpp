// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numeric>
#include <span>
#include <stdexcept>
#include <vector>

#include "adakv/attention.hpp"

namespace adakv {

/// Deterministic tie resolution for equal weights.
enum class TieBreak {
    by_head_then_position,
};

struct BudgetAllocation {
    std::vector<std::size_t> per_head;
    std::size_t total = 0;

    std::size_t head_count() const { return per_head.size(); }
};

struct AllocationConfig {
    double alpha = 0.2;
    TieBreak tie_break = TieBreak::by_head_then_position;
};

namespace detail {

/// Integerizes real quotas to counts summing exactly to `total` under
/// per-head caps. Floors first, then hands out the remaining units one at
/// a time to the head with the largest outstanding deficit (quota minus
/// assigned), ties to the lowest index, skipping heads at cap. If the
/// floors oversubscribe `total`, units are taken back one at a time from
/// the head with the largest surplus instead, ties again to the lowest
/// index. With equal quotas this reduces to the lowest-index-first
/// remainder rule.
inline std::vector<std::size_t> apportion(const std::vector<double>& quotas, std::size_t total,
                                          std::span<const std::size_t> caps) {
    const std::size_t h = quotas.size();
    if (caps.size() != h) throw std::invalid_argument("apportion: caps length mismatch");
    std::size_t cap_sum = 0;
    for (std::size_t c : caps)
        cap_sum = (cap_sum > std::numeric_limits<std::size_t>::max() - c)
                      ? std::numeric_limits<std::size_t>::max()
                      : cap_sum + c;
    if (total > cap_sum) throw std::invalid_argument("apportion: total exceeds capacity");

    std::vector<std::size_t> out(h);
    std::size_t assigned = 0;
    for (std::size_t i = 0; i < h; ++i) {
        if (!(quotas[i] >= 0.0)) throw std::invalid_argument("apportion: negative quota");
        const auto base = static_cast<std::size_t>(std::floor(quotas[i]));
        out[i] = std::min(base, caps[i]);
        assigned += out[i];
    }
    while (assigned < total) {
        std::size_t pick = h;
        double best = -std::numeric_limits<double>::infinity();
        for (std::size_t i = 0; i < h; ++i) {
            if (out[i] >= caps[i]) continue;
            const double deficit = quotas[i] - static_cast<double>(out[i]);
            if (deficit > best) {
                best = deficit;
                pick = i;
            }
        }
        ++out[pick];
        ++assigned;
    }
    while (assigned > total) {
        std::size_t pick = h;
        double best = -std::numeric_limits<double>::infinity();
        for (std::size_t i = 0; i < h; ++i) {
            if (out[i] == 0) continue;
            const double surplus = static_cast<double>(out[i]) - quotas[i];
            if (surplus > best) {
                best = surplus;
                pick = i;
            }
        }
        --out[pick];
        --assigned;
    }
    return out;
}

inline std::vector<std::size_t> ample_caps(std::size_t h) {
    return std::vector<std::size_t>(h, std::numeric_limits<std::size_t>::max() / 2);
}

}  // namespace detail

/// Even split: ⌊total/h⌋ each, remainder to the lowest-index heads, cap
/// overflow spilled to heads with spare capacity.
inline BudgetAllocation uniform_allocation(std::size_t total, std::size_t h,
                                           std::span<const std::size_t> caps) {
    if (h == 0) throw std::invalid_argument("uniform_allocation: no heads");
    const std::vector<double> quotas(h, static_cast<double>(total) / static_cast<double>(h));
    return {detail::apportion(quotas, total, caps), total};
}

inline BudgetAllocation uniform_allocation(std::size_t total, std::size_t h) {
    const auto caps = detail::ample_caps(h);
    return uniform_allocation(total, h, caps);
}

/// Algorithm-1 allocation: pick the `total` largest weights across the
/// concatenation of all heads and count how many land in each head. Ties on
/// the weight value resolve by ascending (head, position).
inline BudgetAllocation adaptive_allocation(const WeightRows& a, std::size_t total,
                                            TieBreak = TieBreak::by_head_then_position) {
    const std::size_t h = a.size();
    if (h == 0) throw std::invalid_argument("adaptive_allocation: no heads");
    struct Entry {
        double w;
        std::size_t head;
        std::size_t pos;
    };
    std::vector<Entry> entries;
    for (std::size_t i = 0; i < h; ++i)
        for (std::size_t j = 0; j < a[i].size(); ++j) entries.push_back({a[i][j], i, j});
    if (total > entries.size())
        throw std::invalid_argument("adaptive_allocation: total exceeds element count");
    std::sort(entries.begin(), entries.end(), [](const Entry& x, const Entry& y) {
        if (x.w != y.w) return x.w > y.w;
        if (x.head != y.head) return x.head < y.head;
        return x.pos < y.pos;
    });
    BudgetAllocation alloc{std::vector<std::size_t>(h, 0), total};
    for (std::size_t r = 0; r < total; ++r) ++alloc.per_head[entries[r].head];
    return alloc;
}

/// α-blend toward the uniform share, re-integerized so the sum stays
/// exactly `total`. alpha=1 returns the adaptive counts, alpha=0 the
/// uniform split.
inline BudgetAllocation safeguard_blend(const BudgetAllocation& adaptive, std::size_t total,
                                        std::size_t h, double alpha,
                                        std::span<const std::size_t> caps) {
    if (adaptive.per_head.size() != h)
        throw std::invalid_argument("safeguard_blend: head count mismatch");
    if (adaptive.total != total) throw std::invalid_argument("safeguard_blend: total mismatch");
    if (!(alpha >= 0.0 && alpha <= 1.0))
        throw std::invalid_argument("safeguard_blend: alpha outside [0,1]");
    const double share = static_cast<double>(total) / static_cast<double>(h);
    std::vector<double> quotas(h);
    for (std::size_t i = 0; i < h; ++i)
        quotas[i] = alpha * static_cast<double>(adaptive.per_head[i]) + (1.0 - alpha) * share;
    return {detail::apportion(quotas, total, caps), total};
}

inline BudgetAllocation safeguard_blend(const BudgetAllocation& adaptive, std::size_t total,
                                        std::size_t h, double alpha) {
    const auto caps = detail::ample_caps(h);
    return safeguard_blend(adaptive, total, h, alpha, caps);
}

/// Linear pyramid schedule: layer l of L gets a raw quota of
/// avg·(βmax − (βmax−βmin)·l/(L−1)), rescaled and integerized by largest
/// remainder so the total is exactly L·avg. Shallower layers get more.
inline std::vector<std::size_t> pyramid_layer_budgets(std::size_t per_layer_avg,
                                                      std::size_t num_layers, double beta_max,
                                                      double beta_min) {
    if (num_layers == 0) throw std::invalid_argument("pyramid_layer_budgets: zero layers");
    if (!(beta_min > 0.0) || beta_max < beta_min)
        throw std::invalid_argument("pyramid_layer_budgets: invalid betas");
    if (num_layers == 1) return {per_layer_avg};
    std::vector<double> quotas(num_layers);
    const double avg = static_cast<double>(per_layer_avg);
    double quota_sum = 0.0;
    for (std::size_t l = 0; l < num_layers; ++l) {
        const double t = static_cast<double>(l) / static_cast<double>(num_layers - 1);
        quotas[l] = avg * (beta_max - (beta_max - beta_min) * t);
        quota_sum += quotas[l];
    }
    const std::size_t total = per_layer_avg * num_layers;
    if (quota_sum > 0.0) {
        const double scale = static_cast<double>(total) / quota_sum;
        for (double& q : quotas) q *= scale;
    }
    const auto caps = detail::ample_caps(num_layers);
    return detail::apportion(quotas, total, caps);
}

}  // namespace adakv
