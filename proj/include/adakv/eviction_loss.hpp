// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <vector>

#include "adakv/attention.hpp"
#include "adakv/matrix.hpp"

namespace adakv {

/// ‖y - ŷ‖₁ between the full and post-eviction outputs.
inline double l1_eviction_loss(std::span<const double> y, std::span<const double> y_hat) {
    if (y.size() != y_hat.size())
        throw std::invalid_argument("l1_eviction_loss: length mismatch");
    double s = 0.0;
    for (std::size_t k = 0; k < y.size(); ++k) s += std::abs(y[k] - y_hat[k]);
    return s;
}

/// C = max over heads of the largest absolute row sum of V_i·W_i^O
/// (the induced ∞-norm of the per-position output contributions).
inline double row_norm_constant(const LayerCache& cache, const LayerParams& params) {
    if (cache.head_count() == 0) throw std::invalid_argument("row_norm_constant: empty cache");
    if (cache.head_count() != params.head_count())
        throw std::invalid_argument("row_norm_constant: head count mismatch");
    double c = 0.0;
    for (std::size_t i = 0; i < cache.head_count(); ++i) {
        const Matrix vo = matmul(cache.heads[i].values, params.heads[i].wo);  // n_i × d
        for (std::size_t r = 0; r < vo.rows(); ++r) {
            double row_sum = 0.0;
            for (double x : vo.row(r)) row_sum += std::abs(x);
            c = std::max(c, row_sum);
        }
    }
    return c;
}

/// Upper bound on the loss of a specific decision:
/// ε = 2hC - 2C Σ_i Σ_j I_i^j A_i^j, evaluated as 2C times the evicted
/// mass so that a fully retained decision yields exactly 0.
inline double epsilon_bound(const WeightRows& weights, const EvictionDecision& decision,
                            double c) {
    if (decision.head_count() != weights.size())
        throw std::invalid_argument("epsilon_bound: head count mismatch");
    if (c < 0.0) throw std::invalid_argument("epsilon_bound: negative constant");
    double evicted = 0.0;
    for (std::size_t i = 0; i < weights.size(); ++i) {
        const auto& row = weights[i];
        const auto& keep = decision.retain[i];
        if (keep.size() != row.size())
            throw std::invalid_argument("epsilon_bound: decision length mismatch");
        for (std::size_t j = 0; j < row.size(); ++j)
            if (!keep[j]) evicted += row[j];
    }
    return 2.0 * c * evicted;
}

/// Retained attention mass Σ_i Σ_j I_i^j A_i^j of a decision.
inline double retained_mass(const WeightRows& weights, const EvictionDecision& decision) {
    if (decision.head_count() != weights.size())
        throw std::invalid_argument("retained_mass: head count mismatch");
    double s = 0.0;
    for (std::size_t i = 0; i < weights.size(); ++i) {
        const auto& row = weights[i];
        const auto& keep = decision.retain[i];
        if (keep.size() != row.size())
            throw std::invalid_argument("retained_mass: decision length mismatch");
        for (std::size_t j = 0; j < row.size(); ++j)
            if (keep[j]) s += row[j];
    }
    return s;
}

namespace detail {

/// Sum of the k largest entries of a copy of `row`.
inline double topk_mass(const WeightRow& row, std::size_t k) {
    if (k > row.size()) throw std::invalid_argument("topk_mass: budget exceeds length");
    if (k == 0) return 0.0;
    WeightRow tmp(row);
    std::nth_element(tmp.begin(), tmp.begin() + static_cast<std::ptrdiff_t>(k - 1), tmp.end(),
                     std::greater<double>());
    double s = 0.0;
    for (std::size_t j = 0; j < k; ++j) s += tmp[j];
    return s;
}

}  // namespace detail

/// Tightest ε achievable under per-head budgets: the Top-k decision per
/// head keeps the largest weights, so
/// ε* = 2C (h - Σ_i topk-mass_i). Zero budgets are allowed here; they are
/// a score-level possibility even though attention itself needs a survivor.
inline double epsilon_star(const WeightRows& weights, std::span<const std::size_t> budgets,
                           double c) {
    if (budgets.size() != weights.size())
        throw std::invalid_argument("epsilon_star: budget count mismatch");
    double kept = 0.0;
    for (std::size_t i = 0; i < weights.size(); ++i)
        kept += detail::topk_mass(weights[i], budgets[i]);
    return 2.0 * c * (static_cast<double>(weights.size()) - kept);
}

/// Smallest ε* over all allocations of B among heads (≥1 each): keep the
/// B globally largest weights across the concatenation of all heads.
inline double epsilon_double_star(const WeightRows& weights, std::size_t total_budget, double c) {
    const std::size_t h = weights.size();
    if (h == 0) throw std::invalid_argument("epsilon_double_star: no heads");
    std::size_t n_total = 0;
    for (const auto& row : weights) {
        if (row.empty()) throw std::invalid_argument("epsilon_double_star: empty head");
        n_total += row.size();
    }
    if (total_budget > n_total)
        throw std::invalid_argument("epsilon_double_star: budget exceeds element count");
    WeightRow all;
    all.reserve(n_total);
    for (const auto& row : weights) all.insert(all.end(), row.begin(), row.end());
    const double kept = detail::topk_mass(all, total_budget);
    return 2.0 * c * (static_cast<double>(h) - kept);
}

/// One evaluated (decision, bound) record.
struct LossReport {
    double loss = 0.0;        // ‖y - ŷ‖₁
    double epsilon = 0.0;     // ε bound for the decision
    double epsilon_s = 0.0;   // ε* under the decision's per-head budgets
    double epsilon_ss = 0.0;  // ε** at the same total budget
    double mass = 0.0;        // retained attention mass
    double c = 0.0;
};

/// Evaluates one decision end to end against a layer: computes y, ŷ, the
/// loss and the full bound ladder. `weights` carries one row per head for
/// the query under study.
inline LossReport evaluate_decision(const WeightRows& weights, const EvictionDecision& decision,
                                    const LayerCache& cache, const LayerParams& params) {
    const double c = row_norm_constant(cache, params);
    const auto y = attention_output(weights, cache, params);
    const auto y_hat = post_eviction_output(weights, decision, cache, params);
    std::vector<std::size_t> budgets(weights.size());
    std::size_t total = 0;
    for (std::size_t i = 0; i < weights.size(); ++i) {
        budgets[i] = decision.retained_count(i);
        total += budgets[i];
    }
    LossReport rep;
    rep.c = c;
    rep.loss = l1_eviction_loss(y, y_hat);
    rep.epsilon = epsilon_bound(weights, decision, c);
    rep.epsilon_s = epsilon_star(weights, budgets, c);
    rep.epsilon_ss = epsilon_double_star(weights, total, c);
    rep.mass = retained_mass(weights, decision);
    return rep;
}

}  // namespace adakv
