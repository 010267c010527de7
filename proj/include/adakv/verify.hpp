// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "adakv/attention.hpp"
#include "adakv/budget.hpp"
#include "adakv/eviction_loss.hpp"
#include "adakv/policies.hpp"
#include "adakv/rng.hpp"
#include "adakv/serde.hpp"

namespace adakv {

/// Instance-size limits keeping every exhaustive oracle under ~10^6
/// enumerations per trial.
struct VerifyCaps {
    std::size_t bound_max_heads = 8;
    std::size_t bound_max_len = 64;
    std::size_t bound_max_head_dim = 16;
    std::size_t bound_max_embed_dim = 24;
    std::size_t topk_max_len = 10;
    std::size_t topk_max_budget = 5;
    std::size_t alloc_max_heads = 4;
    std::size_t alloc_max_len = 6;
    std::size_t alloc_max_budget = 12;

    void validate() const {
        if (bound_max_heads == 0 || bound_max_len < 2 || bound_max_head_dim == 0 ||
            bound_max_embed_dim == 0 || topk_max_len == 0 || topk_max_budget == 0 ||
            alloc_max_heads == 0 || alloc_max_len == 0)
            throw std::invalid_argument("VerifyCaps: zero cap");
        if (topk_max_len > 19)
            throw std::invalid_argument("VerifyCaps: topk enumeration too large");
        if (std::pow(static_cast<double>(alloc_max_len + 1),
                     static_cast<double>(alloc_max_heads)) > 1e6)
            throw std::invalid_argument("VerifyCaps: allocation enumeration too large");
    }
};

struct SuiteResult {
    std::string name;
    std::size_t trials = 0;
    std::size_t failures = 0;
    /// Smallest slack seen on the suite's inequality; negative means a
    /// violation. The mutation-control suite inverts the reading: it fails
    /// unless the corrupted bound is violated somewhere.
    double worst_margin = std::numeric_limits<double>::infinity();

    bool ok() const { return failures == 0; }
};

struct VerifyReport {
    std::uint64_t seed = 0;
    std::size_t trials = 0;
    std::vector<SuiteResult> suites;

    bool ok() const {
        for (const auto& s : suites)
            if (!s.ok()) return false;
        return true;
    }
};

namespace detail {

struct FullInstance {
    LayerParams params;
    LayerCache cache;
    WeightRows weights;
    std::vector<std::vector<double>> queries;
    EvictionDecision decision;
};

inline FullInstance random_full_instance(Rng& rng, std::size_t max_heads, std::size_t max_len,
                                         std::size_t max_head_dim, std::size_t max_embed_dim,
                                         bool full_retention = false) {
    FullInstance inst;
    const std::size_t h = 1 + rng.uniform_index(max_heads);
    const std::size_t d_h = 1 + rng.uniform_index(max_head_dim);
    const std::size_t d = 1 + rng.uniform_index(max_embed_dim);
    const double sp = 1.0 / std::sqrt(static_cast<double>(d));
    const double so = 1.0 / std::sqrt(static_cast<double>(d_h));
    inst.params.heads.resize(h);
    inst.cache.heads.resize(h);
    inst.weights.resize(h);
    inst.queries.resize(h);
    inst.decision.retain.resize(h);
    std::vector<double> x(d);
    for (double& v : x) v = rng.normal();
    for (std::size_t i = 0; i < h; ++i) {
        auto gauss = [&](std::size_t r, std::size_t c, double sigma) {
            Matrix m(r, c);
            for (std::size_t a = 0; a < r; ++a)
                for (std::size_t b = 0; b < c; ++b) m(a, b) = sigma * rng.normal();
            return m;
        };
        inst.params.heads[i] = {gauss(d, d_h, sp), gauss(d, d_h, sp), gauss(d, d_h, sp),
                                gauss(d_h, d, so)};
        const std::size_t n = 2 + rng.uniform_index(max_len - 1);
        inst.cache.heads[i] = {gauss(n, d_h, 1.0), gauss(n, d_h, 1.0)};
        inst.queries[i] = row_times(x, inst.params.heads[i].wq);
        Matrix qm(1, d_h);
        for (std::size_t t = 0; t < d_h; ++t) qm(0, t) = inst.queries[i][t];
        const Matrix a = attention_weights(qm, inst.cache.heads[i].keys, true);
        inst.weights[i].assign(a.row(0).begin(), a.row(0).end());
        auto& keep = inst.decision.retain[i];
        keep.assign(n, 0);
        bool any = false;
        for (std::size_t j = 0; j < n; ++j) {
            keep[j] = full_retention || rng.uniform01() < 0.5 ? 1 : 0;
            any = any || keep[j];
        }
        if (!any) keep[rng.uniform_index(n)] = 1;
    }
    return inst;
}

/// Random normalized rows, alternating diffuse and spiky shapes.
inline WeightRows random_weight_rows(Rng& rng, std::size_t h,
                                     std::vector<std::size_t>& lengths_out,
                                     std::size_t max_len) {
    WeightRows rows(h);
    lengths_out.resize(h);
    for (std::size_t i = 0; i < h; ++i) {
        const std::size_t n = 1 + rng.uniform_index(max_len);
        lengths_out[i] = n;
        rows[i].resize(n);
        const bool spiky = rng.uniform01() < 0.5;
        double sum = 0.0;
        for (double& v : rows[i]) {
            v = spiky ? std::exp(3.0 * rng.normal()) : rng.exponential();
            sum += v;
        }
        for (double& v : rows[i]) v /= sum;
    }
    return rows;
}

/// Per-head prefix sums of the sorted weights: best[k] = largest k-mass.
inline std::vector<double> top_prefix_sums(const WeightRow& row) {
    WeightRow sorted(row);
    std::sort(sorted.begin(), sorted.end(), std::greater<double>());
    std::vector<double> prefix(sorted.size() + 1, 0.0);
    for (std::size_t k = 0; k < sorted.size(); ++k) prefix[k + 1] = prefix[k] + sorted[k];
    return prefix;
}

inline constexpr std::uint64_t kVerifyStream = 0xad4b;

}  // namespace detail

/// Empirical confirmation of the bound/optimality theory on randomized
/// instances with brute-force oracles, plus a mutation self-test proving
/// the harness can detect a broken bound.
inline VerifyReport verify_theorems(std::uint64_t seed, std::size_t trials,
                                    const VerifyCaps& caps = {}) {
    caps.validate();
    VerifyReport report;
    report.seed = seed;
    report.trials = trials;

    const auto finish = [&](SuiteResult s) {
        if (s.trials == 0) s.worst_margin = 0.0;
        report.suites.push_back(std::move(s));
    };

    // Bound soundness: measured loss never exceeds the decision's bound.
    {
        SuiteResult suite{"bound_soundness", trials, 0,
                          std::numeric_limits<double>::infinity()};
        Rng rng(mix64(mix64(seed, detail::kVerifyStream), 1));
        for (std::size_t t = 0; t < trials; ++t) {
            const auto inst = detail::random_full_instance(
                rng, caps.bound_max_heads, caps.bound_max_len, caps.bound_max_head_dim,
                caps.bound_max_embed_dim);
            const double c = row_norm_constant(inst.cache, inst.params);
            const auto y = attention_output(inst.weights, inst.cache, inst.params);
            const auto y_hat =
                post_eviction_output(inst.weights, inst.decision, inst.cache, inst.params);
            const double loss = l1_eviction_loss(y, y_hat);
            const double eps = epsilon_bound(inst.weights, inst.decision, c);
            const double margin = eps + 1e-9 * std::max(1.0, eps) - loss;
            suite.worst_margin = std::min(suite.worst_margin, eps - loss);
            if (margin < 0.0) ++suite.failures;
        }
        finish(std::move(suite));
    }

    // Top-k optimality: per-head exhaustive subsets cannot beat Top-k.
    {
        const std::size_t n_trials = (trials + 4) / 5;
        SuiteResult suite{"topk_optimality", n_trials, 0,
                          std::numeric_limits<double>::infinity()};
        Rng rng(mix64(mix64(seed, detail::kVerifyStream), 2));
        for (std::size_t t = 0; t < n_trials; ++t) {
            const std::size_t h = 1 + rng.uniform_index(3);
            std::vector<std::size_t> lengths;
            const auto rows = detail::random_weight_rows(rng, h, lengths, caps.topk_max_len);
            EvictionDecision topk;
            topk.retain.resize(h);
            std::vector<std::size_t> budgets(h);
            double best_mass = 0.0;
            for (std::size_t i = 0; i < h; ++i) {
                const std::size_t n = lengths[i];
                budgets[i] = 1 + rng.uniform_index(std::min(caps.topk_max_budget, n));
                topk.retain[i] = topk_decision(rows[i], budgets[i]);
                double head_best = 0.0;
                for (std::uint32_t mask = 0; mask < (1u << n); ++mask) {
                    if (std::popcount(mask) != static_cast<int>(budgets[i])) continue;
                    double kept = 0.0;
                    for (std::size_t j = 0; j < n; ++j)
                        if (mask & (1u << j)) kept += rows[i][j];
                    head_best = std::max(head_best, kept);
                }
                best_mass += head_best;
            }
            const double c = 0.5 + rng.uniform01();
            const double eps_topk = epsilon_bound(rows, topk, c);
            const double eps_min = 2.0 * c * (static_cast<double>(h) - best_mass);
            const double margin = 1e-12 - std::abs(eps_topk - eps_min);
            suite.worst_margin = std::min(suite.worst_margin, margin);
            if (margin < 0.0) ++suite.failures;
        }
        finish(std::move(suite));
    }

    // Allocation optimality: the global Top-B count attains the enumerated
    // minimum of ε* over all compositions of the budget.
    {
        const std::size_t n_trials = (trials + 4) / 5;
        SuiteResult suite{"allocation_optimality", n_trials, 0,
                          std::numeric_limits<double>::infinity()};
        Rng rng(mix64(mix64(seed, detail::kVerifyStream), 3));
        for (std::size_t t = 0; t < n_trials; ++t) {
            const std::size_t h = 1 + rng.uniform_index(caps.alloc_max_heads);
            std::vector<std::size_t> lengths;
            const auto rows = detail::random_weight_rows(rng, h, lengths, caps.alloc_max_len);
            std::size_t n_total = 0;
            for (std::size_t n : lengths) n_total += n;
            const std::size_t budget =
                1 + rng.uniform_index(std::min(caps.alloc_max_budget, n_total));
            std::vector<std::vector<double>> prefix(h);
            for (std::size_t i = 0; i < h; ++i) prefix[i] = detail::top_prefix_sums(rows[i]);
            double best_mass = -1.0;
            std::vector<std::size_t> comp(h, 0), best_comp(h, 0);
            const auto enumerate = [&](auto&& self, std::size_t i, std::size_t left,
                                       double mass) -> void {
                if (i + 1 == h) {
                    if (left > lengths[i]) return;
                    comp[i] = left;
                    if (mass + prefix[i][left] > best_mass) {
                        best_mass = mass + prefix[i][left];
                        best_comp = comp;
                    }
                    return;
                }
                for (std::size_t b = 0; b <= std::min(left, lengths[i]); ++b) {
                    comp[i] = b;
                    self(self, i + 1, left - b, mass + prefix[i][b]);
                }
            };
            enumerate(enumerate, 0, budget, 0.0);
            const double c = 0.5 + rng.uniform01();
            const double eps_enum = epsilon_star(rows, best_comp, c);
            const double eps_ss = epsilon_double_star(rows, budget, c);
            const auto alg1 = adaptive_allocation(rows, budget);
            const double eps_alg1 = epsilon_star(rows, alg1.per_head, c);
            const double margin =
                1e-12 - std::max(std::abs(eps_enum - eps_ss), std::abs(eps_alg1 - eps_ss));
            suite.worst_margin = std::min(suite.worst_margin, margin);
            if (margin < 0.0) ++suite.failures;
        }
        finish(std::move(suite));
    }

    // Renormalization identity: masked softmax equals renormalized weights.
    {
        SuiteResult suite{"renormalization_identity", trials, 0,
                          std::numeric_limits<double>::infinity()};
        Rng rng(mix64(mix64(seed, detail::kVerifyStream), 4));
        for (std::size_t t = 0; t < trials; ++t) {
            const auto inst = detail::random_full_instance(rng, 4, 16, 8, 12);
            WeightRows masked(inst.weights.size());
            for (std::size_t i = 0; i < inst.weights.size(); ++i)
                masked[i] = masked_attention_weights(inst.queries[i], inst.cache.heads[i].keys,
                                                     inst.decision.retain[i]);
            const auto y_renorm =
                post_eviction_output(inst.weights, inst.decision, inst.cache, inst.params);
            const auto y_masked = attention_output(masked, inst.cache, inst.params);
            double diff = 0.0;
            for (std::size_t k = 0; k < y_renorm.size(); ++k)
                diff = std::max(diff, std::abs(y_renorm[k] - y_masked[k]));
            const double margin = 1e-9 - diff;
            suite.worst_margin = std::min(suite.worst_margin, margin);
            if (margin < 0.0) ++suite.failures;
        }
        finish(std::move(suite));
    }

    // Retained-mass dominance of the adaptive allocation over uniform.
    {
        SuiteResult suite{"mass_dominance", trials, 0,
                          std::numeric_limits<double>::infinity()};
        Rng rng(mix64(mix64(seed, detail::kVerifyStream), 5));
        for (std::size_t t = 0; t < trials; ++t) {
            const std::size_t h = 1 + rng.uniform_index(6);
            std::vector<std::size_t> lengths;
            const auto rows = detail::random_weight_rows(rng, h, lengths, 24);
            std::size_t n_total = 0;
            for (std::size_t n : lengths) n_total += n;
            const std::size_t budget = 1 + rng.uniform_index(n_total);
            const auto ada = adaptive_allocation(rows, budget);
            const auto uni = uniform_allocation(budget, h, lengths);
            EvictionDecision ada_d, uni_d;
            ada_d.retain.resize(h);
            uni_d.retain.resize(h);
            for (std::size_t i = 0; i < h; ++i) {
                ada_d.retain[i] = topk_decision(rows[i], ada.per_head[i]);
                uni_d.retain[i] = topk_decision(rows[i], uni.per_head[i]);
            }
            const double margin =
                retained_mass(rows, ada_d) - retained_mass(rows, uni_d) + 1e-12;
            suite.worst_margin = std::min(suite.worst_margin, margin);
            if (margin < 0.0) ++suite.failures;
        }
        finish(std::move(suite));
    }

    // ε* never increases when any head's budget grows.
    {
        const std::size_t n_trials = (trials + 4) / 5;
        SuiteResult suite{"bound_monotonicity", n_trials, 0,
                          std::numeric_limits<double>::infinity()};
        Rng rng(mix64(mix64(seed, detail::kVerifyStream), 6));
        for (std::size_t t = 0; t < n_trials; ++t) {
            const std::size_t h = 1 + rng.uniform_index(4);
            std::vector<std::size_t> lengths;
            const auto rows = detail::random_weight_rows(rng, h, lengths, 12);
            std::vector<std::size_t> budgets(h);
            std::size_t total = 0;
            for (std::size_t i = 0; i < h; ++i) {
                budgets[i] = rng.uniform_index(lengths[i] + 1);
                total += budgets[i];
            }
            const double c = 0.5 + rng.uniform01();
            const double base = epsilon_star(rows, budgets, c);
            double margin = std::numeric_limits<double>::infinity();
            for (std::size_t i = 0; i < h; ++i) {
                if (budgets[i] == lengths[i]) continue;
                auto grown = budgets;
                ++grown[i];
                margin = std::min(margin, base - epsilon_star(rows, grown, c) + 1e-12);
            }
            std::size_t n_total = 0;
            for (std::size_t n : lengths) n_total += n;
            if (total < n_total)
                margin = std::min(margin, epsilon_double_star(rows, total, c) -
                                              epsilon_double_star(rows, total + 1, c) + 1e-12);
            if (margin == std::numeric_limits<double>::infinity()) margin = 0.0;
            suite.worst_margin = std::min(suite.worst_margin, margin);
            if (margin < 0.0) ++suite.failures;
        }
        finish(std::move(suite));
    }

    // Mutation control: a deliberately corrupted bound (ε − 0.1) must be
    // caught; zero observed violations means the checks cannot fail.
    {
        const std::size_t n_trials = std::min<std::size_t>(trials, 50);
        SuiteResult suite{"bound_mutation_control", n_trials, 0,
                          std::numeric_limits<double>::infinity()};
        Rng rng(mix64(mix64(seed, detail::kVerifyStream), 7));
        std::size_t violations = 0;
        for (std::size_t t = 0; t < n_trials; ++t) {
            const auto inst =
                detail::random_full_instance(rng, 4, 16, 8, 12, /*full_retention=*/t == 0);
            const double c = row_norm_constant(inst.cache, inst.params);
            const auto y = attention_output(inst.weights, inst.cache, inst.params);
            const auto y_hat =
                post_eviction_output(inst.weights, inst.decision, inst.cache, inst.params);
            const double loss = l1_eviction_loss(y, y_hat);
            const double corrupted = epsilon_bound(inst.weights, inst.decision, c) - 0.1;
            suite.worst_margin = std::min(suite.worst_margin, corrupted - loss);
            if (loss > corrupted) ++violations;
        }
        if (n_trials > 0 && violations == 0) suite.failures = 1;
        finish(std::move(suite));
    }

    return report;
}

/// Stable text rendering shared by the CLI and the determinism checks.
inline std::string format_verify_report(const VerifyReport& report) {
    std::ostringstream os;
    os << "seed " << report.seed << "  trials " << report.trials << '\n';
    os << std::left << std::setw(28) << "suite" << std::right << std::setw(8) << "trials"
       << std::setw(10) << "failures" << "  worst_margin" << '\n';
    for (const auto& s : report.suites) {
        os << std::left << std::setw(28) << s.name << std::right << std::setw(8) << s.trials
           << std::setw(10) << s.failures << "  " << serde::to_chars17(s.worst_margin) << '\n';
    }
    os << "verification: " << (report.ok() ? "PASS" : "FAIL") << '\n';
    return os.str();
}

}  // namespace adakv
