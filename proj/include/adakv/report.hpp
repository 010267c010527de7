// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <atomic>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <optional>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "adakv/attention.hpp"
#include "adakv/budget.hpp"
#include "adakv/eviction_loss.hpp"
#include "adakv/policies.hpp"
#include "adakv/serde.hpp"
#include "adakv/trace.hpp"

namespace adakv {

/// One (sample, budget fraction, policy) evaluation. Loss, ε and retained
/// mass are measured on the true attention weights of the final token;
/// ε*/ε** are score-level quantities over the vectors the decision actually
/// ranked (observation scores for full traces, the weight rows themselves
/// for weights_only ones) with C = 1. Multi-layer traces sum over layers.
struct ComparisonRow {
    std::size_t sample = 0;
    double budget_fraction = 0.0;
    std::size_t budget = 0;
    std::string policy;
    bool adaptive = false;
    std::optional<double> loss;
    double epsilon = 0.0;
    double epsilon_star = 0.0;
    double epsilon_double_star = 0.0;
    double retained_mass = 0.0;
    std::vector<std::size_t> allocation;
};

struct AggregateRow {
    double budget_fraction = 0.0;
    std::string adaptive_policy;
    std::string baseline_policy;
    std::size_t samples = 0;
    std::size_t adaptive_wins = 0;
    double win_fraction = 0.0;
};

struct ComparisonReport {
    std::string config_fingerprint;
    std::uint64_t seed = 0;
    std::string trace_kind;
    std::vector<ComparisonRow> rows;
    std::vector<AggregateRow> aggregates;
};

struct CompareOptions {
    std::size_t workers = 1;
    /// Loss columns need a full trace; forcing them on a weights_only one
    /// is a capability error.
    std::optional<bool> with_loss;
};

namespace detail {

inline std::string config_fingerprint(const Trace& trace,
                                      const std::vector<double>& fractions,
                                      const std::vector<PolicyConfig>& policies) {
    serde::Fnv1a64 f;
    f.update_u64(trace.seed);
    const std::string profile = profile_to_json(trace.profile).dump();
    f.update(profile.data(), profile.size());
    for (double x : fractions) f.update_f64(x);
    for (const auto& p : policies) {
        const std::string kind = to_string(p.kind);
        f.update(kind.data(), kind.size());
        f.update_u64(p.window_size);
        f.update_u64(p.pool_kernel);
        f.update_f64(p.alpha);
        f.update_u64(p.sink_tokens);
        f.update_u64(p.gqa_group_size);
        f.update_u64(p.scale ? 1 : 0);
    }
    return serde::hex64(f.value());
}

/// True single-row weights of the final window token over the full cache
/// (outside positions then window positions), plus everything needed to
/// score one decision against them.
struct SampleContext {
    LayerCache full_cache;
    WeightRows true_weights;
    std::vector<double> y;
    double c = 0.0;
    std::vector<std::vector<double>> queries;
};

inline SampleContext make_sample_context(const DerivedLayer& dl, const LayerParams& params) {
    SampleContext ctx;
    const std::size_t h = params.head_count();
    ctx.full_cache.heads.resize(h);
    ctx.true_weights.resize(h);
    ctx.queries.resize(h);
    const std::size_t m = dl.window_embeddings.rows();
    const auto last = dl.window_embeddings.row(m - 1);
    for (std::size_t i = 0; i < h; ++i) {
        Matrix keys = dl.outside.heads[i].keys;
        Matrix values = dl.outside.heads[i].values;
        for (std::size_t r = 0; r < m; ++r) {
            keys.append_row(dl.window.heads[i].keys.row(r));
            values.append_row(dl.window.heads[i].values.row(r));
        }
        ctx.full_cache.heads[i] = {std::move(keys), std::move(values)};
        ctx.queries[i] = row_times(last, params.heads[i].wq);
        Matrix q(1, ctx.queries[i].size());
        for (std::size_t t = 0; t < ctx.queries[i].size(); ++t) q(0, t) = ctx.queries[i][t];
        const Matrix a = attention_weights(q, ctx.full_cache.heads[i].keys, true);
        ctx.true_weights[i].assign(a.row(0).begin(), a.row(0).end());
    }
    ctx.c = row_norm_constant(ctx.full_cache, params);
    ctx.y = attention_output(ctx.true_weights, ctx.full_cache, params);
    return ctx;
}

/// ŷ computed the honest way: fresh softmax over the compacted cache.
inline std::vector<double> output_from_retained(const SampleContext& ctx,
                                                const LayerCache& retained,
                                                const LayerParams& params) {
    WeightRows weights(params.head_count());
    for (std::size_t i = 0; i < params.head_count(); ++i) {
        Matrix q(1, ctx.queries[i].size());
        for (std::size_t t = 0; t < ctx.queries[i].size(); ++t) q(0, t) = ctx.queries[i][t];
        const Matrix a = attention_weights(q, retained.heads[i].keys, true);
        weights[i].assign(a.row(0).begin(), a.row(0).end());
    }
    return attention_output(weights, retained, params);
}

inline EvictionDecision with_window_retained(const EvictionDecision& outside,
                                             std::size_t window) {
    EvictionDecision full;
    full.retain.resize(outside.head_count());
    for (std::size_t i = 0; i < outside.head_count(); ++i) {
        full.retain[i] = outside.retain[i];
        full.retain[i].insert(full.retain[i].end(), window, std::uint8_t{1});
    }
    return full;
}

}  // namespace detail

/// Runs every (sample × budget fraction × policy) cell of the comparison.
/// Row order and all values are independent of the worker count.
inline ComparisonReport run_comparison(const Trace& trace, const std::vector<double>& fractions,
                                       const std::vector<PolicyConfig>& policies,
                                       const CompareOptions& options = {}) {
    trace.profile.validate();
    if (fractions.empty()) throw std::invalid_argument("run_comparison: no budget fractions");
    for (double f : fractions)
        if (!(f > 0.0 && f <= 1.0))
            throw std::invalid_argument("run_comparison: budget fraction outside (0,1]");
    if (policies.empty()) throw std::invalid_argument("run_comparison: no policies");
    for (const auto& p : policies) p.validate();
    const bool with_loss = options.with_loss.value_or(trace.kind() == TraceKind::full);
    if (with_loss && trace.kind() != TraceKind::full)
        throw std::invalid_argument(
            "run_comparison: loss columns need a full trace; this one is weights_only");

    const auto& profile = trace.profile;
    const std::size_t samples = trace.sample_count();
    const std::size_t n_fr = fractions.size();
    const std::size_t n_po = policies.size();

    ComparisonReport report;
    report.seed = trace.seed;
    report.trace_kind = to_string(trace.kind());
    report.config_fingerprint = detail::config_fingerprint(trace, fractions, policies);
    report.rows.resize(samples * n_fr * n_po);

    if (trace.kind() == TraceKind::full)
        for (const auto& p : policies)
            if (p.gqa_group_size != profile.gqa_group_size)
                throw std::invalid_argument(
                    "run_comparison: policy group size contradicts the trace profile");

    // Absolute per-layer budgets per fraction (unique elements, window
    // included for full traces); pyramid kinds redistribute across layers.
    const std::size_t unique_total =
        trace.kind() == TraceKind::full
            ? profile.num_groups() * (profile.n + profile.window_size)
            : profile.h * profile.n;
    std::vector<std::size_t> layer_budget(n_fr);
    std::vector<std::vector<std::size_t>> pyramid_budget(n_fr);
    for (std::size_t fi = 0; fi < n_fr; ++fi) {
        layer_budget[fi] = static_cast<std::size_t>(
            std::ceil(fractions[fi] * static_cast<double>(unique_total)));
        layer_budget[fi] = std::min(layer_budget[fi], unique_total);
        pyramid_budget[fi] =
            pyramid_layer_budgets(layer_budget[fi], profile.layers, 1.5, 0.5);
    }

    const auto eval_sample = [&](std::size_t s) {
        if (trace.kind() == TraceKind::full) {
            std::vector<detail::SampleContext> ctx;
            std::vector<DerivedLayer> derived;
            ctx.reserve(profile.layers);
            derived.reserve(profile.layers);
            for (std::size_t l = 0; l < profile.layers; ++l) {
                derived.push_back(derive_layer(trace, s, l));
                ctx.push_back(detail::make_sample_context(derived[l], trace.params[l]));
            }
            for (std::size_t fi = 0; fi < n_fr; ++fi)
                for (std::size_t pi = 0; pi < n_po; ++pi) {
                    const auto& policy = policies[pi];
                    ComparisonRow row;
                    row.sample = s;
                    row.budget_fraction = fractions[fi];
                    row.budget = layer_budget[fi];
                    row.policy = to_string(policy.kind);
                    row.adaptive = is_adaptive(policy.kind);
                    double loss_sum = 0.0;
                    for (std::size_t l = 0; l < profile.layers; ++l) {
                        const std::size_t budget = is_pyramid(policy.kind)
                                                       ? pyramid_budget[fi][l]
                                                       : layer_budget[fi];
                        auto res = evict_layer(derived[l].outside, derived[l].window,
                                               derived[l].window_embeddings, trace.params[l],
                                               budget, policy);
                        const auto full_decision = detail::with_window_retained(
                            res.decision, profile.window_size);
                        const auto& c = ctx[l];
                        loss_sum += l1_eviction_loss(
                            c.y, detail::output_from_retained(c, res.retained, trace.params[l]));
                        row.epsilon += epsilon_bound(c.true_weights, full_decision, c.c);
                        row.retained_mass += retained_mass(c.true_weights, full_decision);
                        row.epsilon_star +=
                            epsilon_star(res.scores, res.allocation.per_head, 1.0);
                        row.epsilon_double_star +=
                            epsilon_double_star(res.scores, res.allocation.total, 1.0);
                        if (row.allocation.empty())
                            row.allocation = res.allocation.per_head;
                        else
                            for (std::size_t u = 0; u < row.allocation.size(); ++u)
                                row.allocation[u] += res.allocation.per_head[u];
                    }
                    row.loss = with_loss ? std::optional<double>(loss_sum) : std::nullopt;
                    report.rows[(s * n_fr + fi) * n_po + pi] = std::move(row);
                }
            return;
        }

        const auto& weights = trace.weight_samples[s];
        for (std::size_t fi = 0; fi < n_fr; ++fi)
            for (std::size_t pi = 0; pi < n_po; ++pi) {
                const auto& policy = policies[pi];
                ComparisonRow row;
                row.sample = s;
                row.budget_fraction = fractions[fi];
                row.budget = layer_budget[fi];
                row.policy = to_string(policy.kind);
                row.adaptive = is_adaptive(policy.kind);
                EvictionDecision decision;
                BudgetAllocation alloc;
                if (policy.kind == PolicyKind::streaming_llm) {
                    std::vector<std::size_t> caps(weights.size());
                    for (std::size_t i = 0; i < weights.size(); ++i) caps[i] = weights[i].size();
                    alloc = uniform_allocation(layer_budget[fi], weights.size(), caps);
                    decision.retain.resize(weights.size());
                    for (std::size_t i = 0; i < weights.size(); ++i) {
                        const std::size_t b = alloc.per_head[i];
                        const std::size_t sink = std::min(policy.sink_tokens, b);
                        decision.retain[i] =
                            streaming_llm_decision(weights[i].size(), sink, b - sink);
                    }
                } else {
                    auto [d, a] = evict_rows(weights, layer_budget[fi],
                                             is_adaptive(policy.kind), policy.alpha);
                    decision = std::move(d);
                    alloc = std::move(a);
                }
                row.epsilon = epsilon_bound(weights, decision, 1.0);
                row.retained_mass = retained_mass(weights, decision);
                row.epsilon_star = epsilon_star(weights, alloc.per_head, 1.0);
                row.epsilon_double_star = epsilon_double_star(weights, alloc.total, 1.0);
                row.allocation = alloc.per_head;
                report.rows[(s * n_fr + fi) * n_po + pi] = std::move(row);
            }
    };

    const std::size_t workers =
        std::max<std::size_t>(1, std::min(options.workers, std::max<std::size_t>(samples, 1)));
    if (workers == 1) {
        for (std::size_t s = 0; s < samples; ++s) eval_sample(s);
    } else {
        std::atomic<std::size_t> next{0};
        std::vector<std::thread> pool;
        pool.reserve(workers);
        for (std::size_t w = 0; w < workers; ++w)
            pool.emplace_back([&] {
                for (std::size_t s = next.fetch_add(1); s < samples; s = next.fetch_add(1))
                    eval_sample(s);
            });
        for (auto& t : pool) t.join();
    }

    // Adaptive-vs-baseline win fractions per budget fraction, from the
    // already-ordered row table.
    const std::pair<PolicyKind, PolicyKind> pairs[] = {
        {PolicyKind::ada_snapkv, PolicyKind::snapkv},
        {PolicyKind::ada_pyramid, PolicyKind::pyramid}};
    for (const auto& [ada, base] : pairs) {
        std::size_t ada_pi = n_po, base_pi = n_po;
        for (std::size_t pi = 0; pi < n_po; ++pi) {
            if (policies[pi].kind == ada) ada_pi = pi;
            if (policies[pi].kind == base) base_pi = pi;
        }
        if (ada_pi == n_po || base_pi == n_po) continue;
        for (std::size_t fi = 0; fi < n_fr; ++fi) {
            AggregateRow agg;
            agg.budget_fraction = fractions[fi];
            agg.adaptive_policy = to_string(ada);
            agg.baseline_policy = to_string(base);
            agg.samples = samples;
            for (std::size_t s = 0; s < samples; ++s) {
                const auto& ra = report.rows[(s * n_fr + fi) * n_po + ada_pi];
                const auto& rb = report.rows[(s * n_fr + fi) * n_po + base_pi];
                const double va = ra.loss ? *ra.loss : ra.epsilon;
                const double vb = rb.loss ? *rb.loss : rb.epsilon;
                if (va < vb) ++agg.adaptive_wins;
            }
            agg.win_fraction = samples == 0 ? 0.0
                                            : static_cast<double>(agg.adaptive_wins) /
                                                  static_cast<double>(samples);
            report.aggregates.push_back(std::move(agg));
        }
    }
    return report;
}

namespace detail {

inline std::string allocation_field(const std::vector<std::size_t>& alloc) {
    std::string s;
    for (std::size_t i = 0; i < alloc.size(); ++i) {
        if (i) s += '|';
        s += std::to_string(alloc[i]);
    }
    return s;
}

}  // namespace detail

enum class ReportFormat { csv, json };

inline ReportFormat report_format_from_string(const std::string& s) {
    if (s == "csv") return ReportFormat::csv;
    if (s == "json") return ReportFormat::json;
    throw std::invalid_argument("unknown report format: " + s);
}

inline void emit_report(const ComparisonReport& report, ReportFormat format, std::ostream& os) {
    using serde::to_chars17;
    if (format == ReportFormat::csv) {
        os << "sample,budget_fraction,budget,policy,adaptive,loss,epsilon,epsilon_star,"
              "epsilon_double_star,retained_mass,allocation,fingerprint,seed\n";
        for (const auto& r : report.rows) {
            os << r.sample << ',' << to_chars17(r.budget_fraction) << ',' << r.budget << ','
               << r.policy << ',' << (r.adaptive ? 1 : 0) << ','
               << (r.loss ? to_chars17(*r.loss) : std::string{}) << ',' << to_chars17(r.epsilon)
               << ',' << to_chars17(r.epsilon_star) << ',' << to_chars17(r.epsilon_double_star)
               << ',' << to_chars17(r.retained_mass) << ',' << detail::allocation_field(r.allocation)
               << ',' << report.config_fingerprint << ',' << report.seed << '\n';
        }
        for (const auto& a : report.aggregates) {
            os << "# aggregate,budget_fraction=" << to_chars17(a.budget_fraction)
               << ",adaptive=" << a.adaptive_policy << ",baseline=" << a.baseline_policy
               << ",samples=" << a.samples << ",wins=" << a.adaptive_wins
               << ",win_fraction=" << to_chars17(a.win_fraction) << '\n';
        }
        return;
    }
    nlohmann::json j;
    j["fingerprint"] = report.config_fingerprint;
    j["seed"] = report.seed;
    j["trace_kind"] = report.trace_kind;
    auto rows = nlohmann::json::array();
    for (const auto& r : report.rows) {
        nlohmann::json jr{{"sample", r.sample},
                          {"budget_fraction", r.budget_fraction},
                          {"budget", r.budget},
                          {"policy", r.policy},
                          {"adaptive", r.adaptive},
                          {"epsilon", r.epsilon},
                          {"epsilon_star", r.epsilon_star},
                          {"epsilon_double_star", r.epsilon_double_star},
                          {"retained_mass", r.retained_mass},
                          {"allocation", r.allocation}};
        if (r.loss)
            jr["loss"] = *r.loss;
        else
            jr["loss"] = nullptr;
        rows.push_back(std::move(jr));
    }
    j["rows"] = std::move(rows);
    auto aggs = nlohmann::json::array();
    for (const auto& a : report.aggregates)
        aggs.push_back({{"budget_fraction", a.budget_fraction},
                        {"adaptive", a.adaptive_policy},
                        {"baseline", a.baseline_policy},
                        {"samples", a.samples},
                        {"wins", a.adaptive_wins},
                        {"win_fraction", a.win_fraction}});
    j["aggregates"] = std::move(aggs);
    os << j.dump(2) << "\n";
}

inline void emit_report(const ComparisonReport& report, ReportFormat format,
                        const std::string& path) {
    std::ofstream os(path);
    if (!os) throw IoError("cannot open for writing: " + path);
    emit_report(report, format, os);
    if (!os) throw IoError("write failed: " + path);
}

}  // namespace adakv
