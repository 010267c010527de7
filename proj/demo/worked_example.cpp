// SPDX-License-Identifier: Apache-2.0

// Tour of the library on one synthetic layer: score the context from the
// observation window, split one budget adaptively vs uniformly, evict, and
// compare the measured attention drift against its bound.

#include <iomanip>
#include <iostream>
#include <string>
#include <vector>

#include "adakv/adakv.hpp"

namespace {

struct PolicyRun {
    std::string name;
    adakv::EvictLayerResult result;
    double loss = 0.0;
    double bound = 0.0;
    double mass = 0.0;
};

std::string join_counts(const std::vector<std::size_t>& counts) {
    std::string out;
    for (std::size_t i = 0; i < counts.size(); ++i) {
        if (i) out += '|';
        out += std::to_string(counts[i]);
    }
    return out;
}

}  // namespace

int main() {
    adakv::GeneratorProfile profile;
    profile.h = 4;
    profile.n = 256;
    profile.d_h = 8;
    profile.samples = 1;
    profile.window_size = 8;
    profile.fraction_sparse_heads = 0.75;
    profile.sparse_top_mass = 0.95;

    const adakv::Trace trace = adakv::generate_synthetic_trace(profile, 7);
    const adakv::DerivedLayer dl = adakv::derive_layer(trace, 0, 0);
    const adakv::LayerParams& params = trace.params[0];
    const std::size_t h = profile.h;
    const std::size_t m = profile.window_size;

    // Full per-head cache (context then window) and the final token's
    // attention over it: the reference output that eviction perturbs.
    adakv::LayerCache full;
    full.heads.resize(h);
    adakv::WeightRows true_weights(h);
    const auto x_last = dl.window_embeddings.row(m - 1);
    for (std::size_t i = 0; i < h; ++i) {
        adakv::Matrix keys = dl.outside.heads[i].keys;
        adakv::Matrix values = dl.outside.heads[i].values;
        for (std::size_t r = 0; r < m; ++r) {
            keys.append_row(dl.window.heads[i].keys.row(r));
            values.append_row(dl.window.heads[i].values.row(r));
        }
        full.heads[i] = {std::move(keys), std::move(values)};
        const auto q = adakv::row_times(x_last, params.heads[i].wq);
        adakv::Matrix qm(1, profile.d_h);
        for (std::size_t t = 0; t < profile.d_h; ++t) qm(0, t) = q[t];
        const adakv::Matrix a = adakv::attention_weights(qm, full.heads[i].keys, true);
        true_weights[i].assign(a.row(0).begin(), a.row(0).end());
    }
    const std::vector<double> y = adakv::attention_output(true_weights, full, params);
    const double c = adakv::row_norm_constant(full, params);

    const std::size_t unique_total = h * (profile.n + m);
    const std::size_t budget = unique_total / 4;

    std::cout << "context: " << h << " heads, " << profile.n << "+" << m
              << " positions, head_dim " << profile.d_h << "\n";
    std::cout << "budget:  " << budget << " of " << unique_total << " cache elements (25%)\n\n";

    std::vector<PolicyRun> runs;
    for (const auto kind : {adakv::PolicyKind::ada_snapkv, adakv::PolicyKind::snapkv,
                            adakv::PolicyKind::streaming_llm}) {
        adakv::PolicyConfig cfg;
        cfg.kind = kind;
        cfg.window_size = m;
        PolicyRun run;
        run.name = adakv::to_string(kind);
        run.result = adakv::evict_layer(dl.outside, dl.window, dl.window_embeddings, params,
                                        budget, cfg);

        // Post-eviction output: fresh softmax over the retained keys only.
        adakv::WeightRows hat_weights(h);
        for (std::size_t i = 0; i < h; ++i) {
            const auto q = adakv::row_times(x_last, params.heads[i].wq);
            adakv::Matrix qm(1, profile.d_h);
            for (std::size_t t = 0; t < profile.d_h; ++t) qm(0, t) = q[t];
            const adakv::Matrix a =
                adakv::attention_weights(qm, run.result.retained.heads[i].keys, true);
            hat_weights[i].assign(a.row(0).begin(), a.row(0).end());
        }
        const auto y_hat = adakv::attention_output(hat_weights, run.result.retained, params);
        run.loss = adakv::l1_eviction_loss(y, y_hat);

        // Bound and retained mass use the decision extended by the
        // always-kept window positions.
        adakv::EvictionDecision with_window = run.result.decision;
        for (auto& keep : with_window.retain) keep.insert(keep.end(), m, 1);
        run.bound = adakv::epsilon_bound(true_weights, with_window, c);
        run.mass = adakv::retained_mass(true_weights, with_window) / static_cast<double>(h);
        runs.push_back(std::move(run));
    }

    std::cout << std::left << std::setw(15) << "policy" << std::setw(18) << "allocation"
              << std::right << std::setw(12) << "loss" << std::setw(12) << "bound"
              << std::setw(12) << "mass" << "\n";
    for (const auto& run : runs) {
        std::cout << std::left << std::setw(15) << run.name << std::setw(18)
                  << join_counts(run.result.allocation.per_head) << std::right << std::fixed
                  << std::setprecision(5) << std::setw(12) << run.loss << std::setw(12)
                  << run.bound << std::setw(12) << run.mass << std::defaultfloat << "\n";
    }

    std::cout << "\nwindow positions (" << m << " per head) are always retained;"
              << " the allocation splits the rest.\n";

    // Equal budgets flatten to byte-identical footprints regardless of how
    // the allocation distributed them.
    const auto fc_ada = adakv::flatten(runs[0].result.retained);
    const auto fc_uni = adakv::flatten(runs[1].result.retained);
    std::cout << "flattened footprint: " << adakv::memory_footprint(fc_ada).bytes << " bytes vs "
              << adakv::memory_footprint(fc_uni).bytes << " bytes\n";
    return 0;
}
