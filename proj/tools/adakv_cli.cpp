// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <cstddef>
#include <iomanip>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "adakv/adakv.hpp"

namespace {

adakv::VerifyCaps parse_caps(const std::vector<std::string>& entries) {
    adakv::VerifyCaps caps;
    for (const auto& entry : entries) {
        const auto pos = entry.find('=');
        if (pos == std::string::npos)
            throw std::invalid_argument("--caps entry needs key=value: " + entry);
        const std::string key = entry.substr(0, pos);
        const std::size_t value = std::stoull(entry.substr(pos + 1));
        if (key == "bound-heads")
            caps.bound_max_heads = value;
        else if (key == "bound-len")
            caps.bound_max_len = value;
        else if (key == "bound-head-dim")
            caps.bound_max_head_dim = value;
        else if (key == "bound-embed-dim")
            caps.bound_max_embed_dim = value;
        else if (key == "topk-len")
            caps.topk_max_len = value;
        else if (key == "topk-budget")
            caps.topk_max_budget = value;
        else if (key == "alloc-heads")
            caps.alloc_max_heads = value;
        else if (key == "alloc-len")
            caps.alloc_max_len = value;
        else if (key == "alloc-budget")
            caps.alloc_max_budget = value;
        else
            throw std::invalid_argument("unknown cap key: " + key);
    }
    return caps;
}

adakv::TraceStorage storage_from_string(const std::string& s) {
    if (s == "auto") return adakv::TraceStorage::automatic;
    if (s == "inline") return adakv::TraceStorage::inline_payload;
    if (s == "sidecar") return adakv::TraceStorage::sidecar;
    throw std::invalid_argument("unknown storage mode: " + s);
}

/// Final-token attention weights over the full context (outside + window).
adakv::WeightRows final_row_weights(const adakv::Trace& trace, std::size_t sample,
                                    std::size_t layer) {
    if (trace.kind() == adakv::TraceKind::weights_only) return trace.weight_samples[sample];
    const auto dl = adakv::derive_layer(trace, sample, layer);
    const auto& params = trace.params[layer];
    const std::size_t h = params.head_count();
    const std::size_t d_h = trace.profile.d_h;
    adakv::WeightRows rows(h);
    const auto x_last = dl.window_embeddings.row(dl.window_embeddings.rows() - 1);
    for (std::size_t i = 0; i < h; ++i) {
        adakv::Matrix keys = dl.outside.heads[i].keys;
        for (std::size_t r = 0; r < dl.window.heads[i].keys.rows(); ++r) {
            const auto row = dl.window.heads[i].keys.row(r);
            keys.append_row(row);
        }
        const auto q = adakv::row_times(x_last, params.heads[i].wq);
        adakv::Matrix qm(1, d_h);
        for (std::size_t t = 0; t < d_h; ++t) qm(0, t) = q[t];
        const adakv::Matrix a = adakv::attention_weights(qm, keys, true);
        rows[i].assign(a.row(0).begin(), a.row(0).end());
    }
    return rows;
}

int run_inspect(const std::string& path) {
    const adakv::Trace trace = adakv::load_trace(path);
    const auto& p = trace.profile;
    std::cout << "trace: " << path << '\n';
    std::cout << "kind: " << adakv::to_string(p.kind) << "  seed: " << trace.seed << '\n';
    std::cout << "heads: " << p.h << "  len: " << p.n << "  head_dim: " << p.d_h
              << "  layers: " << p.layers << "  samples: " << trace.sample_count() << '\n';
    std::cout << "window: " << p.window_size << "  gqa_group: " << p.gqa_group_size
              << "  embed_dim: " << p.embed_dim() << '\n';
    std::cout << "sparse_heads: " << p.fraction_sparse_heads << "  top_mass: " << p.sparse_top_mass
              << "  temperature: " << p.dispersed_temperature << '\n';

    const std::size_t layers = trace.kind() == adakv::TraceKind::full ? p.layers : 1;
    std::cout << "per-head concentration of final-token attention (mean over "
              << trace.sample_count() << " samples):\n";
    for (std::size_t l = 0; l < layers; ++l) {
        std::cout << "layer " << l << ":\n";
        std::cout << "  head   top5%_mass   frac_for_90%\n";
        std::vector<double> top5(p.h, 0.0), frac90(p.h, 0.0);
        for (std::size_t s = 0; s < trace.sample_count(); ++s) {
            const auto rows = final_row_weights(trace, s, l);
            for (std::size_t i = 0; i < rows.size(); ++i) {
                std::vector<double> sorted(rows[i]);
                std::sort(sorted.begin(), sorted.end(), std::greater<double>());
                const std::size_t n = sorted.size();
                const std::size_t k5 =
                    std::max<std::size_t>(1, static_cast<std::size_t>(0.05 * n + 0.999999));
                double mass = 0.0;
                std::size_t k90 = n;
                for (std::size_t j = 0; j < n; ++j) {
                    mass += sorted[j];
                    if (j + 1 == k5) top5[i] += mass;
                    if (mass >= 0.90) {
                        k90 = j + 1;
                        break;
                    }
                }
                frac90[i] += static_cast<double>(k90) / static_cast<double>(n);
            }
        }
        const double ns = static_cast<double>(trace.sample_count());
        for (std::size_t i = 0; i < p.h; ++i) {
            std::cout << "  " << std::setw(4) << i << "   " << std::fixed << std::setprecision(4)
                      << std::setw(10) << top5[i] / ns << "   " << std::setw(12) << frac90[i] / ns
                      << std::defaultfloat << '\n';
        }
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"adaptive KV cache eviction toolkit"};
    app.require_subcommand(1);

    adakv::GeneratorProfile profile;
    std::string gen_kind = "full";
    std::string gen_out = "trace.json";
    std::string gen_storage = "auto";
    std::uint64_t gen_seed = 1234;
    auto* gen = app.add_subcommand("gen", "generate a synthetic trace");
    gen->add_option("--kind", gen_kind, "trace kind: full or weights_only");
    gen->add_option("--heads", profile.h, "attention heads per layer");
    gen->add_option("--len", profile.n, "context length outside the observation window");
    gen->add_option("--head-dim", profile.d_h, "per-head dimension");
    gen->add_option("--layers", profile.layers, "layer count");
    gen->add_option("--samples", profile.samples, "sample count");
    gen->add_option("--window", profile.window_size, "observation window length");
    gen->add_option("--gqa-group", profile.gqa_group_size, "query heads per KV group");
    gen->add_option("--sparse-runs", profile.sparse_runs, "contiguous spike runs per sparse head");
    gen->add_option("--sparse-heads", profile.fraction_sparse_heads,
                    "fraction of heads with concentrated attention");
    gen->add_option("--top-mass", profile.sparse_top_mass, "mass on spike positions");
    gen->add_option("--temperature", profile.dispersed_temperature,
                    "logit temperature of dispersed heads");
    gen->add_option("--seed", gen_seed, "generator seed");
    gen->add_option("--out", gen_out, "output envelope path");
    gen->add_option("--storage", gen_storage, "payload placement: auto, inline, or sidecar");

    std::uint64_t verify_seed = 1234;
    std::size_t verify_trials = 1000;
    std::vector<std::string> verify_caps;
    auto* verify = app.add_subcommand("verify", "run the theorem verification suites");
    verify->add_option("--trials", verify_trials, "trial count for the largest suites");
    verify->add_option("--seed", verify_seed, "instance generator seed");
    verify->add_option("--caps", verify_caps, "size caps as key=value pairs")->delimiter(',');

    std::string cmp_trace;
    std::vector<double> cmp_budgets{0.2, 0.4};
    std::vector<std::string> cmp_policies{"ada_snapkv", "snapkv"};
    std::size_t cmp_workers = 1;
    std::string cmp_format = "csv";
    std::string cmp_out;
    std::size_t cmp_window = 0;
    std::size_t cmp_kernel = 7;
    double cmp_alpha = 0.2;
    std::size_t cmp_sink = 4;
    bool cmp_force_loss = false;
    bool cmp_skip_loss = false;
    auto* cmp = app.add_subcommand("compare", "run eviction policies over a trace");
    cmp->add_option("--trace", cmp_trace, "trace envelope path")->required();
    cmp->add_option("--budgets", cmp_budgets, "budget fractions in (0,1]")->delimiter(',');
    cmp->add_option("--policies", cmp_policies,
                    "policy list: snapkv, pyramid, ada_snapkv, ada_pyramid, streaming_llm")
        ->delimiter(',');
    cmp->add_option("--workers", cmp_workers, "worker threads");
    cmp->add_option("--format", cmp_format, "output format: csv or json");
    cmp->add_option("--out", cmp_out, "output path (stdout when absent)");
    cmp->add_option("--window", cmp_window, "observation window (default: trace profile)");
    cmp->add_option("--kernel", cmp_kernel, "pooling kernel (odd)");
    cmp->add_option("--alpha", cmp_alpha, "safeguard blend toward the adaptive allocation");
    cmp->add_option("--sink", cmp_sink, "attention sink tokens for streaming_llm");
    cmp->add_flag("--loss", cmp_force_loss, "require loss columns (full traces only)");
    cmp->add_flag("--no-loss", cmp_skip_loss, "omit loss columns");

    std::string inspect_trace;
    auto* inspect = app.add_subcommand("inspect", "summarize a trace");
    inspect->add_option("--trace", inspect_trace, "trace envelope path")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    try {
        if (gen->parsed()) {
            profile.kind = adakv::trace_kind_from_string(gen_kind);
            profile.validate();
            const adakv::Trace trace = adakv::generate_synthetic_trace(profile, gen_seed);
            adakv::save_trace(trace, gen_out, storage_from_string(gen_storage));
            std::cout << "wrote " << gen_out << " (" << adakv::to_string(profile.kind)
                      << ", h=" << profile.h << ", n=" << profile.n
                      << ", samples=" << profile.samples << ", seed=" << gen_seed << ")\n";
            return 0;
        }
        if (verify->parsed()) {
            const auto report =
                adakv::verify_theorems(verify_seed, verify_trials, parse_caps(verify_caps));
            std::cout << adakv::format_verify_report(report);
            return report.ok() ? 0 : 2;
        }
        if (cmp->parsed()) {
            if (cmp_force_loss && cmp_skip_loss)
                throw std::invalid_argument("--loss and --no-loss are mutually exclusive");
            const adakv::Trace trace = adakv::load_trace(cmp_trace);
            std::vector<adakv::PolicyConfig> policies;
            for (const auto& name : cmp_policies) {
                adakv::PolicyConfig cfg;
                cfg.kind = adakv::policy_kind_from_string(name);
                cfg.window_size = cmp_window == 0 ? trace.profile.window_size : cmp_window;
                cfg.pool_kernel = cmp_kernel;
                cfg.alpha = cmp_alpha;
                cfg.sink_tokens = cmp_sink;
                cfg.gqa_group_size = trace.profile.gqa_group_size;
                policies.push_back(cfg);
            }
            adakv::CompareOptions options;
            options.workers = cmp_workers;
            if (cmp_force_loss) options.with_loss = true;
            if (cmp_skip_loss) options.with_loss = false;
            const auto report = adakv::run_comparison(trace, cmp_budgets, policies, options);
            const auto format = adakv::report_format_from_string(cmp_format);
            if (cmp_out.empty())
                adakv::emit_report(report, format, std::cout);
            else
                adakv::emit_report(report, format, cmp_out);
            return 0;
        }
        return run_inspect(inspect_trace);
    } catch (const adakv::IoError& e) {
        std::cerr << "i/o error: " << e.what() << '\n';
        return 3;
    } catch (const adakv::FormatError& e) {
        std::cerr << "format error: " << e.what() << '\n';
        return 3;
    } catch (const std::invalid_argument& e) {
        std::cerr << "usage error: " << e.what() << '\n';
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
}
