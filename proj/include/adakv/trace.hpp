// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "adakv/attention.hpp"
#include "adakv/flat_cache.hpp"
#include "adakv/matrix.hpp"
#include "adakv/rng.hpp"
#include "adakv/serde.hpp"

namespace adakv {

enum class TraceKind { full, weights_only };

inline const char* to_string(TraceKind k) {
    return k == TraceKind::full ? "full" : "weights_only";
}

inline TraceKind trace_kind_from_string(const std::string& s) {
    if (s == "full") return TraceKind::full;
    if (s == "weights_only") return TraceKind::weights_only;
    throw std::invalid_argument("unknown trace kind: " + s);
}

/// Knobs of the synthetic head-mixture generator. Sparse heads concentrate
/// sparse_top_mass on 5% of the positions (in sparse_runs contiguous runs);
/// the rest draw near-uniform rows with spread dispersed_temperature.
struct GeneratorProfile {
    TraceKind kind = TraceKind::full;
    std::size_t h = 8;
    std::size_t n = 512;  // positions outside the observation window
    std::size_t d_h = 16;
    std::size_t layers = 1;
    std::size_t samples = 20;
    std::size_t window_size = 32;
    std::size_t gqa_group_size = 1;
    std::size_t sparse_runs = 2;
    double fraction_sparse_heads = 0.75;
    double sparse_top_mass = 0.95;
    double dispersed_temperature = 0.3;

    std::size_t num_groups() const { return h / gqa_group_size; }

    /// Embeddings carry one key block per KV group and one query block per
    /// head, all d_h wide.
    std::size_t embed_dim() const { return (num_groups() + h) * d_h; }

    void validate() const {
        if (h == 0 || n == 0 || d_h == 0 || layers == 0 || window_size == 0)
            throw std::invalid_argument("GeneratorProfile: zero dimension");
        if (gqa_group_size == 0 || h % gqa_group_size != 0)
            throw std::invalid_argument("GeneratorProfile: bad gqa_group_size");
        if (sparse_runs == 0) throw std::invalid_argument("GeneratorProfile: zero sparse_runs");
        if (!(fraction_sparse_heads >= 0.0 && fraction_sparse_heads <= 1.0))
            throw std::invalid_argument("GeneratorProfile: fraction_sparse_heads outside [0,1]");
        if (!(sparse_top_mass > 0.0 && sparse_top_mass < 1.0))
            throw std::invalid_argument("GeneratorProfile: sparse_top_mass outside (0,1)");
        if (!(dispersed_temperature >= 0.0))
            throw std::invalid_argument("GeneratorProfile: negative temperature");
        if (kind == TraceKind::weights_only && (layers != 1 || gqa_group_size != 1))
            throw std::invalid_argument(
                "GeneratorProfile: weights_only traces are single-layer, ungrouped");
    }
};

/// One generated context: per layer, an (n + window_size) × d embedding
/// matrix whose first n rows are the context and last rows the window.
struct FullSample {
    std::vector<Matrix> embeddings;
};

struct Trace {
    GeneratorProfile profile;
    std::uint64_t seed = 0;
    std::vector<LayerParams> params;         // full kind: one per layer
    std::vector<FullSample> full_samples;    // full kind
    std::vector<WeightRows> weight_samples;  // weights_only kind

    TraceKind kind() const { return profile.kind; }
    std::size_t sample_count() const {
        return kind() == TraceKind::full ? full_samples.size() : weight_samples.size();
    }
};

namespace detail {

inline constexpr double kKeyNoise = 0.05;
inline constexpr double kQueryJitter = 0.15;
inline constexpr double kWindowKeyNoise = 0.1;

inline std::vector<double> softmax_vector(std::vector<double> v) {
    double maxv = v.front();
    for (double x : v) maxv = std::max(maxv, x);
    double denom = 0.0;
    for (double& x : v) {
        x = std::exp(x - maxv);
        denom += x;
    }
    for (double& x : v) x /= denom;
    return v;
}

/// Sparse planted row: ⌈5% of n⌉ spike positions in contiguous runs carry
/// top_mass; exponential tail carries the rest.
inline std::vector<double> sparse_row(std::size_t n, double top_mass, std::size_t max_runs,
                                      Rng& rng) {
    const auto s_cnt = static_cast<std::size_t>(
        std::ceil(0.05 * static_cast<double>(n)));
    const std::size_t runs = std::min(std::max<std::size_t>(max_runs, 1), s_cnt);
    std::vector<std::uint8_t> is_spike(n, 0);
    for (std::size_t r = 0; r < runs; ++r) {
        std::size_t len = s_cnt / runs + (r < s_cnt % runs ? 1 : 0);
        const std::size_t chunk_lo = r * n / runs;
        const std::size_t chunk_hi = (r + 1) * n / runs;
        len = std::min(len, chunk_hi - chunk_lo);
        const std::size_t start = chunk_lo + rng.uniform_index(chunk_hi - chunk_lo - len + 1);
        for (std::size_t j = start; j < start + len; ++j) is_spike[j] = 1;
    }
    std::vector<double> p(n, 0.0);
    double spike_sum = 0.0;
    double tail_sum = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
        p[j] = is_spike[j] ? 0.5 + rng.uniform01() : rng.exponential();
        (is_spike[j] ? spike_sum : tail_sum) += p[j];
    }
    if (tail_sum == 0.0) {
        for (std::size_t j = 0; j < n; ++j) p[j] /= spike_sum;
        return p;
    }
    for (std::size_t j = 0; j < n; ++j)
        p[j] *= is_spike[j] ? top_mass / spike_sum : (1.0 - top_mass) / tail_sum;
    return p;
}

inline std::vector<double> dispersed_row(std::size_t n, double temperature, Rng& rng) {
    std::vector<double> logits(n);
    for (double& x : logits) x = temperature * rng.normal();
    return softmax_vector(std::move(logits));
}

/// Per-unit deterministic sparse/dispersed assignment: ⌊fraction·units⌉
/// units are sparse, chosen by a seeded shuffle.
inline std::vector<std::uint8_t> sparse_assignment(std::size_t units, double fraction, Rng& rng) {
    const auto n_sparse = static_cast<std::size_t>(
        std::llround(fraction * static_cast<double>(units)));
    std::vector<std::size_t> order(units);
    for (std::size_t i = 0; i < units; ++i) order[i] = i;
    for (std::size_t i = units; i > 1; --i)
        std::swap(order[i - 1], order[rng.uniform_index(i)]);
    std::vector<std::uint8_t> sparse(units, 0);
    for (std::size_t i = 0; i < n_sparse; ++i) sparse[order[i]] = 1;
    return sparse;
}

inline std::vector<std::vector<double>> planted_rows(const GeneratorProfile& profile,
                                                     std::size_t units, Rng& rng) {
    const auto sparse = sparse_assignment(units, profile.fraction_sparse_heads, rng);
    std::vector<std::vector<double>> rows(units);
    for (std::size_t u = 0; u < units; ++u)
        rows[u] = sparse[u]
                      ? sparse_row(profile.n, profile.sparse_top_mass, profile.sparse_runs, rng)
                      : dispersed_row(profile.n, profile.dispersed_temperature, rng);
    return rows;
}

inline Matrix gaussian_matrix(std::size_t rows, std::size_t cols, double sigma, Rng& rng) {
    Matrix m(rows, cols);
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) m(r, c) = sigma * rng.normal();
    return m;
}

/// d×d_h projection that copies the d_h coordinates starting at `block`.
inline Matrix block_selector(std::size_t d, std::size_t d_h, std::size_t block) {
    Matrix m(d, d_h);
    for (std::size_t c = 0; c < d_h; ++c) m(block * d_h + c, c) = 1.0;
    return m;
}

inline std::vector<double> unit_direction(std::size_t d_h, Rng& rng) {
    std::vector<double> u(d_h);
    double norm2 = 0.0;
    do {
        norm2 = 0.0;
        for (double& x : u) {
            x = rng.normal();
            norm2 += x * x;
        }
    } while (norm2 == 0.0);
    const double inv = 1.0 / std::sqrt(norm2);
    for (double& x : u) x *= inv;
    return u;
}

inline LayerParams make_layer_params(const GeneratorProfile& profile, Rng& rng) {
    const std::size_t d = profile.embed_dim();
    const std::size_t groups = profile.num_groups();
    std::vector<Matrix> wv(groups);
    for (std::size_t gi = 0; gi < groups; ++gi)
        wv[gi] = gaussian_matrix(d, profile.d_h, 1.0 / std::sqrt(static_cast<double>(d)), rng);
    LayerParams params;
    params.heads.resize(profile.h);
    for (std::size_t i = 0; i < profile.h; ++i) {
        const std::size_t gi = i / profile.gqa_group_size;
        params.heads[i].wq = block_selector(d, profile.d_h, groups + i);
        params.heads[i].wk = block_selector(d, profile.d_h, gi);
        params.heads[i].wv = wv[gi];
        params.heads[i].wo = gaussian_matrix(profile.d_h, d,
                                             1.0 / std::sqrt(static_cast<double>(profile.d_h)),
                                             rng);
    }
    return params;
}

/// Context rows carry each group's planted log-weight direction in that
/// group's key block; window rows carry small key noise plus each head's
/// aligned query direction, so softmax(q·k/√d_h) lands near the planted row.
inline Matrix make_embeddings(const GeneratorProfile& profile, Rng& rng) {
    const std::size_t d = profile.embed_dim();
    const std::size_t groups = profile.num_groups();
    const std::size_t n = profile.n;
    const std::size_t m = profile.window_size;
    const auto planted = planted_rows(profile, groups, rng);
    std::vector<std::vector<double>> u(groups);
    for (std::size_t gi = 0; gi < groups; ++gi) u[gi] = unit_direction(profile.d_h, rng);

    Matrix x(n + m, d);
    const double l0 = std::log(static_cast<double>(n));
    for (std::size_t j = 0; j < n; ++j)
        for (std::size_t gi = 0; gi < groups; ++gi) {
            const double c = std::log(planted[gi][j]) + l0;
            for (std::size_t t = 0; t < profile.d_h; ++t)
                x(j, gi * profile.d_h + t) = c * u[gi][t] + kKeyNoise * rng.normal();
        }
    const double q_scale = std::sqrt(static_cast<double>(profile.d_h));
    for (std::size_t r = 0; r < m; ++r) {
        const std::size_t row = n + r;
        for (std::size_t gi = 0; gi < groups; ++gi)
            for (std::size_t t = 0; t < profile.d_h; ++t)
                x(row, gi * profile.d_h + t) = kWindowKeyNoise * rng.normal();
        for (std::size_t i = 0; i < profile.h; ++i) {
            const std::size_t gi = i / profile.gqa_group_size;
            for (std::size_t t = 0; t < profile.d_h; ++t)
                x(row, (groups + i) * profile.d_h + t) =
                    q_scale * u[gi][t] + kQueryJitter * rng.normal();
        }
    }
    return x;
}

inline WeightRows make_weight_rows(const GeneratorProfile& profile, Rng& rng) {
    auto rows = planted_rows(profile, profile.h, rng);
    WeightRows out(rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) out[i] = std::move(rows[i]);
    return out;
}

inline constexpr std::uint64_t kParamsStream = 1;
inline constexpr std::uint64_t kSampleStream = 2;

}  // namespace detail

/// Deterministic in (profile, seed): every sample and layer draws from its
/// own counter-derived substream.
inline Trace generate_synthetic_trace(const GeneratorProfile& profile, std::uint64_t seed) {
    profile.validate();
    Trace t;
    t.profile = profile;
    t.seed = seed;
    if (profile.kind == TraceKind::weights_only) {
        t.weight_samples.reserve(profile.samples);
        for (std::size_t s = 0; s < profile.samples; ++s) {
            Rng rng(mix64(mix64(seed, detail::kSampleStream), s));
            t.weight_samples.push_back(detail::make_weight_rows(profile, rng));
        }
        return t;
    }
    t.params.reserve(profile.layers);
    for (std::size_t l = 0; l < profile.layers; ++l) {
        Rng rng(mix64(mix64(seed, detail::kParamsStream), l));
        t.params.push_back(detail::make_layer_params(profile, rng));
    }
    t.full_samples.resize(profile.samples);
    for (std::size_t s = 0; s < profile.samples; ++s) {
        auto& fs = t.full_samples[s];
        fs.embeddings.reserve(profile.layers);
        for (std::size_t l = 0; l < profile.layers; ++l) {
            Rng rng(mix64(mix64(seed, detail::kSampleStream), s * profile.layers + l));
            fs.embeddings.push_back(detail::make_embeddings(profile, rng));
        }
    }
    return t;
}

/// KV caches and window inputs of one (sample, layer), derived from the
/// stored embeddings through the layer projections.
struct DerivedLayer {
    LayerCache outside;
    LayerCache window;
    Matrix window_embeddings;
};

inline DerivedLayer derive_layer(const Trace& trace, std::size_t sample, std::size_t layer) {
    if (trace.kind() != TraceKind::full)
        throw std::invalid_argument("derive_layer: full-kind trace required");
    const auto& profile = trace.profile;
    const Matrix& x = trace.full_samples.at(sample).embeddings.at(layer);
    const LayerParams& params = trace.params.at(layer);
    const std::size_t n = profile.n;
    const std::size_t m = profile.window_size;

    DerivedLayer out;
    out.outside.heads.resize(profile.h);
    out.window.heads.resize(profile.h);
    out.window_embeddings = Matrix(m, x.cols());
    for (std::size_t r = 0; r < m; ++r)
        for (std::size_t c = 0; c < x.cols(); ++c) out.window_embeddings(r, c) = x(n + r, c);

    for (std::size_t i = 0; i < profile.h; ++i) {
        const Matrix k = matmul(x, params.heads[i].wk);
        const Matrix v = matmul(x, params.heads[i].wv);
        Matrix k_out(n, profile.d_h), v_out(n, profile.d_h);
        Matrix k_win(m, profile.d_h), v_win(m, profile.d_h);
        for (std::size_t r = 0; r < n; ++r)
            for (std::size_t c = 0; c < profile.d_h; ++c) {
                k_out(r, c) = k(r, c);
                v_out(r, c) = v(r, c);
            }
        for (std::size_t r = 0; r < m; ++r)
            for (std::size_t c = 0; c < profile.d_h; ++c) {
                k_win(r, c) = k(n + r, c);
                v_win(r, c) = v(n + r, c);
            }
        out.outside.heads[i] = {std::move(k_out), std::move(v_out)};
        out.window.heads[i] = {std::move(k_win), std::move(v_win)};
    }
    return out;
}

// ---------------------------------------------------------------------------
// Persistence: a JSON envelope plus the payload as a sequence of binary
// records (sidecar file or inline arrays). The checksum always covers the
// canonical binary serialization of the records, whichever way they travel.
// ---------------------------------------------------------------------------

namespace detail {

/// Packs an arbitrary row matrix into one record by splitting its rows into
/// a keys half and a values half (one zero row of padding when odd).
inline FlattenedCache pack_rows(const Matrix& rows) {
    const std::size_t half = (rows.rows() + 1) / 2;
    FlattenedCache fc;
    fc.d_h = rows.cols();
    fc.offsets = {0};
    fc.lengths = {half};
    fc.data.assign(2 * half * fc.d_h, 0.0);
    for (std::size_t r = 0; r < rows.rows(); ++r)
        for (std::size_t c = 0; c < rows.cols(); ++c) fc.data[r * fc.d_h + c] = rows(r, c);
    return fc;
}

inline Matrix unpack_rows(const FlattenedCache& fc, std::size_t rows, std::size_t cols) {
    if (fc.head_count() != 1 || fc.d_h != cols || fc.lengths[0] != (rows + 1) / 2)
        throw FormatError("trace payload: dimension mismatch in packed rows");
    Matrix m(rows, cols);
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) m(r, c) = fc.data[r * cols + c];
    return m;
}

/// Params travel as two exact-fit records per layer: head i holds (wq, wk)
/// in the first and (wv, woᵀ) in the second.
inline std::pair<FlattenedCache, FlattenedCache> pack_params(const LayerParams& params) {
    LayerCache a, b;
    for (const auto& head : params.heads) {
        a.heads.push_back({head.wq, head.wk});
        b.heads.push_back({head.wv, transpose(head.wo)});
    }
    return {flatten(a), flatten(b)};
}

inline LayerParams unpack_params(const FlattenedCache& a, const FlattenedCache& b, std::size_t h,
                                 std::size_t d, std::size_t d_h) {
    if (a.head_count() != h || b.head_count() != h || a.d_h != d_h || b.d_h != d_h)
        throw FormatError("trace payload: dimension mismatch in params records");
    LayerParams params;
    params.heads.resize(h);
    for (std::size_t i = 0; i < h; ++i) {
        if (a.lengths[i] != d || b.lengths[i] != d)
            throw FormatError("trace payload: dimension mismatch in params records");
        auto qa = head_slice(a, i);
        auto vb = head_slice(b, i);
        params.heads[i] = {std::move(qa.keys), std::move(qa.values), std::move(vb.keys),
                           transpose(vb.values)};
    }
    return params;
}

inline FlattenedCache pack_weight_sample(const WeightRows& rows) {
    std::size_t total = 0;
    for (const auto& r : rows) total += r.size();
    Matrix column(total, 1);
    std::size_t at = 0;
    for (const auto& r : rows)
        for (double v : r) column(at++, 0) = v;
    return pack_rows(column);
}

inline WeightRows unpack_weight_sample(const FlattenedCache& fc, std::size_t h, std::size_t n) {
    const Matrix column = unpack_rows(fc, h * n, 1);
    WeightRows rows(h, WeightRow(n));
    for (std::size_t i = 0; i < h; ++i)
        for (std::size_t j = 0; j < n; ++j) rows[i][j] = column(i * n + j, 0);
    return rows;
}

inline std::vector<FlattenedCache> trace_records(const Trace& trace) {
    std::vector<FlattenedCache> records;
    if (trace.kind() == TraceKind::weights_only) {
        records.reserve(trace.weight_samples.size());
        for (const auto& ws : trace.weight_samples) records.push_back(pack_weight_sample(ws));
        return records;
    }
    for (const auto& params : trace.params) {
        auto [a, b] = pack_params(params);
        records.push_back(std::move(a));
        records.push_back(std::move(b));
    }
    for (const auto& fs : trace.full_samples)
        for (const auto& x : fs.embeddings) records.push_back(pack_rows(x));
    return records;
}

inline std::string record_bytes(const FlattenedCache& fc) {
    std::ostringstream os(std::ios::binary);
    save_flattened(fc, os);
    return std::move(os).str();
}

inline nlohmann::json profile_to_json(const GeneratorProfile& p) {
    return nlohmann::json{{"kind", to_string(p.kind)},
                          {"h", p.h},
                          {"n", p.n},
                          {"d_h", p.d_h},
                          {"layers", p.layers},
                          {"samples", p.samples},
                          {"window_size", p.window_size},
                          {"gqa_group_size", p.gqa_group_size},
                          {"sparse_runs", p.sparse_runs},
                          {"fraction_sparse_heads", p.fraction_sparse_heads},
                          {"sparse_top_mass", p.sparse_top_mass},
                          {"dispersed_temperature", p.dispersed_temperature}};
}

inline GeneratorProfile profile_from_json(const nlohmann::json& j) {
    GeneratorProfile p;
    p.kind = trace_kind_from_string(j.at("kind").get<std::string>());
    p.h = j.at("h").get<std::size_t>();
    p.n = j.at("n").get<std::size_t>();
    p.d_h = j.at("d_h").get<std::size_t>();
    p.layers = j.at("layers").get<std::size_t>();
    p.samples = j.at("samples").get<std::size_t>();
    p.window_size = j.at("window_size").get<std::size_t>();
    p.gqa_group_size = j.at("gqa_group_size").get<std::size_t>();
    p.sparse_runs = j.at("sparse_runs").get<std::size_t>();
    p.fraction_sparse_heads = j.at("fraction_sparse_heads").get<double>();
    p.sparse_top_mass = j.at("sparse_top_mass").get<double>();
    p.dispersed_temperature = j.at("dispersed_temperature").get<double>();
    return p;
}

}  // namespace detail

inline constexpr std::uint32_t kTraceVersion = 1;

enum class TraceStorage { automatic, inline_payload, sidecar };

inline void save_trace(const Trace& trace, const std::string& path,
                       TraceStorage storage = TraceStorage::automatic) {
    trace.profile.validate();
    const auto records = detail::trace_records(trace);
    serde::Fnv1a64 checksum;
    std::vector<std::string> blobs;
    blobs.reserve(records.size());
    std::size_t total_values = 0;
    for (const auto& rec : records) {
        blobs.push_back(detail::record_bytes(rec));
        checksum.update(blobs.back().data(), blobs.back().size());
        total_values += rec.data.size();
    }
    if (storage == TraceStorage::automatic)
        storage = total_values <= (1u << 15) ? TraceStorage::inline_payload
                                             : TraceStorage::sidecar;

    nlohmann::json j;
    j["format"] = "adakv-trace";
    j["version"] = kTraceVersion;
    j["kind"] = to_string(trace.kind());
    nlohmann::json dims{{"h", trace.profile.h},
                        {"n", trace.profile.n},
                        {"d_h", trace.profile.d_h},
                        {"layers", trace.profile.layers}};
    if (trace.kind() == TraceKind::full) {
        dims["d"] = trace.profile.embed_dim();
        dims["window"] = trace.profile.window_size;
    }
    j["dims"] = dims;
    j["seed"] = trace.seed;
    j["profile"] = detail::profile_to_json(trace.profile);
    j["payload_checksum"] = serde::hex64(checksum.value());

    const std::filesystem::path envelope_path(path);
    if (storage == TraceStorage::inline_payload) {
        nlohmann::json recs = nlohmann::json::array();
        for (const auto& rec : records) {
            recs.push_back({{"h", rec.head_count()},
                            {"d_h", rec.d_h},
                            {"lengths", rec.lengths},
                            {"data", rec.data}});
        }
        j["payload"] = {{"records", std::move(recs)}};
    } else {
        const auto sidecar_name = envelope_path.stem().string() + ".akvc";
        j["payload_path"] = sidecar_name;
        const auto sidecar_path = envelope_path.parent_path() / sidecar_name;
        std::ofstream os(sidecar_path, std::ios::binary);
        if (!os) throw IoError("cannot open for writing: " + sidecar_path.string());
        for (const auto& blob : blobs) os.write(blob.data(), static_cast<std::streamsize>(blob.size()));
        if (!os) throw IoError("write failed: " + sidecar_path.string());
    }

    std::ofstream os(envelope_path);
    if (!os) throw IoError("cannot open for writing: " + path);
    os << j.dump(2) << "\n";
    if (!os) throw IoError("write failed: " + path);
}

inline Trace load_trace(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open for reading: " + path);
    nlohmann::json j;
    try {
        is >> j;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("malformed trace envelope: ") + e.what());
    }

    Trace trace;
    std::vector<FlattenedCache> records;
    try {
        if (j.at("format").get<std::string>() != "adakv-trace")
            throw FormatError("not a trace file: bad format tag");
        const auto version = j.at("version").get<std::uint32_t>();
        if (version != kTraceVersion)
            throw FormatError("unsupported trace version " + std::to_string(version));
        trace.profile = detail::profile_from_json(j.at("profile"));
        trace.profile.validate();
        trace.seed = j.at("seed").get<std::uint64_t>();
        const auto kind = trace_kind_from_string(j.at("kind").get<std::string>());
        if (kind != trace.profile.kind) throw FormatError("trace kind contradicts profile");
        const auto& dims = j.at("dims");
        if (dims.at("h").get<std::size_t>() != trace.profile.h ||
            dims.at("n").get<std::size_t>() != trace.profile.n ||
            dims.at("d_h").get<std::size_t>() != trace.profile.d_h ||
            dims.at("layers").get<std::size_t>() != trace.profile.layers)
            throw FormatError("trace dims contradict profile");
        if (kind == TraceKind::full &&
            (dims.at("d").get<std::size_t>() != trace.profile.embed_dim() ||
             dims.at("window").get<std::size_t>() != trace.profile.window_size))
            throw FormatError("trace dims contradict profile");

        if (j.contains("payload")) {
            for (const auto& rec : j.at("payload").at("records")) {
                FlattenedCache fc;
                fc.d_h = rec.at("d_h").get<std::size_t>();
                fc.lengths = rec.at("lengths").get<std::vector<std::size_t>>();
                if (fc.lengths.size() != rec.at("h").get<std::size_t>())
                    throw FormatError("trace payload: lengths/h mismatch");
                std::size_t offset = 0;
                for (std::size_t l : fc.lengths) {
                    fc.offsets.push_back(offset);
                    offset += l;
                }
                fc.data = rec.at("data").get<std::vector<double>>();
                if (fc.data.size() != 2 * offset * fc.d_h)
                    throw FormatError("trace payload: data size mismatch");
                records.push_back(std::move(fc));
            }
        } else {
            const auto sidecar_name = j.at("payload_path").get<std::string>();
            const auto sidecar_path =
                std::filesystem::path(path).parent_path() / sidecar_name;
            std::ifstream ss(sidecar_path, std::ios::binary);
            if (!ss) throw IoError("cannot open for reading: " + sidecar_path.string());
            while (ss.peek() != std::char_traits<char>::eof())
                records.push_back(load_flattened(ss));
        }
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("malformed trace envelope: ") + e.what());
    } catch (const std::invalid_argument& e) {
        throw FormatError(std::string("malformed trace envelope: ") + e.what());
    }

    serde::Fnv1a64 checksum;
    for (const auto& rec : records) {
        const auto blob = detail::record_bytes(rec);
        checksum.update(blob.data(), blob.size());
    }
    std::string want;
    try {
        want = j.at("payload_checksum").get<std::string>();
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("malformed trace envelope: ") + e.what());
    }
    if (serde::hex64(checksum.value()) != want)
        throw FormatError("trace payload checksum failure");

    const auto& profile = trace.profile;
    if (trace.kind() == TraceKind::weights_only) {
        if (records.size() != profile.samples)
            throw FormatError("trace payload: record count mismatch");
        trace.weight_samples.reserve(records.size());
        for (const auto& rec : records) {
            auto rows = detail::unpack_weight_sample(rec, profile.h, profile.n);
            for (const auto& row : rows) {
                double s = 0.0;
                for (double v : row) s += v;
                if (std::abs(s - 1.0) > 1e-9)
                    throw FormatError("trace payload: weight row does not sum to 1");
            }
            trace.weight_samples.push_back(std::move(rows));
        }
        return trace;
    }

    const std::size_t param_records = 2 * profile.layers;
    if (records.size() != param_records + profile.samples * profile.layers)
        throw FormatError("trace payload: record count mismatch");
    for (std::size_t l = 0; l < profile.layers; ++l)
        trace.params.push_back(detail::unpack_params(records[2 * l], records[2 * l + 1],
                                                     profile.h, profile.embed_dim(),
                                                     profile.d_h));
    trace.full_samples.resize(profile.samples);
    for (std::size_t s = 0; s < profile.samples; ++s)
        for (std::size_t l = 0; l < profile.layers; ++l)
            trace.full_samples[s].embeddings.push_back(
                detail::unpack_rows(records[param_records + s * profile.layers + l],
                                    profile.n + profile.window_size, profile.embed_dim()));
    return trace;
}

}  // namespace adakv
