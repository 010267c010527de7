// SPDX-License-Identifier: Apache-2.0

#include "adakv/trace.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <gtest/gtest.h>

#include <json.hpp>

namespace {

using adakv::GeneratorProfile;
using adakv::Trace;
using adakv::TraceKind;
using adakv::TraceStorage;

GeneratorProfile small_full_profile() {
    GeneratorProfile p;
    p.kind = TraceKind::full;
    p.h = 2;
    p.n = 8;
    p.d_h = 2;
    p.layers = 2;
    p.samples = 2;
    p.window_size = 2;
    p.fraction_sparse_heads = 0.5;
    return p;
}

GeneratorProfile small_weights_profile() {
    GeneratorProfile p;
    p.kind = TraceKind::weights_only;
    p.h = 4;
    p.n = 24;
    p.layers = 1;
    p.samples = 3;
    return p;
}

std::string temp_path(const std::string& name) {
    return (std::filesystem::path(testing::TempDir()) / name).string();
}

bool traces_equal(const Trace& a, const Trace& b) {
    if (a.seed != b.seed || a.kind() != b.kind()) return false;
    if (a.kind() == TraceKind::weights_only) return a.weight_samples == b.weight_samples;
    if (a.params.size() != b.params.size() || a.full_samples.size() != b.full_samples.size())
        return false;
    for (std::size_t l = 0; l < a.params.size(); ++l)
        for (std::size_t i = 0; i < a.params[l].heads.size(); ++i) {
            const auto& ha = a.params[l].heads[i];
            const auto& hb = b.params[l].heads[i];
            if (ha.wq != hb.wq || ha.wk != hb.wk || ha.wv != hb.wv || ha.wo != hb.wo)
                return false;
        }
    for (std::size_t s = 0; s < a.full_samples.size(); ++s)
        if (a.full_samples[s].embeddings != b.full_samples[s].embeddings) return false;
    return true;
}

TEST(Generate, DeterministicInSeed) {
    const auto p = small_full_profile();
    EXPECT_TRUE(traces_equal(adakv::generate_synthetic_trace(p, 99),
                             adakv::generate_synthetic_trace(p, 99)));
    EXPECT_FALSE(traces_equal(adakv::generate_synthetic_trace(p, 99),
                              adakv::generate_synthetic_trace(p, 100)));
    const auto w = small_weights_profile();
    EXPECT_TRUE(traces_equal(adakv::generate_synthetic_trace(w, 7),
                             adakv::generate_synthetic_trace(w, 7)));
    EXPECT_FALSE(traces_equal(adakv::generate_synthetic_trace(w, 7),
                              adakv::generate_synthetic_trace(w, 8)));
}

TEST(Generate, ShapesMatchProfile) {
    const auto p = small_full_profile();
    const auto t = adakv::generate_synthetic_trace(p, 5);
    ASSERT_EQ(t.params.size(), p.layers);
    ASSERT_EQ(t.full_samples.size(), p.samples);
    EXPECT_EQ(t.sample_count(), p.samples);
    const std::size_t d = p.embed_dim();
    for (const auto& params : t.params) {
        ASSERT_EQ(params.head_count(), p.h);
        EXPECT_EQ(params.embed_dim(), d);
        EXPECT_EQ(params.head_dim(), p.d_h);
    }
    for (const auto& fs : t.full_samples) {
        ASSERT_EQ(fs.embeddings.size(), p.layers);
        for (const auto& x : fs.embeddings) {
            EXPECT_EQ(x.rows(), p.n + p.window_size);
            EXPECT_EQ(x.cols(), d);
            EXPECT_TRUE(adakv::all_finite(x));
        }
    }
}

TEST(Generate, WeightRowsAreDistributions) {
    const auto p = small_weights_profile();
    const auto t = adakv::generate_synthetic_trace(p, 21);
    ASSERT_EQ(t.weight_samples.size(), p.samples);
    for (const auto& sample : t.weight_samples) {
        ASSERT_EQ(sample.size(), p.h);
        for (const auto& row : sample) {
            ASSERT_EQ(row.size(), p.n);
            double sum = 0.0;
            for (double v : row) {
                EXPECT_GE(v, 0.0);
                sum += v;
            }
            EXPECT_NEAR(sum, 1.0, 1e-12);
        }
    }
}

TEST(Generate, SparseRowsConcentrateTopMass) {
    auto p = small_weights_profile();
    p.n = 100;
    p.fraction_sparse_heads = 1.0;
    p.sparse_top_mass = 0.9;
    const auto t = adakv::generate_synthetic_trace(p, 3);
    for (const auto& sample : t.weight_samples)
        for (auto row : sample) {
            std::sort(row.begin(), row.end(), std::greater<>());
            double head = 0.0;
            for (std::size_t j = 0; j < 5; ++j) head += row[j];  // top 5% of 100
            EXPECT_GE(head, 0.9 - 1e-12);
            EXPECT_LE(head, 1.0 + 1e-12);
        }
}

TEST(Profile, ValidationRejectsBadKnobs) {
    auto zero = small_full_profile();
    zero.h = 0;
    EXPECT_THROW(adakv::generate_synthetic_trace(zero, 1), std::invalid_argument);
    auto grouped = small_full_profile();
    grouped.gqa_group_size = 3;
    EXPECT_THROW(adakv::generate_synthetic_trace(grouped, 1), std::invalid_argument);
    auto frac = small_full_profile();
    frac.fraction_sparse_heads = 1.5;
    EXPECT_THROW(adakv::generate_synthetic_trace(frac, 1), std::invalid_argument);
    auto mass = small_full_profile();
    mass.sparse_top_mass = 1.0;
    EXPECT_THROW(adakv::generate_synthetic_trace(mass, 1), std::invalid_argument);
    auto runs = small_full_profile();
    runs.sparse_runs = 0;
    EXPECT_THROW(adakv::generate_synthetic_trace(runs, 1), std::invalid_argument);
    auto layered = small_weights_profile();
    layered.layers = 2;
    EXPECT_THROW(adakv::generate_synthetic_trace(layered, 1), std::invalid_argument);
}

TEST(Profile, EmbedDimCountsGroupAndQueryBlocks) {
    auto p = small_full_profile();
    p.h = 8;
    p.gqa_group_size = 4;
    p.d_h = 3;
    EXPECT_EQ(p.num_groups(), 2u);
    EXPECT_EQ(p.embed_dim(), (2u + 8u) * 3u);
}

TEST(DeriveLayer, ShapesAndGroupSharing) {
    auto p = small_full_profile();
    p.h = 4;
    p.gqa_group_size = 2;
    const auto t = adakv::generate_synthetic_trace(p, 11);
    const auto derived = adakv::derive_layer(t, 1, 0);
    ASSERT_EQ(derived.outside.head_count(), p.h);
    ASSERT_EQ(derived.window.head_count(), p.h);
    EXPECT_EQ(derived.window_embeddings.rows(), p.window_size);
    EXPECT_EQ(derived.window_embeddings.cols(), p.embed_dim());
    for (std::size_t i = 0; i < p.h; ++i) {
        EXPECT_EQ(derived.outside.heads[i].length(), p.n);
        EXPECT_EQ(derived.window.heads[i].length(), p.window_size);
        EXPECT_EQ(derived.outside.heads[i].keys.cols(), p.d_h);
    }
    // Heads of one KV group share keys and values exactly.
    EXPECT_EQ(derived.outside.heads[0].keys, derived.outside.heads[1].keys);
    EXPECT_EQ(derived.outside.heads[0].values, derived.outside.heads[1].values);
    EXPECT_NE(derived.outside.heads[0].keys, derived.outside.heads[2].keys);

    const auto w = adakv::generate_synthetic_trace(small_weights_profile(), 2);
    EXPECT_THROW(adakv::derive_layer(w, 0, 0), std::invalid_argument);
}

TEST(SaveLoad, InlineRoundTripIsExact) {
    const auto t = adakv::generate_synthetic_trace(small_full_profile(), 31);
    const auto path = temp_path("inline_full.trace.json");
    adakv::save_trace(t, path, TraceStorage::inline_payload);
    EXPECT_TRUE(traces_equal(adakv::load_trace(path), t));

    const auto w = adakv::generate_synthetic_trace(small_weights_profile(), 32);
    const auto wpath = temp_path("inline_weights.trace.json");
    adakv::save_trace(w, wpath, TraceStorage::inline_payload);
    EXPECT_TRUE(traces_equal(adakv::load_trace(wpath), w));
}

TEST(SaveLoad, SidecarRoundTripIsExact) {
    const auto t = adakv::generate_synthetic_trace(small_full_profile(), 33);
    const auto path = temp_path("sidecar_full.trace.json");
    adakv::save_trace(t, path, TraceStorage::sidecar);
    EXPECT_TRUE(std::filesystem::exists(temp_path("sidecar_full.trace.akvc")));
    EXPECT_TRUE(traces_equal(adakv::load_trace(path), t));
}

TEST(SaveLoad, AutomaticPicksInlineForSmallPayloads) {
    const auto t = adakv::generate_synthetic_trace(small_weights_profile(), 34);
    const auto path = temp_path("auto_small.trace.json");
    adakv::save_trace(t, path);
    std::ifstream is(path);
    nlohmann::json j;
    is >> j;
    EXPECT_TRUE(j.contains("payload"));
    EXPECT_FALSE(j.contains("payload_path"));
}

TEST(SaveLoad, ChecksumCatchesPayloadTampering) {
    const auto t = adakv::generate_synthetic_trace(small_weights_profile(), 35);
    const auto path = temp_path("tampered.trace.json");
    adakv::save_trace(t, path, TraceStorage::inline_payload);
    nlohmann::json j;
    {
        std::ifstream is(path);
        is >> j;
    }
    const double v = j["payload"]["records"][0]["data"][0].get<double>();
    j["payload"]["records"][0]["data"][0] = v + 0.125;
    {
        std::ofstream os(path);
        os << j.dump(2);
    }
    EXPECT_THROW(adakv::load_trace(path), adakv::FormatError);
}

TEST(SaveLoad, SidecarTamperingIsCaught) {
    const auto t = adakv::generate_synthetic_trace(small_full_profile(), 36);
    const auto path = temp_path("tampered_sidecar.trace.json");
    adakv::save_trace(t, path, TraceStorage::sidecar);
    const auto sidecar = temp_path("tampered_sidecar.trace.akvc");
    std::fstream f(sidecar, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(-1, std::ios::end);
    char last;
    f.seekg(-1, std::ios::end);
    f.get(last);
    f.seekp(-1, std::ios::end);
    f.put(static_cast<char>(last ^ 0x01));
    f.close();
    EXPECT_THROW(adakv::load_trace(path), adakv::FormatError);
}

TEST(SaveLoad, RejectsForeignAndFutureEnvelopes) {
    const auto t = adakv::generate_synthetic_trace(small_weights_profile(), 37);
    const auto path = temp_path("versioned.trace.json");
    adakv::save_trace(t, path, TraceStorage::inline_payload);
    nlohmann::json j;
    {
        std::ifstream is(path);
        is >> j;
    }
    nlohmann::json future = j;
    future["version"] = 2;
    const auto future_path = temp_path("future.trace.json");
    {
        std::ofstream os(future_path);
        os << future.dump(2);
    }
    EXPECT_THROW(adakv::load_trace(future_path), adakv::FormatError);

    nlohmann::json foreign = j;
    foreign["format"] = "other";
    const auto foreign_path = temp_path("foreign.trace.json");
    {
        std::ofstream os(foreign_path);
        os << foreign.dump(2);
    }
    EXPECT_THROW(adakv::load_trace(foreign_path), adakv::FormatError);

    const auto garbled_path = temp_path("garbled.trace.json");
    {
        std::ofstream os(garbled_path);
        os << "{not json";
    }
    EXPECT_THROW(adakv::load_trace(garbled_path), adakv::FormatError);

    EXPECT_THROW(adakv::load_trace(temp_path("missing.trace.json")), adakv::IoError);
}

}  // namespace
