// SPDX-License-Identifier: Apache-2.0

#include "adakv/attention.hpp"

#include <cmath>
#include <vector>

#include <gtest/gtest.h>

#include "adakv/rng.hpp"

namespace {

using adakv::EvictionDecision;
using adakv::HeadParams;
using adakv::LayerCache;
using adakv::LayerParams;
using adakv::Matrix;
using adakv::WeightRows;

HeadParams identity_head(std::size_t d) {
    return {Matrix::identity(d), Matrix::identity(d), Matrix::identity(d), Matrix::identity(d)};
}

TEST(ProjectQkv, ZeroRowProjectsToZero) {
    HeadParams params{Matrix::from_rows({{1.0, 2.0}, {3.0, 4.0}}),
                      Matrix::from_rows({{5.0, 6.0}, {7.0, 8.0}}),
                      Matrix::from_rows({{9.0, 1.0}, {2.0, 3.0}}),
                      Matrix::from_rows({{1.0, 0.0}, {0.0, 1.0}})};
    const std::vector<double> x{0.0, 0.0};
    const auto qkv = adakv::project_qkv(x, params);
    EXPECT_EQ(qkv.q, (std::vector<double>{0.0, 0.0}));
    EXPECT_EQ(qkv.k, (std::vector<double>{0.0, 0.0}));
    EXPECT_EQ(qkv.v, (std::vector<double>{0.0, 0.0}));
}

TEST(ProjectQkv, IdentityMapReturnsInput) {
    const auto qkv = adakv::project_qkv(std::vector<double>{1.0, 2.0}, identity_head(2));
    EXPECT_EQ(qkv.q, (std::vector<double>{1.0, 2.0}));
}

TEST(ProjectQkv, HandProduct) {
    HeadParams params = identity_head(2);
    params.wq = Matrix::from_rows({{2.0, 3.0}, {5.0, 7.0}});
    const auto qkv = adakv::project_qkv(std::vector<double>{1.0, 0.0}, params);
    EXPECT_EQ(qkv.q, (std::vector<double>{2.0, 3.0}));
}

TEST(ProjectQkv, WidthMismatchRejected) {
    EXPECT_THROW(adakv::project_qkv(std::vector<double>{1.0, 2.0, 3.0}, identity_head(2)),
                 std::invalid_argument);
}

TEST(AppendKv, EmptyCacheGrowsToOne) {
    LayerCache cache;
    cache.heads.resize(1);
    adakv::append_kv(cache, 0, std::vector<double>{1.0, 2.0}, std::vector<double>{3.0, 4.0});
    EXPECT_EQ(cache.heads[0].length(), 1u);
    EXPECT_EQ(cache.heads[0].keys(0, 1), 2.0);
    EXPECT_EQ(cache.heads[0].values(0, 0), 3.0);
}

TEST(AppendKv, ExistingRowsUnchangedNewRowLast) {
    LayerCache cache;
    cache.heads.push_back({Matrix::from_rows({{1.0}, {2.0}, {3.0}}),
                           Matrix::from_rows({{4.0}, {5.0}, {6.0}})});
    adakv::append_kv(cache, 0, std::vector<double>{7.0}, std::vector<double>{8.0});
    EXPECT_EQ(cache.heads[0].length(), 4u);
    EXPECT_EQ(cache.heads[0].keys(0, 0), 1.0);
    EXPECT_EQ(cache.heads[0].keys(2, 0), 3.0);
    EXPECT_EQ(cache.heads[0].keys(3, 0), 7.0);
    EXPECT_EQ(cache.heads[0].values(3, 0), 8.0);
}

TEST(AppendKv, OtherHeadUntouched) {
    LayerCache cache;
    cache.heads.push_back({Matrix::from_rows({{1.0}}), Matrix::from_rows({{2.0}})});
    cache.heads.push_back({Matrix::from_rows({{3.0}}), Matrix::from_rows({{4.0}})});
    adakv::append_kv(cache, 1, std::vector<double>{5.0}, std::vector<double>{6.0});
    EXPECT_EQ(cache.heads[0].length(), 1u);
    EXPECT_EQ(cache.heads[1].length(), 2u);
}

TEST(AppendKv, BadHeadIndexRejected) {
    LayerCache cache;
    cache.heads.resize(1);
    EXPECT_THROW(
        adakv::append_kv(cache, 1, std::vector<double>{1.0}, std::vector<double>{1.0}),
        std::out_of_range);
}

TEST(AttentionWeights, EqualLogitsGiveUniform) {
    Matrix q(1, 2);
    q(0, 0) = 1.0;
    const Matrix keys = Matrix::from_rows({{1.0, 0.0}, {1.0, 0.0}, {1.0, 0.0}});
    const Matrix w = adakv::attention_weights(q, keys, true);
    for (std::size_t j = 0; j < 3; ++j) EXPECT_NEAR(w(0, j), 1.0 / 3.0, 1e-15);
}

TEST(AttentionWeights, HandSoftmaxUnscaled) {
    Matrix q(1, 2);
    q(0, 0) = 1.0;
    const Matrix keys = Matrix::from_rows({{1.0, 0.0}, {0.0, 1.0}});
    const Matrix w = adakv::attention_weights(q, keys, false);
    const double e = std::exp(1.0);
    EXPECT_NEAR(w(0, 0), e / (e + 1.0), 1e-12);
    EXPECT_NEAR(w(0, 1), 1.0 / (e + 1.0), 1e-12);
}

TEST(AttentionWeights, SingleKeyNormalizesToOne) {
    Matrix q(1, 3);
    q(0, 1) = -2.0;
    const Matrix keys = Matrix::from_rows({{0.5, 0.25, -1.0}});
    const Matrix w = adakv::attention_weights(q, keys, true);
    EXPECT_EQ(w(0, 0), 1.0);
}

TEST(AttentionWeights, EmptyKeySetRejected) {
    EXPECT_THROW(adakv::attention_weights(Matrix(1, 2), Matrix(0, 2), true),
                 std::invalid_argument);
}

TEST(AttentionWeights, RowsAreSimplexPoints) {
    adakv::Rng rng(99);
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t m = 1 + rng.uniform_index(4);
        const std::size_t n = 1 + rng.uniform_index(12);
        const std::size_t d_h = 1 + rng.uniform_index(6);
        Matrix q(m, d_h), keys(n, d_h);
        for (double& v : q.values()) v = 3.0 * rng.normal();
        for (double& v : keys.values()) v = 3.0 * rng.normal();
        const Matrix w = adakv::attention_weights(q, keys, true);
        for (std::size_t r = 0; r < m; ++r) {
            double sum = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
                EXPECT_GE(w(r, j), 0.0);
                sum += w(r, j);
            }
            EXPECT_NEAR(sum, 1.0, 1e-9);
        }
    }
}

TEST(AttentionOutput, SingleWeightPassesValueThrough) {
    LayerParams params{{identity_head(2)}};
    LayerCache cache;
    cache.heads.push_back({Matrix::from_rows({{9.0, 9.0}}), Matrix::from_rows({{1.0, 2.0}})});
    const auto y = adakv::attention_output({{1.0}}, cache, params);
    EXPECT_EQ(y, (std::vector<double>{1.0, 2.0}));
}

TEST(AttentionOutput, ZeroValuesGiveZero) {
    LayerParams params{{identity_head(2), identity_head(2)}};
    LayerCache cache;
    cache.heads.push_back({Matrix::from_rows({{1.0, 0.0}}), Matrix(1, 2)});
    cache.heads.push_back({Matrix::from_rows({{0.0, 1.0}}), Matrix(1, 2)});
    const auto y = adakv::attention_output({{1.0}, {1.0}}, cache, params);
    EXPECT_EQ(y, (std::vector<double>{0.0, 0.0}));
}

TEST(AttentionOutput, HandAverage) {
    LayerParams params{{identity_head(2)}};
    LayerCache cache;
    cache.heads.push_back(
        {Matrix::from_rows({{0.0, 0.0}, {0.0, 0.0}}), Matrix::from_rows({{2.0, 0.0}, {0.0, 2.0}})});
    const auto y = adakv::attention_output({{0.5, 0.5}}, cache, params);
    EXPECT_EQ(y, (std::vector<double>{1.0, 1.0}));
}

TEST(AttentionOutput, LinearInValues) {
    adakv::Rng rng(7);
    HeadParams head = identity_head(3);
    for (double& v : head.wo.values()) v = rng.normal();
    LayerParams params{{head}};
    LayerCache cache;
    Matrix keys(4, 3), values(4, 3);
    for (double& v : keys.values()) v = rng.normal();
    for (double& v : values.values()) v = rng.normal();
    cache.heads.push_back({keys, values});
    WeightRows w{{0.1, 0.2, 0.3, 0.4}};
    const auto y = adakv::attention_output(w, cache, params);

    LayerCache doubled = cache;
    for (double& v : doubled.heads[0].values.values()) v *= 2.0;
    const auto y2 = adakv::attention_output(w, doubled, params);
    for (std::size_t k = 0; k < y.size(); ++k) EXPECT_NEAR(y2[k], 2.0 * y[k], 1e-12);

    LayerCache zeroed = cache;
    zeroed.heads[0].values = Matrix(4, 3);
    const auto y0 = adakv::attention_output(w, zeroed, params);
    for (double v : y0) EXPECT_EQ(v, 0.0);
}

TEST(AttentionOutput, WidthMismatchRejected) {
    LayerParams params{{identity_head(2)}};
    LayerCache cache;
    cache.heads.push_back({Matrix::from_rows({{1.0, 0.0}}), Matrix::from_rows({{1.0, 0.0}})});
    EXPECT_THROW(adakv::attention_output({{0.5, 0.5}}, cache, params), std::invalid_argument);
}

TEST(MaskedWeights, AllOnesEqualsUnmasked) {
    const std::vector<double> q{0.3, -1.2};
    const Matrix keys = Matrix::from_rows({{1.0, 0.0}, {0.0, 1.0}, {1.0, 1.0}});
    Matrix qm(1, 2);
    qm(0, 0) = q[0];
    qm(0, 1) = q[1];
    const Matrix plain = adakv::attention_weights(qm, keys, true);
    const auto masked =
        adakv::masked_attention_weights(q, keys, std::vector<std::uint8_t>{1, 1, 1}, true);
    for (std::size_t j = 0; j < 3; ++j) EXPECT_EQ(masked[j], plain(0, j));
}

TEST(MaskedWeights, SingleSurvivorTakesAll) {
    const std::vector<double> q{1.0};
    const Matrix keys = Matrix::from_rows({{1.0}, {1.0}});
    const auto w = adakv::masked_attention_weights(q, keys, std::vector<std::uint8_t>{1, 0}, true);
    EXPECT_EQ(w[0], 1.0);
    EXPECT_EQ(w[1], 0.0);
}

TEST(MaskedWeights, EqualLogitsSplitOverRetained) {
    const std::vector<double> q{0.0, 0.0};
    const Matrix keys = Matrix::from_rows({{1.0, 0.0}, {2.0, 0.0}, {3.0, 0.0}});
    const auto w =
        adakv::masked_attention_weights(q, keys, std::vector<std::uint8_t>{1, 0, 1}, true);
    EXPECT_NEAR(w[0], 0.5, 1e-15);
    EXPECT_EQ(w[1], 0.0);
    EXPECT_NEAR(w[2], 0.5, 1e-15);
}

TEST(MaskedWeights, AllZeroDecisionRejected) {
    const std::vector<double> q{1.0};
    const Matrix keys = Matrix::from_rows({{1.0}, {1.0}});
    EXPECT_THROW(adakv::masked_attention_weights(q, keys, std::vector<std::uint8_t>{0, 0}, true),
                 std::invalid_argument);
}

TEST(RenormalizedWeights, HandDivision) {
    const auto w = adakv::renormalized_weights(std::vector<double>{0.5, 0.3, 0.2},
                                               std::vector<std::uint8_t>{1, 0, 1});
    EXPECT_NEAR(w[0], 5.0 / 7.0, 1e-15);
    EXPECT_EQ(w[1], 0.0);
    EXPECT_NEAR(w[2], 2.0 / 7.0, 1e-15);
}

TEST(RenormalizedWeights, AllOnesUnchangedBitwise) {
    const std::vector<double> a{0.5, 0.3, 0.2};
    const auto w = adakv::renormalized_weights(a, std::vector<std::uint8_t>{1, 1, 1});
    EXPECT_EQ(w, a);
}

TEST(RenormalizedWeights, SingleRetainedBecomesOne) {
    const auto w = adakv::renormalized_weights(std::vector<double>{0.25, 0.75},
                                               std::vector<std::uint8_t>{0, 1});
    EXPECT_EQ(w[0], 0.0);
    EXPECT_EQ(w[1], 1.0);
}

TEST(RenormalizedWeights, ZeroRetainedMassRejected) {
    EXPECT_THROW(adakv::renormalized_weights(std::vector<double>{0.5, 0.5},
                                             std::vector<std::uint8_t>{0, 0}),
                 std::invalid_argument);
}

TEST(PostEvictionOutput, AllOnesReproducesOutputExactly) {
    adakv::Rng rng(11);
    HeadParams head = identity_head(3);
    for (double& v : head.wo.values()) v = rng.normal();
    LayerParams params{{head, head}};
    LayerCache cache;
    for (int i = 0; i < 2; ++i) {
        Matrix keys(5, 3), values(5, 3);
        for (double& v : keys.values()) v = rng.normal();
        for (double& v : values.values()) v = rng.normal();
        cache.heads.push_back({keys, values});
    }
    WeightRows w(2);
    for (auto& row : w) {
        row.resize(5);
        double sum = 0.0;
        for (double& v : row) {
            v = rng.exponential();
            sum += v;
        }
        for (double& v : row) v /= sum;
    }
    EvictionDecision all_ones{{std::vector<std::uint8_t>(5, 1), std::vector<std::uint8_t>(5, 1)}};
    const auto y = adakv::attention_output(w, cache, params);
    const auto y_hat = adakv::post_eviction_output(w, all_ones, cache, params);
    EXPECT_EQ(y, y_hat);
}

TEST(PostEvictionOutput, HandRenormalizedProduct) {
    LayerParams params{{identity_head(2)}};
    LayerCache cache;
    cache.heads.push_back(
        {Matrix::from_rows({{0.0, 0.0}, {0.0, 0.0}}), Matrix::from_rows({{2.0, 0.0}, {0.0, 2.0}})});
    EvictionDecision keep_first{{{1, 0}}};
    const auto y_hat = adakv::post_eviction_output({{0.5, 0.5}}, keep_first, cache, params);
    EXPECT_EQ(y_hat, (std::vector<double>{2.0, 0.0}));
}

TEST(PostEvictionOutput, ZeroValuesGiveZero) {
    LayerParams params{{identity_head(2)}};
    LayerCache cache;
    cache.heads.push_back({Matrix::from_rows({{1.0, 0.0}, {0.0, 1.0}}), Matrix(2, 2)});
    EvictionDecision keep_first{{{1, 0}}};
    const auto y_hat = adakv::post_eviction_output({{0.5, 0.5}}, keep_first, cache, params);
    EXPECT_EQ(y_hat, (std::vector<double>{0.0, 0.0}));
}

TEST(PostEvictionOutput, FullyEvictedHeadRejected) {
    LayerParams params{{identity_head(2)}};
    LayerCache cache;
    cache.heads.push_back({Matrix::from_rows({{1.0, 0.0}, {0.0, 1.0}}), Matrix(2, 2)});
    EvictionDecision none{{{0, 0}}};
    EXPECT_THROW(adakv::post_eviction_output({{0.5, 0.5}}, none, cache, params),
                 std::invalid_argument);
}

}  // namespace
