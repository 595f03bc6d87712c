// Copyright (C) 2026 The relayout Authors
// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <random>

#include <gtest/gtest.h>
#include <omp.h>

#include "relayout/kernels.hpp"
#include "support.hpp"

using namespace relayout;
using relayout::testing::random_matrix;

namespace {

class ThreadCounts : public ::testing::TestWithParam<int> {
protected:
    void SetUp() override {
        saved_ = omp_get_max_threads();
        omp_set_num_threads(GetParam());
    }
    void TearDown() override { omp_set_num_threads(saved_); }
    int saved_ = 1;
};

TEST_P(ThreadCounts, CosineSimilarityMatchesReferenceBitwise) {
    std::mt19937_64 gen(11);
    const auto a = random_matrix(37, 9, gen);
    const auto b = random_matrix(53, 9, gen);
    const auto ref = kernels::reference::cosine_similarity(a, b);
    for (std::size_t tile : {1u, 7u, 16u, 256u})
        EXPECT_EQ(kernels::cosine_similarity(a, b, tile), ref) << "tile " << tile;
}

TEST_P(ThreadCounts, MatmulFamilyMatchesReferenceBitwise) {
    std::mt19937_64 gen(12);
    const auto a = random_matrix(17, 11, gen);
    const auto b = random_matrix(11, 13, gen);
    const auto bt = random_matrix(13, 11, gen);
    const auto at = random_matrix(17, 13, gen);
    EXPECT_EQ(kernels::matmul(a, b), kernels::reference::matmul(a, b));
    EXPECT_EQ(kernels::matmul_transpose_b(a, bt), kernels::reference::matmul_transpose_b(a, bt));
    EXPECT_EQ(kernels::matmul_transpose_a(a, at), kernels::reference::matmul_transpose_a(a, at));
}

TEST_P(ThreadCounts, AttentionMatchesReferenceBitwise) {
    std::mt19937_64 gen(13);
    const auto q = random_matrix(29, 8, gen);
    const auto k = random_matrix(31, 8, gen);
    const auto v = random_matrix(31, 5, gen);
    EXPECT_EQ(kernels::attention_probabilities(q, k, 0.3), kernels::reference::attention_probabilities(q, k, 0.3));
    EXPECT_EQ(kernels::scaled_dot_attention(q, k, v), kernels::reference::scaled_dot_attention(q, k, v));
}

TEST_P(ThreadCounts, StreamingArgmaxMatchesMaterialisedPath) {
    std::mt19937_64 gen(14);
    const auto src = random_matrix(40, 6, gen);
    const auto tar = random_matrix(45, 6, gen);
    kernels::CandidateSets cs;
    cs.sets = {{0, 3, 5, 39}, {}, {7}};
    for (std::size_t j = 0; j < tar.rows; ++j)
        cs.set_of_target.push_back(static_cast<int>(j % 4) - 1);
    const auto sim = kernels::reference::cosine_similarity(src, tar);
    const auto expected = kernels::reference::restricted_column_argmax(sim, cs);
    for (std::size_t tile : {1u, 8u, 64u})
        EXPECT_EQ(kernels::streaming_restricted_argmax(src, tar, cs, tile), expected);
    EXPECT_EQ(kernels::restricted_column_argmax(sim, cs), expected);
    EXPECT_EQ(kernels::column_argmax(sim), kernels::reference::column_argmax(sim));
}

INSTANTIATE_TEST_SUITE_P(Threads, ThreadCounts, ::testing::Values(1, 2, 4));

TEST(Kernels, MatmulAgreesWithNaiveTripleLoop) {
    std::mt19937_64 gen(21);
    const auto a = random_matrix(5, 4, gen);
    const auto b = random_matrix(4, 3, gen);
    const auto c = kernels::matmul(a, b);
    for (std::size_t i = 0; i < 5; ++i)
        for (std::size_t j = 0; j < 3; ++j) {
            double s = 0;
            for (std::size_t k = 0; k < 4; ++k)
                s += a(i, k) * b(k, j);
            EXPECT_NEAR(c(i, j), s, 1e-12);
        }
}

TEST(Kernels, CosineSimilarityAgreesWithDirectFormula) {
    std::mt19937_64 gen(22);
    const auto a = random_matrix(6, 3, gen);
    const auto b = random_matrix(4, 3, gen);
    const auto s = kernels::cosine_similarity(a, b);
    ASSERT_EQ(s.rows, 6u);
    ASSERT_EQ(s.cols, 4u);
    for (std::size_t i = 0; i < 6; ++i)
        for (std::size_t j = 0; j < 4; ++j) {
            double dot = 0, na = 0, nb = 0;
            for (std::size_t k = 0; k < 3; ++k) {
                dot += a(i, k) * b(j, k);
                na += a(i, k) * a(i, k);
                nb += b(j, k) * b(j, k);
            }
            EXPECT_NEAR(s(i, j), dot / (std::sqrt(na) * std::sqrt(nb) + kernels::kCosineEps), 1e-12);
        }
}

TEST(Kernels, ColumnArgmaxBreaksTiesToLowestIndex) {
    Matrix sim(4, 2, 0.5);
    sim(2, 1) = 0.9;
    sim(3, 1) = 0.9;
    const auto idx = kernels::column_argmax(sim);
    EXPECT_EQ(idx[0], 0);
    EXPECT_EQ(idx[1], 2);
}

TEST(Kernels, EmptyCandidateSetYieldsNoMatch) {
    Matrix sim(3, 1, 1.0);
    kernels::CandidateSets cs{{0}, {{}}};
    EXPECT_EQ(kernels::restricted_column_argmax(sim, cs)[0], kernels::kNoMatch);
}

TEST(Kernels, AttentionRowsAreDistributions) {
    std::mt19937_64 gen(23);
    const auto p = kernels::attention_probabilities(random_matrix(9, 4, gen), random_matrix(12, 4, gen), 2.0);
    for (std::size_t i = 0; i < p.rows; ++i) {
        double s = 0;
        for (double v : p.row(i)) {
            EXPECT_GE(v, 0.0);
            s += v;
        }
        EXPECT_NEAR(s, 1.0, 1e-12);
    }
}

TEST(Kernels, GatherRowsCopiesIndexedRows) {
    Matrix v(3, 2);
    for (std::size_t i = 0; i < 6; ++i)
        v.data[i] = static_cast<double>(i);
    const std::vector<std::int64_t> idx = {2, 2, 0};
    const auto g = kernels::gather_rows(v, idx);
    EXPECT_EQ(g(0, 0), 4.0);
    EXPECT_EQ(g(1, 1), 5.0);
    EXPECT_EQ(g(2, 0), 0.0);
    EXPECT_EQ(g, kernels::reference::gather_rows(v, idx));
}

}  // namespace
