// Copyright (C) 2026 The relayout Authors
// SPDX-License-Identifier: Apache-2.0

#include <random>

#include <gtest/gtest.h>

#include "relayout/editing.hpp"
#include "relayout/toy_denoiser.hpp"
#include "support.hpp"

using namespace relayout;
using namespace relayout::editing;
using relayout::testing::box_mask;
using relayout::testing::random_latent;

namespace {

Mask random_box(int h, int w, std::mt19937_64& gen) {
    const int bw = 1 + static_cast<int>(gen() % w), bh = 1 + static_cast<int>(gen() % h);
    return box_mask(h, w, static_cast<int>(gen() % (w - bw + 1)), static_cast<int>(gen() % (h - bh + 1)), bw, bh);
}

TEST(Fusion, OwnersPartitionWithLastListedWinning) {
    std::mt19937_64 gen(1);
    for (int trial = 0; trial < 100; ++trial) {
        const int n = 1 + static_cast<int>(gen() % 4);
        std::vector<Mask> masks;
        for (int i = 0; i < n; ++i)
            masks.push_back(random_box(8, 8, gen));
        const auto owners = fusion_owners(masks, 8, 8);
        std::vector<Latent> branches;
        for (int i = 0; i < n; ++i)
            branches.push_back(Latent(2, 8, 8, static_cast<double>(i)));
        const Latent base(2, 8, 8, -1.0);
        const auto fused = fuse(branches, base, owners);
        for (std::size_t u = 0; u < 64; ++u) {
            int expected = kBaseBranch;
            for (int i = n - 1; i >= 0; --i)
                if (masks[i][u]) {
                    expected = i;
                    break;
                }
            ASSERT_EQ(owners[u], expected);
            for (int c = 0; c < 2; ++c)
                ASSERT_EQ(fused.at(c, u), static_cast<double>(expected));
        }
    }
}

TEST(Fusion, NoiseFusionValidatesBranches) {
    std::vector<Mask> masks = {box_mask(4, 4, 0, 0, 2, 2)};
    BranchResult base;
    base.noise = Latent(1, 4, 4, 0.0);
    BranchResult b0;
    b0.object = 0;
    b0.noise = Latent(1, 4, 4, 1.0);
    std::vector<BranchResult> branches{b0};
    const auto f = fuse_noise(branches, base, masks);
    EXPECT_EQ(f.at(0, 0, 0), 1.0);
    EXPECT_EQ(f.at(0, 3, 3), 0.0);
    branches.clear();
    EXPECT_THROW(fuse_noise(branches, base, masks), ContractViolation);
}

struct ToyEdit : ::testing::Test {
    backend::ToyDenoiser denoiser{backend::ToyConfig::for_image(64, 64)};
    backend::NoiseSchedule schedule = backend::NoiseSchedule::scaled_linear(20);

    EditContext context(double eta) {
        EditContext ctx;
        ctx.denoiser = &denoiser;
        ctx.schedule = &schedule;
        ctx.prompt = backend::Prompt::parse("a photo of cat and pot");
        const auto [h, w] = guidance::attention_resolution(denoiser);
        const auto m0 = box_mask(64, 64, 32, 32, 32, 32);
        const auto m1 = box_mask(64, 64, 0, 0, 32, 32);
        ctx.objects = {{{3}, resample_mask(m0, h, w)}, {{5}, resample_mask(m1, h, w)}};
        ctx.latent_masks = {resample_mask(m0, 8, 8), resample_mask(m1, 8, 8)};
        ctx.guidance.eta = eta;
        return ctx;
    }
};

TEST_F(ToyEdit, UnguidedStepIsPlainDdim) {
    const auto ctx = context(0.0);
    const auto x = random_latent(4, 8, 8, 2);
    const auto r = editing_step(ctx, x, 20);
    EXPECT_FALSE(r.guided);
    backend::TapConfig taps;
    taps.cross_attention = false;
    const auto eps = denoiser.predict_noise(x, 20, ctx.prompt, taps).noise;
    EXPECT_EQ(r.next, backend::ddim_step(x, eps, 20, schedule));
    ASSERT_EQ(r.object_losses.size(), 2u);
    EXPECT_EQ(r.occupancy, (std::vector<std::size_t>{16, 16, 32}));
}

TEST_F(ToyEdit, GuidedStepOnlyInsideWindow) {
    auto ctx = context(0.05);
    const auto x = random_latent(4, 8, 8, 3);
    EXPECT_TRUE(editing_step(ctx, x, 20).guided);
    EXPECT_FALSE(editing_step(ctx, x, 10).guided);
    ctx.horizon = 10;
    EXPECT_TRUE(editing_step(ctx, x, 10).guided);
}

TEST_F(ToyEdit, AsyncFusesBranchLatentsByOwner) {
    const auto ctx = context(0.05);
    const auto x = random_latent(4, 8, 8, 4);
    const int t = 20;
    const auto b0 = per_object_guidance(ctx, x, 0, t);
    const auto b1 = per_object_guidance(ctx, x, 1, t);
    EXPECT_TRUE(b0.guided);
    EXPECT_NE(b0.latent, x);
    backend::TapConfig taps;
    taps.cross_attention = false;
    BranchResult base;
    base.latent = x;
    base.noise = denoiser.predict_noise(x, t, ctx.prompt, taps).noise;
    const auto owners = fusion_owners(ctx.latent_masks, 8, 8);
    const std::vector<Latent> lat{b0.latent, b1.latent};
    const std::vector<BranchResult> br{b0, b1};
    const auto expected = backend::ddim_step(fuse(lat, x, owners), fuse_noise(br, base, ctx.latent_masks), t, schedule);
    EXPECT_EQ(editing_step(ctx, x, t).next, expected);
}

TEST_F(ToyEdit, SynchronousModeGuidesOneLatent) {
    auto ctx = context(0.05);
    ctx.mode = Mode::synchronous;
    const auto x = random_latent(4, 8, 8, 5);
    const auto r = editing_step(ctx, x, 20);
    EXPECT_TRUE(r.guided);
    EXPECT_TRUE(r.next.all_finite());
    EXPECT_NE(r.next, editing_step(context(0.0), x, 20).next);
}

TEST_F(ToyEdit, ContractChecks) {
    auto ctx = context(0.0);
    ctx.latent_masks.pop_back();
    EXPECT_THROW(editing_step(ctx, random_latent(4, 8, 8, 6), 5), ContractViolation);
    EXPECT_THROW(editing_step(context(0.0), random_latent(4, 8, 8, 6), 0), OutOfRangeError);
}

}  // namespace
