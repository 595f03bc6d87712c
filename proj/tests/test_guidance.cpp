// Copyright (C) 2026 The relayout Authors
// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "relayout/guidance.hpp"
#include "relayout/toy_denoiser.hpp"
#include "support.hpp"

using namespace relayout;
using namespace relayout::guidance;
using relayout::testing::box_mask;
using relayout::testing::random_latent;

namespace {

Map2D uniform_map(int h, int w) { return Map2D(h, w, 1.0 / (h * w)); }

Map2D random_positive_map(int h, int w, std::mt19937_64& gen) {
    std::uniform_real_distribution<double> d(0.01, 1.0);
    Map2D m(h, w);
    for (auto& v : m.data)
        v = d(gen);
    return m;
}

Mask random_mask(int h, int w, std::mt19937_64& gen) {
    Mask m(h, w);
    for (auto& v : m.data)
        v = gen() % 2;
    return m;
}

TEST(RegionLoss, UniformQuarterCoverage) {
    EXPECT_DOUBLE_EQ(region_loss(uniform_map(8, 8), box_mask(8, 8, 0, 0, 4, 4)), 0.75);
}

TEST(RegionLoss, ContainedMassGivesZero) {
    Map2D a(8, 8, 0.0);
    a(1, 1) = 0.4;
    a(2, 3) = 0.6;
    EXPECT_EQ(region_loss(a, box_mask(8, 8, 0, 0, 4, 4)), 0.0);
}

TEST(RegionLoss, ScaleInvariant) {
    std::mt19937_64 gen(1);
    for (int i = 0; i < 100; ++i) {
        const auto a = random_positive_map(6, 7, gen);
        const auto m = random_mask(6, 7, gen);
        const double base = region_loss(a, m);
        for (double c : {0.1, 10.0}) {
            Map2D s = a;
            for (auto& v : s.data)
                v *= c;
            EXPECT_NEAR(region_loss(s, m), base, 1e-12);
        }
    }
}

TEST(RegionLoss, BoundedInUnitInterval) {
    std::mt19937_64 gen(2);
    for (int i = 0; i < 50; ++i) {
        const double l = region_loss(random_positive_map(5, 5, gen), random_mask(5, 5, gen));
        EXPECT_GE(l, 0.0);
        EXPECT_LE(l, 1.0);
    }
}

TEST(RegionLoss, GradientMatchesFiniteDifferences) {
    std::mt19937_64 gen(3);
    const auto a = random_positive_map(4, 4, gen);
    const auto m = random_mask(4, 4, gen);
    const auto g = region_loss_grad(a, m);
    const double h = 1e-6;
    for (std::size_t i = 0; i < a.size(); ++i) {
        Map2D p = a, q = a;
        p[i] += h;
        q[i] -= h;
        EXPECT_NEAR(g[i], (region_loss(p, m) - region_loss(q, m)) / (2 * h), 1e-8);
    }
}

TEST(RegionLoss, ContractViolations) {
    EXPECT_THROW(region_loss(Map2D(4, 4, 0.0), Mask(4, 4, 1)), ContractViolation);
    EXPECT_THROW(region_loss(uniform_map(4, 4), Mask(2, 2, 1)), ContractViolation);
}

TEST(Aggregate, AveragesResampledLayers) {
    std::vector<Map2D> layers = {Map2D(2, 2, 1.0), Map2D(4, 4, 3.0)};
    const auto agg = aggregate_attention(layers, 4, 4);
    for (double v : agg.data)
        EXPECT_DOUBLE_EQ(v, 2.0);
}

TEST(GuidedUpdate, ClosedFormAtHalfAlpha) {
    // alpha = 0.5 -> sigma^2 = 1; eta = 1 -> x - grad.
    const auto s = backend::NoiseSchedule::from_alpha_bar({1.0, 0.75, 0.5});
    GuidanceConfig cfg;
    cfg.eta = 1.0;
    const auto x = random_latent(2, 3, 3, 1);
    const auto g = random_latent(2, 3, 3, 2);
    const auto y = guided_update(x, g, 2, s, cfg);
    for (std::size_t i = 0; i < x.size(); ++i)
        EXPECT_EQ(y.data[i], x.data[i] - g.data[i]);
}

TEST(GuidedUpdate, ScalesWithSigmaSquaredAndEta) {
    const auto s = backend::NoiseSchedule::from_alpha_bar({1.0, 0.8});
    GuidanceConfig cfg;
    cfg.eta = 3.0;
    Latent x(1, 1, 1, 1.0), g(1, 1, 1, 0.5);
    EXPECT_NEAR(guided_update(x, g, 1, s, cfg).data[0], 1.0 - (0.2 / 0.8) * 3.0 * 0.5, 1e-15);
    cfg.eta = 0.0;
    EXPECT_EQ(guided_update(x, g, 1, s, cfg), x);
}

TEST(GuidanceWindow, CountsDownFromFirstStep) {
    GuidanceConfig cfg;
    cfg.guidance_fraction = 0.3;
    EXPECT_EQ(guided_steps(0.3, 20), 6);
    EXPECT_EQ(guided_steps(0.3, 50), 15);
    int active = 0;
    for (int t = 1; t <= 20; ++t)
        active += guidance_active(t, 20, cfg);
    EXPECT_EQ(active, 6);
    EXPECT_TRUE(guidance_active(20, 20, cfg));
    EXPECT_TRUE(guidance_active(15, 20, cfg));
    EXPECT_FALSE(guidance_active(14, 20, cfg));
    EXPECT_FALSE(guidance_active(0, 20, cfg));
}

TEST(GuidanceConfig, Validation) {
    GuidanceConfig c;
    EXPECT_NO_THROW(c.validate());
    c.eta = -1;
    EXPECT_THROW(c.validate(), ValidationError);
    c = {};
    c.guidance_fraction = 0;
    EXPECT_THROW(c.validate(), ValidationError);
    c = {};
    c.inner_iterations = 0;
    EXPECT_THROW(c.validate(), ValidationError);
}

TEST(Evaluate, LatentGradientMatchesFiniteDifferences) {
    const backend::ToyDenoiser d(backend::ToyConfig::for_image(64, 64));
    const auto prompt = backend::Prompt::parse("a photo of cat and pot");
    const auto [h, w] = attention_resolution(d);
    std::vector<ObjectTarget> objects = {{{3}, resample_mask(box_mask(64, 64, 32, 32, 32, 32), h, w)},
                                         {{5}, resample_mask(box_mask(64, 64, 0, 0, 32, 64), h, w)}};
    const std::vector<double> weights = {0.7, 0.3};
    const auto x = random_latent(4, 8, 8, 11);
    const int t = 15;
    const auto ev = evaluate(d, x, t, prompt, objects, weights);
    auto loss = [&](const Latent& l) {
        const auto e = evaluate(d, l, t, prompt, objects);
        return (0.7 * e.losses[0] + 0.3 * e.losses[1]) / 1.0;
    };
    const double step = 1e-6;
    for (std::size_t i = 0; i < x.size(); i += 5) {
        auto p = x, m = x;
        p.data[i] += step;
        m.data[i] -= step;
        const double fd = (loss(p) - loss(m)) / (2 * step);
        EXPECT_LT(std::abs(fd - ev.grad.data[i]), 1e-7 + 1e-4 * std::abs(fd)) << i;
    }
    EXPECT_NEAR(ev.total, (ev.losses[0] + ev.losses[1]) / 2, 1e-15);
}

TEST(Optimize, InnerIterationsReduceLossOnToy) {
    const backend::ToyDenoiser d(backend::ToyConfig::for_image(64, 64));
    const auto s = backend::NoiseSchedule::scaled_linear(20);
    const auto prompt = backend::Prompt::parse("a photo of cat");
    const auto objects = relayout::testing::single_object_target(d, box_mask(64, 64, 32, 32, 32, 32));
    const std::vector<double> weights = {1.0};
    GuidanceConfig cfg;
    cfg.eta = 0.05;
    const auto r = optimize_latent(d, random_latent(4, 8, 8, 12), 20, s, prompt, objects, weights, cfg);
    EXPECT_LT(r.loss_after, r.loss_before);
}

}  // namespace
