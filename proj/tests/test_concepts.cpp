// Copyright (C) 2026 The relayout Authors
// SPDX-License-Identifier: Apache-2.0

#include <random>

#include <gtest/gtest.h>

#include "relayout/concepts.hpp"
#include "relayout/hash.hpp"
#include "relayout/toy_denoiser.hpp"
#include "support.hpp"

using namespace relayout;
using namespace relayout::concepts;
using relayout::testing::box_mask;
using relayout::testing::random_latent;

namespace {

TEST(MaskedLoss, MatchesDirectFormula) {
    const auto n = random_latent(3, 4, 4, 1);
    const auto p = random_latent(3, 4, 4, 2);
    const auto m = box_mask(4, 4, 1, 1, 2, 3);
    double s = 0;
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < 4; ++y)
            for (int x = 0; x < 4; ++x)
                if (m(y, x))
                    s += (n.at(c, y, x) - p.at(c, y, x)) * (n.at(c, y, x) - p.at(c, y, x));
    EXPECT_NEAR(masked_diffusion_loss(n, p, m), s / (3.0 * 6.0), 1e-14);
    EXPECT_EQ(masked_diffusion_loss(n, p, Mask(4, 4, 0)), 0.0);
}

TEST(MaskedLoss, InvariantToOutOfMaskPerturbation) {
    std::mt19937_64 gen(3);
    std::normal_distribution<double> nd(0, 10);
    const auto n = random_latent(4, 8, 8, 4);
    const auto p = random_latent(4, 8, 8, 5);
    const auto m = box_mask(8, 8, 2, 2, 3, 4);
    const double base = masked_diffusion_loss(n, p, m);
    for (int trial = 0; trial < 20; ++trial) {
        auto q = p;
        for (int c = 0; c < 4; ++c)
            for (std::size_t u = 0; u < q.plane(); ++u)
                if (!m[u])
                    q.at(c, u) += nd(gen);
        EXPECT_NEAR(masked_diffusion_loss(n, q, m), base, 1e-12);
    }
}

TEST(MaskedLoss, GradientMatchesFiniteDifferences) {
    const auto n = random_latent(2, 3, 3, 6);
    const auto p = random_latent(2, 3, 3, 7);
    const auto m = box_mask(3, 3, 0, 0, 2, 2);
    const auto g = masked_diffusion_loss_grad(n, p, m);
    const double h = 1e-6;
    for (std::size_t i = 0; i < p.size(); ++i) {
        auto a = p, b = p;
        a.data[i] += h;
        b.data[i] -= h;
        EXPECT_NEAR(g.data[i], (masked_diffusion_loss(n, a, m) - masked_diffusion_loss(n, b, m)) / (2 * h), 1e-8);
    }
}

TEST(Glob, Patterns) {
    EXPECT_TRUE(glob_match("*", "dec.0.cross.to_k"));
    EXPECT_TRUE(glob_match("dec.?.cross*", "dec.1.cross.to_v"));
    EXPECT_FALSE(glob_match("dec.?.cross*", "dec.10.cross.to_v"));
    EXPECT_FALSE(glob_match("out.*", "dec.0.self.to_out"));
}

TEST(Prompts, Templates) {
    EXPECT_EQ(object_prompt("a photo of {token} {noun}", "<c1>", "cat").text(), "a photo of <c1> cat");
    EXPECT_EQ(joint_prompt({"<c1> cat", "<p1> pot"}).text(), "a photo of <c1> cat and <p1> pot");
    EXPECT_EQ(placeholder_for("cat1"), "<cat1>");
}

struct ConceptFixture : ::testing::Test {
    backend::ToyDenoiser denoiser{backend::ToyConfig::for_image(64, 64)};
    backend::NoiseSchedule schedule = backend::NoiseSchedule::scaled_linear(20);
    TrainingSet data;
    std::vector<ConceptObject> objects;

    void SetUp() override {
        const auto scene = relayout::testing::move_scene();
        data.x0 = denoiser.encode(scene.image);
        data.masks = {resample_mask(scene.source.objects[0].mask, 8, 8)};
        data.prompts = {object_prompt("a photo of {token} {noun}", "<obj>", "cat")};
        objects = {{"obj", "<obj>", "cat", {}}};
    }
};

TEST_F(ConceptFixture, StageOneLeavesWeightsUntouched) {
    const auto before = denoiser.serialize_weights();
    TrainConfig cfg;
    cfg.steps = 50;
    const auto bundle = learn_stage1(denoiser, objects, data, schedule, cfg);
    EXPECT_EQ(denoiser.serialize_weights(), before);
    EXPECT_TRUE(bundle.weights.empty());
    EXPECT_EQ(bundle.stage1.losses.size(), 50u);
    EXPECT_NE(bundle.objects[0].embedding, denoiser.embedding("cat"));
    EXPECT_EQ(denoiser.embedding("<obj>"), bundle.objects[0].embedding);
}

TEST_F(ConceptFixture, StageTwoWithZeroStepsIsNoOp) {
    TrainConfig s1;
    s1.steps = 10;
    auto bundle = learn_stage1(denoiser, objects, data, schedule, s1);
    const auto weights = denoiser.serialize_weights();
    const auto snapshot = bundle;
    TrainConfig s2;
    s2.steps = 0;
    learn_stage2(bundle, denoiser, data, schedule, s2);
    EXPECT_EQ(denoiser.serialize_weights(), weights);
    EXPECT_EQ(bundle.objects, snapshot.objects);
    EXPECT_TRUE(bundle.weights.empty());
}

TEST_F(ConceptFixture, TrainingDecreasesHeldOutMaskedLoss) {
    // Zero steps only installs the class-noun initialisation of the placeholder.
    learn_stage1(denoiser, objects, data, schedule, TrainConfig{.steps = 0});
    const double before = evaluate_masked_loss(denoiser, data, schedule, 99, 64);
    TrainConfig s1;
    s1.steps = 200;
    auto bundle = learn_stage1(denoiser, objects, data, schedule, s1);
    const double after1 = evaluate_masked_loss(denoiser, data, schedule, 99, 64);
    EXPECT_LT(after1, before);
    TrainConfig s2;
    s2.steps = 200;
    s2.lr = 1e-3;
    learn_stage2(bundle, denoiser, data, schedule, s2);
    EXPECT_LT(evaluate_masked_loss(denoiser, data, schedule, 99, 64), after1);
    EXPECT_FALSE(bundle.weights.empty());
}

TEST_F(ConceptFixture, StageTwoSelectorRestrictsUpdates) {
    auto bundle = learn_stage1(denoiser, objects, data, schedule, TrainConfig{.steps = 5});
    const auto before = denoiser;
    TrainConfig s2;
    s2.steps = 5;
    s2.selector = {"out.bias"};
    learn_stage2(bundle, denoiser, data, schedule, s2);
    for (const auto& name : denoiser.parameter_names()) {
        const auto a = before.parameter(name);
        const auto b = denoiser.parameter(name);
        const bool same = std::equal(a.begin(), a.end(), b.begin(), b.end());
        EXPECT_EQ(same, name != "out.bias") << name;
    }
    s2.selector = {"nothing.*"};
    EXPECT_THROW(learn_stage2(bundle, denoiser, data, schedule, s2), ValidationError);
}

TEST_F(ConceptFixture, PlaceholderRules) {
    auto bad = objects;
    bad[0].placeholder = "cat";
    EXPECT_THROW(learn_stage1(denoiser, bad, data, schedule, {}), ValidationError);
    auto d2 = data;
    d2.masks[0] = Mask(8, 8, 0);
    EXPECT_THROW(learn_stage1(denoiser, objects, d2, schedule, {}), ValidationError);
}

TEST_F(ConceptFixture, BundleRoundTripAndIntegrity) {
    relayout::testing::TempDir dir("bundle");
    auto bundle = learn_stage1(denoiser, objects, data, schedule, TrainConfig{.steps = 5});
    learn_stage2(bundle, denoiser, data, schedule, TrainConfig{.steps = 3, .lr = 1e-3});
    save_bundle(bundle, dir.path());
    EXPECT_EQ(load_bundle(dir.path(), denoiser.identity()), bundle);
    EXPECT_THROW(load_bundle(dir.path(), "other-backend"), LoadError);

    backend::ToyDenoiser fresh(backend::ToyConfig::for_image(64, 64));
    apply_bundle(bundle, fresh);
    EXPECT_EQ(fresh.serialize_weights(), denoiser.serialize_weights());
    EXPECT_EQ(fresh.embedding("<obj>"), bundle.objects[0].embedding);

    backend::ToyDenoiser small(backend::ToyConfig::for_image(32, 32));
    EXPECT_THROW(apply_bundle(bundle, small), LoadError);

    const auto hash = bundle_hash(dir.path());
    EXPECT_EQ(hash, sha256_file(dir / "manifest.json"));
    auto bytes = read_file(dir / "embeddings.bin");
    bytes.back() ^= 1;
    write_file(dir / "embeddings.bin", bytes);
    EXPECT_THROW(load_bundle(dir.path()), LoadError);
}

}  // namespace
