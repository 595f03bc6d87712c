// Copyright (C) 2026 The relayout Authors
// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "relayout/backend.hpp"
#include "relayout/toy_denoiser.hpp"
#include "support.hpp"

using namespace relayout;
using namespace relayout::backend;
using relayout::testing::random_latent;

namespace {

ToyDenoiser toy64() { return ToyDenoiser(ToyConfig::for_image(64, 64)); }

double inner(const Latent& a, const Latent& b) {
    double s = 0;
    for (std::size_t i = 0; i < a.size(); ++i)
        s += a.data[i] * b.data[i];
    return s;
}

double rel_err(double a, double b) {
    const double scale = std::max({std::abs(a), std::abs(b), 1e-9});
    return std::abs(a - b) / scale;
}

TEST(Schedule, ScaledLinearIsValid) {
    const auto s = NoiseSchedule::scaled_linear(20);
    ASSERT_EQ(s.alpha_bar.size(), 21u);
    EXPECT_EQ(s.alpha_bar[0], 1.0);
    for (int t = 1; t <= 20; ++t)
        EXPECT_LT(s.alpha_bar[t], s.alpha_bar[t - 1]);
    EXPECT_NO_THROW(s.validate());
    // sigma^2 = (1 - a) / a
    const double a = s.alpha(7, AlphaMode::cumulative);
    EXPECT_DOUBLE_EQ(s.sigma_squared(7, AlphaMode::cumulative), (1 - a) / a);
    EXPECT_DOUBLE_EQ(s.alpha(7, AlphaMode::per_step), s.alpha_bar[7] / s.alpha_bar[6]);
}

TEST(Schedule, RejectsBadInputs) {
    EXPECT_THROW(NoiseSchedule::scaled_linear(0), ValidationError);
    EXPECT_THROW(NoiseSchedule::from_alpha_bar({1.0, 0.5, 0.7}), ValidationError);
    EXPECT_THROW(NoiseSchedule::from_alpha_bar({0.9, 0.5}), ValidationError);
    const auto s = NoiseSchedule::scaled_linear(5);
    EXPECT_THROW(s.alpha(6, AlphaMode::cumulative), OutOfRangeError);
}

TEST(Ddim, StepInvertsInversionStepForFixedNoise) {
    const auto s = NoiseSchedule::scaled_linear(20);
    const auto x = random_latent(4, 8, 8, 1);
    const auto eps = random_latent(4, 8, 8, 2);
    for (int t = 0; t < 20; ++t) {
        const auto up = ddim_invert_step(x, eps, t, s);
        EXPECT_LT(max_abs_diff(ddim_step(up, eps, t + 1, s), x), 1e-12);
    }
}

TEST(Ddim, StepMatchesClosedForm) {
    const auto s = NoiseSchedule::scaled_linear(10);
    Latent x(1, 1, 1, 0.8), e(1, 1, 1, -0.3);
    const int t = 4;
    const double at = s.alpha_bar[t], ap = s.alpha_bar[t - 1];
    const double x0 = (0.8 - std::sqrt(1 - at) * -0.3) / std::sqrt(at);
    EXPECT_NEAR(ddim_step(x, e, t, s).data[0], std::sqrt(ap) * x0 + std::sqrt(1 - ap) * -0.3, 1e-15);
}

TEST(Ddim, ToyRoundTripAtTwentySteps) {
    const auto d = toy64();
    const auto s = NoiseSchedule::scaled_linear(20);
    const auto prompt = Prompt::parse("a photo of cat");
    const auto x0 = random_latent(4, 8, 8, 3);
    const auto trace = ddim_invert_trace(d, x0, prompt, s, 1.0);
    ASSERT_EQ(trace.size(), 21u);
    EXPECT_LT(max_abs_diff(ddim_sample(d, trace.back(), 20, prompt, s), x0), 1e-4);
}

TEST(Ddim, InversionStepsRounds) {
    EXPECT_EQ(inversion_steps(0.7, 20), 14);
    EXPECT_EQ(inversion_steps(1.0, 50), 50);
    EXPECT_THROW(inversion_steps(0.0, 20), ValidationError);
}

TEST(Toy, PredictionIsDeterministicAndShaped) {
    const auto d = toy64();
    const auto x = random_latent(4, 8, 8, 4);
    const auto p = Prompt::parse("a photo of cat");
    TapConfig taps;
    taps.feature_layers = d.default_feature_taps();
    taps.value_layers = d.self_attention_layers();
    const auto a = d.predict_noise(x, 5, p, taps);
    const auto b = toy64().predict_noise(x, 5, p, taps);
    EXPECT_EQ(a.noise, b.noise);
    EXPECT_TRUE(a.noise.same_shape(x));
    ASSERT_EQ(a.cross_attention.size(), p.tokens.size());
    for (const auto& [pos, maps] : a.cross_attention) {
        ASSERT_EQ(maps.size(), d.cross_attention_layers().size());
        for (const auto& m : maps) {
            double s = 0;
            for (double v : m.data) {
                EXPECT_GE(v, 0.0);
                s += v;
            }
            EXPECT_NEAR(s, 1.0, 1e-12);  // softmax over locations
        }
    }
    for (const auto& id : taps.feature_layers) {
        ASSERT_TRUE(a.features.count(id));
        const auto [h, w] = d.layer_resolution(id);
        EXPECT_EQ(a.features.at(id).height, h);
        EXPECT_EQ(a.features.at(id).width, w);
    }
    EXPECT_EQ(a.values.size(), taps.value_layers.size());
}

TEST(Toy, IdentityInterventionLeavesOutputUnchanged) {
    const auto d = toy64();
    const auto x = random_latent(4, 8, 8, 5);
    const auto p = Prompt::parse("a photo of cat");
    TapConfig taps;
    std::vector<AttentionIntervention> iv;
    for (const auto& layer : d.self_attention_layers())
        iv.push_back({layer, [](const Matrix&, const Matrix&, const Matrix& v, int) { return std::optional<Matrix>(v); }});
    EXPECT_EQ(d.predict_noise(x, 3, p, taps).noise, d.predict_noise(x, 3, p, taps, iv).noise);
}

TEST(Toy, InterventionShapeMismatchIsContractViolation) {
    const auto d = toy64();
    const auto x = random_latent(4, 8, 8, 5);
    std::vector<AttentionIntervention> iv{
        {d.self_attention_layers().front(),
         [](const Matrix&, const Matrix&, const Matrix&, int) { return std::optional<Matrix>(Matrix(1, 1)); }}};
    EXPECT_THROW(d.predict_noise(x, 3, Prompt::parse("a photo of cat"), {}, iv), ContractViolation);
}

TEST(Toy, CrossAttentionVjpMatchesFiniteDifferences) {
    const auto d = toy64();
    const auto x = random_latent(4, 8, 8, 6);
    const auto p = Prompt::parse("a photo of cat");
    const int t = 10;
    std::mt19937_64 gen(7);
    std::normal_distribution<double> nd;
    CrossAttentionGrad up;
    TapConfig taps;
    const auto base = d.predict_noise(x, t, p, taps);
    for (int pos : {1, 3}) {
        for (const auto& m : base.cross_attention.at(pos)) {
            Map2D g(m.height, m.width);
            for (auto& v : g.data)
                v = nd(gen);
            up[pos].push_back(g);
        }
    }
    auto objective = [&](const Latent& l) {
        const auto out = d.predict_noise(l, t, p, taps);
        double s = 0;
        for (const auto& [pos, gs] : up)
            for (std::size_t k = 0; k < gs.size(); ++k)
                for (std::size_t i = 0; i < gs[k].size(); ++i)
                    s += gs[k][i] * out.cross_attention.at(pos)[k][i];
        return s;
    };
    const auto grad = d.cross_attention_vjp(x, t, p, up);
    const double h = 1e-6;
    for (std::size_t i = 0; i < x.size(); i += 7) {
        auto xp = x, xm = x;
        xp.data[i] += h;
        xm.data[i] -= h;
        const double fd = (objective(xp) - objective(xm)) / (2 * h);
        EXPECT_LT(std::abs(fd - grad.data[i]), 1e-6 + 1e-4 * std::abs(fd)) << "coordinate " << i;
    }
}

TEST(Toy, BackwardMatchesFiniteDifferences) {
    auto d = toy64();
    d.set_embedding("<obj>", d.embedding("cat"));
    const auto x = random_latent(4, 8, 8, 8);
    const auto gn = random_latent(4, 8, 8, 9);
    const auto p = Prompt::parse("a photo of <obj> cat");
    const int t = 12;
    const auto g = d.backward(x, t, p, gn);
    auto objective = [&](const ToyDenoiser& m) { return inner(gn, m.predict_noise(x, t, p, {}).noise); };
    const double h = 1e-5;
    std::mt19937_64 gen(10);
    for (const auto& name : d.parameter_names()) {
        ASSERT_TRUE(g.parameters.count(name)) << name;
        const auto& gv = g.parameters.at(name);
        ASSERT_EQ(gv.size(), d.parameter(name).size());
        for (int k = 0; k < 3; ++k) {
            const std::size_t i = gen() % gv.size();
            auto dp = d, dm = d;
            dp.parameter(name)[i] += h;
            dm.parameter(name)[i] -= h;
            const double fd = (objective(dp) - objective(dm)) / (2 * h);
            EXPECT_LT(std::abs(fd - gv[i]), 1e-7 + 1e-4 * std::abs(fd)) << name << "[" << i << "]";
        }
    }
    ASSERT_TRUE(g.embeddings.count("<obj>"));
    const auto e = d.embedding("<obj>");
    for (std::size_t i = 0; i < e.size(); ++i) {
        auto ep = e, em = e;
        ep[i] += h;
        em[i] -= h;
        auto dp = d, dm = d;
        dp.set_embedding("<obj>", ep);
        dm.set_embedding("<obj>", em);
        const double fd = (objective(dp) - objective(dm)) / (2 * h);
        EXPECT_LT(std::abs(fd - g.embeddings.at("<obj>")[i]), 1e-7 + 1e-4 * std::abs(fd)) << "embedding " << i;
    }
}

TEST(Toy, WeightsSerializeRoundTrip) {
    auto a = toy64();
    const auto blob = a.serialize_weights();
    auto b = ToyDenoiser(ToyConfig::for_image(64, 64));
    b.parameter(b.parameter_names().front())[0] += 1.0;
    EXPECT_NE(b.serialize_weights(), blob);
    b.load_weights(blob);
    EXPECT_EQ(b.serialize_weights(), blob);

    auto other = ToyDenoiser(ToyConfig::for_image(32, 32));
    EXPECT_THROW(other.load_weights(blob), LoadError);
}

TEST(Toy, EncodeDecodeRoundTripsFlatColours) {
    const auto d = toy64();
    Image img(64, 64, 3, 100);
    const auto back = d.decode(d.encode(img));
    ASSERT_EQ(back.width, 64);
    for (std::size_t i = 0; i < back.pixels.size(); ++i)
        ASSERT_NEAR(back.pixels[i], 100, 1);
}

TEST(Toy, PlaceholderTokens) {
    auto d = toy64();
    EXPECT_TRUE(is_placeholder_token("<cat1>"));
    EXPECT_FALSE(is_placeholder_token("cat"));
    EXPECT_TRUE(d.in_base_vocabulary("cat"));
    EXPECT_FALSE(d.in_base_vocabulary("<cat1>"));
    EXPECT_EQ(d.embedding("cat").size(), static_cast<std::size_t>(d.embedding_dim()));
}

TEST(Toy, LayerIdsParse) {
    EXPECT_EQ(parse_layer_id("dec.2.self"), (std::pair<int, std::string>{2, "self"}));
    EXPECT_THROW(parse_layer_id("enc.x"), ConfigurationError);
    const auto d = toy64();
    EXPECT_THROW(d.layer_resolution("dec.9.out"), ConfigurationError);
}

TEST(Backend, SelectorErrors) {
    EXPECT_NO_THROW(make_backend("toy", 64, 64));
    EXPECT_THROW(make_backend("adapter:sd15", 64, 64), BackendError);
    EXPECT_THROW(make_backend("bogus", 64, 64), BackendError);
}

}  // namespace
