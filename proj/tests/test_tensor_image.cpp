// Copyright (C) 2026 The relayout Authors
// SPDX-License-Identifier: Apache-2.0

#include <random>

#include <gtest/gtest.h>

#include "relayout/hash.hpp"
#include "relayout/image.hpp"
#include "relayout/tensor.hpp"
#include "support.hpp"

using namespace relayout;

namespace {

double dot(const Map2D& a, const Map2D& b) {
    double s = 0;
    for (std::size_t i = 0; i < a.size(); ++i)
        s += a[i] * b[i];
    return s;
}

Map2D random_map(int h, int w, std::mt19937_64& gen) {
    std::uniform_real_distribution<double> d(-1, 1);
    Map2D m(h, w);
    for (auto& v : m.data)
        v = d(gen);
    return m;
}

TEST(Tensor, AreaWeightRowsSumToOne) {
    for (auto [src, dst] : {std::pair{8, 4}, {4, 8}, {7, 3}, {3, 7}, {5, 5}}) {
        const auto w = area_weights(src, dst);
        ASSERT_EQ(w.rows, static_cast<std::size_t>(dst));
        for (std::size_t i = 0; i < w.rows; ++i) {
            double s = 0;
            for (double v : w.row(i))
                s += v;
            EXPECT_NEAR(s, 1.0, 1e-12);
        }
    }
}

TEST(Tensor, AreaResampleAdjointIdentity) {
    std::mt19937_64 gen(3);
    for (auto [h, w, H, W] : {std::array{8, 8, 4, 4}, {6, 9, 4, 3}, {3, 5, 7, 10}}) {
        const auto x = random_map(h, w, gen);
        const auto y = random_map(H, W, gen);
        EXPECT_NEAR(dot(area_resample(x, H, W), y), dot(x, area_resample_adjoint(y, h, w)), 1e-12);
    }
}

TEST(Tensor, PoolAndUpsampleAdjoints) {
    std::mt19937_64 gen(4);
    const auto x = relayout::testing::random_latent(2, 8, 8, 5);
    const auto y = relayout::testing::random_latent(2, 4, 4, 6);
    const auto px = avg_pool(x, 2);
    const auto aty = avg_pool_adjoint(y, 2);
    double lhs = 0, rhs = 0;
    for (std::size_t i = 0; i < px.size(); ++i)
        lhs += px.data[i] * y.data[i];
    for (std::size_t i = 0; i < x.size(); ++i)
        rhs += x.data[i] * aty.data[i];
    EXPECT_NEAR(lhs, rhs, 1e-12);

    const auto m = random_map(3, 3, gen);
    const auto g = random_map(6, 6, gen);
    EXPECT_NEAR(dot(nearest_upsample(m, 2), g), dot(m, nearest_upsample_adjoint(g, 2)), 1e-12);
}

TEST(Tensor, AveragePoolOfConstantIsConstant) {
    Latent l(3, 8, 8, 2.5);
    const auto p = avg_pool(l, 4);
    EXPECT_EQ(p.height, 2);
    for (double v : p.data)
        EXPECT_DOUBLE_EQ(v, 2.5);
}

TEST(Tensor, ResampleMaskThresholdsCoverage) {
    const auto m = relayout::testing::box_mask(8, 8, 0, 0, 4, 8);
    const auto r = resample_mask(m, 2, 2);
    EXPECT_EQ(r(0, 0), 1);
    EXPECT_EQ(r(0, 1), 0);
    EXPECT_EQ(count_nonzero(r), 2u);
}

TEST(Tensor, RowsRoundTrip) {
    const auto l = relayout::testing::random_latent(4, 3, 5, 1);
    EXPECT_EQ(Latent::from_rows(l.to_rows(), 3, 5), l);
}

TEST(Tensor, BilinearResampleSameSizeIsIdentity) {
    const auto l = relayout::testing::random_latent(2, 4, 6, 2);
    EXPECT_LT(max_abs_diff(bilinear_resample(l, 4, 6), l), 1e-12);
}

TEST(Image, PngRoundTrip) {
    relayout::testing::TempDir dir("png");
    Image img(5, 3, 3);
    for (std::size_t i = 0; i < img.pixels.size(); ++i)
        img.pixels[i] = static_cast<std::uint8_t>(i * 7);
    png::write(dir / "a.png", img);
    EXPECT_EQ(png::read(dir / "a.png"), img);

    Grid<std::uint16_t> g(2, 3);
    g(1, 2) = 65535;
    g(0, 1) = 300;
    png::write_gray16(dir / "g.png", g);
    EXPECT_EQ(png::read_gray16(dir / "g.png"), g);
}

TEST(Image, DecodeRejectsGarbage) {
    const std::vector<std::uint8_t> junk = {1, 2, 3, 4, 5};
    EXPECT_THROW(png::decode(junk), DecodeError);
}

TEST(Image, MaskMustBeBinary) {
    Image img(2, 1, 1);
    img.pixels = {0, 255};
    const auto m = mask_from_image(img);
    EXPECT_EQ(m(0, 0), 0);
    EXPECT_EQ(m(0, 1), 1);
    img.pixels[0] = 128;
    EXPECT_THROW(mask_from_image(img), ValidationError);
}

TEST(Hash, KnownSha256Vector) {
    EXPECT_EQ(sha256_hex(std::string_view("abc")),
              "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}

TEST(Hash, LatentHashSeesShapeAndValues) {
    Latent a(1, 2, 2, 1.0), b(1, 4, 1, 1.0);
    EXPECT_NE(sha256_latent(a), sha256_latent(b));
    auto c = a;
    c.data[3] = std::nextafter(1.0, 2.0);
    EXPECT_NE(sha256_latent(a), sha256_latent(c));
    EXPECT_EQ(sha256_latent(a), sha256_latent(Latent(1, 2, 2, 1.0)));
}

TEST(Rng, SubstreamsAreIndependentAndStable) {
    auto a = substream(5, "init");
    auto b = substream(5, "init");
    auto c = substream(5, "lfin");
    const auto va = a();
    EXPECT_EQ(va, b());
    EXPECT_NE(va, c());
}

TEST(Rng, NormalSamplerMoments) {
    NormalSampler n(substream(1, "moments"));
    double s = 0, s2 = 0;
    const int N = 200000;
    for (int i = 0; i < N; ++i) {
        const double v = n();
        s += v;
        s2 += v * v;
    }
    EXPECT_NEAR(s / N, 0.0, 0.01);
    EXPECT_NEAR(s2 / N, 1.0, 0.02);
}

}  // namespace
