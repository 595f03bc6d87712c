// Copyright (C) 2026 The relayout Authors
// SPDX-License-Identifier: Apache-2.0

#include <cmath>

#include <gtest/gtest.h>

#include "relayout/evaluation.hpp"
#include "relayout/pipeline.hpp"
#include "support.hpp"

using namespace relayout;
using namespace relayout::evaluation;
using nlohmann::json;
using relayout::testing::box_mask;
using relayout::testing::TempDir;

namespace {

TEST(Alignment, AttentionInMask) {
    Map2D a(4, 4, 0.0);
    a(0, 0) = 3;
    a(3, 3) = 1;
    EXPECT_DOUBLE_EQ(attention_in_mask(a, box_mask(4, 4, 0, 0, 2, 2)), 0.75);
    EXPECT_EQ(attention_in_mask(Map2D(4, 4, 0.0), box_mask(4, 4, 0, 0, 2, 2)), 0.0);
}

TEST(Alignment, Iou) {
    EXPECT_DOUBLE_EQ(iou(box_mask(4, 4, 0, 0, 2, 2), box_mask(4, 4, 1, 0, 2, 2)), 2.0 / 6.0);
    EXPECT_EQ(iou(Mask(4, 4, 0), Mask(4, 4, 0)), 1.0);
}

TEST(Alignment, SegmentationTakesPrecedence) {
    const auto scene = relayout::testing::move_scene(32, {0, 0, 16, 16}, {16, 16, 16, 16});
    std::map<std::string, Mask> seg{{"obj", box_mask(32, 32, 16, 16, 16, 16)}};
    Map2D att(4, 4, 0.0);
    att(0, 0) = 1;  // all mass outside the target
    const json manifest = {
        {"final", {{"attention", {{"obj", {{"height", 4}, {"width", 4}, {"data", att.data}}}}}}}};
    const auto s = layout_alignment_score(&manifest, &seg, scene.target);
    EXPECT_EQ(s.mode, AlignmentMode::segmentation);
    EXPECT_DOUBLE_EQ(s.score, 1.0);
    const auto a = layout_alignment_score(&manifest, nullptr, scene.target);
    EXPECT_EQ(a.mode, AlignmentMode::attention);
    EXPECT_DOUBLE_EQ(a.score, 0.0);
    EXPECT_THROW(layout_alignment_score(nullptr, nullptr, scene.target), ValidationError);
}

TEST(Embedder, MockIsDeterministicUnitNorm) {
    MockEmbedder e(3);
    Image img(16, 16, 3, 10);
    img.at(2, 3, 1) = 200;
    const auto a = e.embed(img);
    EXPECT_EQ(a, MockEmbedder(3).embed(img));
    double n = 0;
    for (double v : a)
        n += v * v;
    EXPECT_NEAR(n, 1.0, 1e-12);
    EXPECT_NEAR(cosine(a, a), 1.0, 1e-12);
}

TEST(Similarity, IdenticalCropsScoreOne) {
    const auto scene = relayout::testing::move_scene(32, {0, 0, 16, 16}, {16, 16, 16, 16});
    // Edited image: the object painted exactly at the target box.
    Image edited(32, 32, 3, 60);
    for (int y = 0; y < 16; ++y)
        for (int x = 0; x < 16; ++x)
            for (int c = 0; c < 3; ++c)
                edited.at(y + 16, x + 16, c) = scene.image.at(y, x, c);
    MockEmbedder e;
    const auto s = visual_similarity(scene.image, scene.source, edited, scene.target, &e);
    ASSERT_FALSE(s.skipped);
    EXPECT_NEAR(s.mean, 1.0, 1e-12);
}

TEST(Similarity, SkippedWithoutEmbedder) {
    const auto scene = relayout::testing::move_scene(32, {0, 0, 16, 16}, {16, 16, 16, 16});
    const auto s = visual_similarity(scene.image, scene.source, scene.image, scene.target, nullptr);
    EXPECT_TRUE(s.skipped);
    EXPECT_FALSE(s.reason.empty());
}

TEST(Crop, ClipsToImage) {
    Image img(8, 8, 3, 1);
    EXPECT_EQ(crop(img, {6, 6, 4, 4}).width, 2);
    EXPECT_EQ(crop(img, {9, 9, 2, 2}).width, 0);
}

TEST(Summary, PopulationStddevPerMode) {
    std::vector<json> reports = {
        {{"layout_alignment", {{"mode", "attention"}, {"score", 0.2}}}, {"visual_similarity", {{"mean", 0.5}}}},
        {{"layout_alignment", {{"mode", "attention"}, {"score", 0.6}}}, {"visual_similarity", {{"mean", 0.7}}}},
        {{"layout_alignment", {{"mode", "segmentation"}, {"score", 0.9}}},
         {"visual_similarity", {{"status", "SKIPPED"}}}}};
    const auto s = summarize(reports);
    EXPECT_NEAR(s["layout_alignment"]["attention"]["mean"].get<double>(), 0.4, 1e-15);
    EXPECT_NEAR(s["layout_alignment"]["attention"]["stddev"].get<double>(), 0.2, 1e-15);
    EXPECT_EQ(s["layout_alignment"]["segmentation"]["count"], 1);
    EXPECT_NEAR(s["visual_similarity"]["mean"].get<double>(), 0.6, 1e-15);
    EXPECT_NEAR(s["visual_similarity"]["stddev"].get<double>(), 0.1, 1e-15);
}

TEST(Cases, DirectoryOfEditedRuns) {
    TempDir dir("cases");
    const auto scene = relayout::testing::move_scene();
    for (const char* name : {"a", "b"}) {
        const auto cdir = dir / name;
        std::filesystem::create_directories(cdir);
        relayout::testing::write_scene(scene, cdir);
        pipeline::EditJobSpec spec;
        spec.source_image = cdir / "source.png";
        spec.source_layout = cdir / "source.json";
        spec.target_layout = cdir / "target.json";
        spec.output = cdir / "edited.png";
        spec.guidance.eta = 0.05;
        pipeline::edit_layout(spec);
        json cj = {{"source_image", "source.png"},
                   {"source_layout", "source.json"},
                   {"target_layout", "target.json"},
                   {"edited_image", "edited.png"},
                   {"manifest", "edited.manifest.json"}};
        if (std::string(name) == "b") {
            png::write(cdir / "seg_obj.png", mask_to_image(scene.target.objects[0].mask));
            cj["segmentation"] = {{"obj", "seg_obj.png"}};
        }
        write_text(cdir / "case.json", cj.dump());
    }
    std::filesystem::create_directories(dir / "broken");
    write_text(dir / "broken" / "case.json", "{}");

    MockEmbedder e;
    const auto report = evaluate_cases(dir.path(), &e);
    EXPECT_EQ(report["format"], "relayout-eval-1");
    ASSERT_EQ(report["cases"].size(), 3u);
    EXPECT_EQ(report["cases"][0]["layout_alignment"]["mode"], "attention");
    EXPECT_EQ(report["cases"][1]["layout_alignment"]["mode"], "segmentation");
    EXPECT_DOUBLE_EQ(report["cases"][1]["layout_alignment"]["score"].get<double>(), 1.0);
    EXPECT_TRUE(report["cases"][2].contains("error"));
    EXPECT_EQ(report["summary"]["layout_alignment"]["attention"]["count"], 1);

    const auto no_embedder = evaluate_cases(dir.path(), nullptr);
    EXPECT_EQ(no_embedder["cases"][0]["visual_similarity"]["status"], "SKIPPED");
}

}  // namespace
