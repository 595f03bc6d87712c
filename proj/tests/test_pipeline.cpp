// Copyright (C) 2026 The relayout Authors
// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <fstream>

#include <gtest/gtest.h>

#include "relayout/concepts.hpp"
#include "relayout/hash.hpp"
#include "relayout/pipeline.hpp"
#include "relayout/toy_denoiser.hpp"
#include "support.hpp"

using namespace relayout;
using namespace relayout::pipeline;
using relayout::testing::TempDir;

namespace {

bool has_code(const std::vector<layout::Finding>& fs, const std::string& code) {
    return std::any_of(fs.begin(), fs.end(), [&](const layout::Finding& f) { return f.code == code; });
}

EditInputs inputs_for(const relayout::testing::MoveScene& s) { return {s.image, s.source, s.target, std::nullopt, {}}; }

EditJobSpec quick_spec() {
    EditJobSpec spec;
    spec.guidance.eta = 0.05;
    spec.seed = 3;
    return spec;
}

TEST(Spec, JsonRoundTrip) {
    EditJobSpec s;
    s.source_image = "/a/src.png";
    s.source_layout = "/a/s.json";
    s.target_layout = "/a/t.json";
    s.backend = "toy";
    s.num_steps = 12;
    s.guidance.eta = 0.5;
    s.guidance.alpha_mode = backend::AlphaMode::per_step;
    s.mode = editing::Mode::synchronous;
    s.base = editing::BaseMode::joint;
    s.init = InitMode::lfin;
    s.lfin.blend_lambda = 0.4;
    s.projection.enabled = false;
    s.projection.pca_dims = 16;
    s.projection.feature_layers = {"dec.1.out"};
    s.seed = 77;
    s.output = "/a/out.png";
    const auto j = to_json(s);
    const auto back = spec_from_json(j);
    EXPECT_EQ(to_json(back), j);
    EXPECT_EQ(back.lfin.seed, 77u);
}

TEST(Spec, RelativePathsResolveAgainstBaseDir) {
    const auto s = spec_from_json(nlohmann::json::parse(
                                      R"({"source_image":"in/a.png","source_layout":"s.json","target_layout":"t.json"})"),
                                  "/data/job");
    EXPECT_EQ(s.source_image, std::filesystem::path("/data/job/in/a.png"));
}

TEST(Spec, InitModeNames) {
    for (auto m : {InitMode::random, InitMode::lfin, InitMode::inversion})
        EXPECT_EQ(parse_init_mode(to_string(m)), m);
    EXPECT_THROW(parse_init_mode("warm"), ValidationError);
}

TEST(Validate, ReportsMissingFilesAndRanges) {
    EditJobSpec s;
    s.source_image = "/nonexistent/x.png";
    s.source_layout = "/nonexistent/s.json";
    s.target_layout = "/nonexistent/t.json";
    s.guidance.eta = -2;
    s.backend = "nope";
    const auto fs = validate_spec(s);
    EXPECT_TRUE(has_code(fs, "missing_file"));
    EXPECT_TRUE(has_code(fs, "config_range"));
    EXPECT_TRUE(has_code(fs, "backend"));
}

TEST(Validate, ImageSidesMustBeMultiplesOfEight) {
    auto scene = relayout::testing::move_scene(60, {0, 0, 20, 20}, {30, 30, 20, 20});
    EXPECT_TRUE(has_code(validate_inputs(scene.source, scene.target, {}), "image_size"));
}

TEST(Validate, LayoutErrorsSurface) {
    auto scene = relayout::testing::move_scene();
    scene.target.objects[0].id = "other";
    const auto fs = validate_inputs(scene.source, scene.target, {});
    EXPECT_TRUE(has_errors(fs));
    EXPECT_THROW(edit_layout(inputs_for(scene), quick_spec()), SpecValidationError);
}

TEST(Edit, DeterministicUnderFixedSeed) {
    const auto scene = relayout::testing::move_scene();
    const auto a = edit_layout(inputs_for(scene), quick_spec());
    const auto b = edit_layout(inputs_for(scene), quick_spec());
    EXPECT_EQ(a.final_latent, b.final_latent);
    EXPECT_EQ(a.image, b.image);
    EXPECT_EQ(a.manifest.at("output"), b.manifest.at("output"));
    auto other = quick_spec();
    other.seed = 4;
    EXPECT_NE(edit_layout(inputs_for(scene), other).final_latent, a.final_latent);
}

TEST(Edit, ReducesRegionLossOnToyMove) {
    const auto scene = relayout::testing::move_scene();
    const auto r = edit_layout(inputs_for(scene), quick_spec());
    ASSERT_EQ(r.initial_losses.size(), 1u);
    EXPECT_LT(r.final_losses[0], r.initial_losses[0]);
    EXPECT_EQ(r.trajectory.size(), 20u);
    EXPECT_EQ(r.start_step, 20);
    EXPECT_EQ(r.prompt.text(), "a photo of cat");
}

TEST(Edit, SourceTraceIsNotMutated) {
    const auto scene = relayout::testing::move_scene();
    const auto r = edit_layout(inputs_for(scene), quick_spec());
    const auto& hashes = r.manifest.at("source_trace_sha256");
    ASSERT_EQ(hashes.size(), r.source_trace.size());
    for (std::size_t i = 0; i < hashes.size(); ++i)
        EXPECT_EQ(hashes[i].get<std::string>(), sha256_latent(r.source_trace[i]));
}

TEST(Edit, NoEditReproducesDdimReconstruction) {
    const auto scene = relayout::testing::move_scene(64, {16, 16, 32, 32}, {16, 16, 32, 32});
    EditJobSpec spec;
    spec.init = InitMode::inversion;
    spec.guidance.eta = 0.0;
    spec.projection.enabled = false;
    const auto r = edit_layout(inputs_for(scene), spec);

    // Independent reconstruction with the same backend and prompt.
    const backend::ToyDenoiser d(backend::ToyConfig::for_image(64, 64));
    const auto sched = backend::NoiseSchedule::scaled_linear(20);
    const auto prompt = backend::Prompt::parse("a photo of cat");
    const auto x0 = d.encode(scene.image);
    const auto trace = backend::ddim_invert_trace(d, x0, prompt, sched, 1.0);
    const auto recon = backend::ddim_sample(d, trace.back(), 20, prompt, sched);
    EXPECT_LT(max_abs_diff(r.final_latent, recon), 1e-3);
    EXPECT_LT(max_abs_diff(r.final_latent, x0), 1e-3);
}

TEST(Edit, LfinStartsLaterAndWritesComposite) {
    TempDir dir("lfin");
    const auto scene = relayout::testing::move_scene();
    relayout::testing::write_scene(scene, dir.path());
    auto spec = quick_spec();
    spec.source_image = dir / "source.png";
    spec.source_layout = dir / "source.json";
    spec.target_layout = dir / "target.json";
    spec.init = InitMode::lfin;
    spec.output = dir / "out.png";
    spec.debug_dir = dir / "debug";
    spec.telemetry = dir / "telemetry.csv";
    const auto r = edit_layout(spec);
    EXPECT_EQ(r.start_step, 14);
    EXPECT_EQ(r.trajectory.size(), 14u);
    EXPECT_TRUE(std::filesystem::exists(dir / "debug" / "lfin_composite.png"));
    EXPECT_TRUE(std::filesystem::exists(dir / "debug" / "regions_8x8.png"));
    EXPECT_TRUE(std::filesystem::exists(dir / "out.manifest.json"));
    std::ifstream csv(dir / "telemetry.csv");
    std::string header;
    std::getline(csv, header);
    EXPECT_EQ(header, "index,t,guided,apa,object_id,loss,total_loss,occupancy,fallback_cells,duration_ms");
    int rows = 0;
    for (std::string line; std::getline(csv, line);)
        ++rows;
    EXPECT_EQ(rows, 14 * 2);
}

TEST(Edit, ManifestReproduces) {
    TempDir dir("repro");
    const auto scene = relayout::testing::move_scene();
    relayout::testing::write_scene(scene, dir.path());
    auto spec = quick_spec();
    spec.source_image = dir / "source.png";
    spec.source_layout = dir / "source.json";
    spec.target_layout = dir / "target.json";
    spec.output = dir / "out.png";
    const auto r = edit_layout(spec);
    const auto manifest = nlohmann::json::parse(read_text(dir / "out.manifest.json"));
    EXPECT_EQ(manifest.at("format"), "relayout-run-1");
    EXPECT_EQ(manifest.at("output").at("sha256").get<std::string>(), sha256_file(dir / "out.png"));
    EXPECT_EQ(manifest.at("steps").size(), 20u);
    EXPECT_TRUE(reproduce(manifest, dir / "again.png"));
    EXPECT_EQ(read_file(dir / "again.png"), read_file(dir / "out.png"));
}

TEST(Edit, CancellationStopsBetweenSteps) {
    const auto scene = relayout::testing::move_scene();
    int seen = 0;
    ProgressSink sink;
    sink.on_step = [&](const ProgressEvent& ev) {
        EXPECT_EQ(ev.index, seen + 1);
        seen = ev.index;
    };
    sink.cancelled = [&] { return seen >= 3; };
    EXPECT_THROW(edit_layout(inputs_for(scene), quick_spec(), sink), CancelledError);
    EXPECT_EQ(seen, 3);
}

TEST(Edit, ProgressEventsCarryPreviews) {
    const auto scene = relayout::testing::move_scene();
    std::vector<ProgressEvent> events;
    ProgressSink sink;
    sink.preview_every = 5;
    sink.on_step = [&](const ProgressEvent& ev) { events.push_back(ev); };
    edit_layout(inputs_for(scene), quick_spec(), sink);
    ASSERT_EQ(events.size(), 20u);
    for (const auto& ev : events) {
        EXPECT_EQ(ev.total, 20);
        EXPECT_EQ(ev.preview.has_value(), ev.index % 5 == 0 || ev.t == 1);
        EXPECT_EQ(ev.object_ids, (std::vector<std::string>{"obj"}));
    }
}

TEST(Edit, BundleChangesPromptToPlaceholders) {
    const auto scene = relayout::testing::move_scene();
    LearnConfig lc;
    lc.stage1.steps = 5;
    lc.stage2.steps = 2;
    const auto bundle = learn_concepts(scene.image, scene.source, lc);
    ASSERT_EQ(bundle.objects.size(), 1u);
    EXPECT_EQ(bundle.objects[0].class_noun, "cat");
    auto in = inputs_for(scene);
    in.bundle = bundle;
    const auto r = edit_layout(in, quick_spec());
    EXPECT_EQ(r.prompt.text(), "a photo of <obj> cat");
}

TEST(Learn, RejectsEmptyLatentMask) {
    auto scene = relayout::testing::move_scene();
    scene.source.objects[0].mask = relayout::testing::box_mask(64, 64, 0, 0, 2, 2);
    scene.source.objects[0].bbox = layout::BBox{0, 0, 2, 2};
    EXPECT_THROW(learn_concepts(scene.image, scene.source, {}), ValidationError);
}

TEST(Steps, BackendDefaults) {
    EXPECT_EQ(default_steps("toy"), 20);
    EXPECT_EQ(default_steps("adapter:sd15"), 50);
}

}  // namespace
