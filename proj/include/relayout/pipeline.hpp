// Copyright (C) 2026 The relayout Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "relayout/backend.hpp"
#include "relayout/concepts.hpp"
#include "relayout/editing.hpp"
#include "relayout/errors.hpp"
#include "relayout/guidance.hpp"
#include "relayout/image.hpp"
#include "relayout/layout.hpp"
#include "relayout/noise_init.hpp"

namespace relayout::pipeline {

enum class InitMode {
    random,
    lfin,
    /// Start from the end of the source inversion trace (no-edit reconstruction).
    inversion
};

struct ProjectionConfig {
    bool enabled = true;
    int pca_dims = 64;
    /// Refit PCA at every step (otherwise once, at the first step).
    bool pca_per_step = true;
    int band_radius = 4;
    /// APA runs for stop_step <= t <= start_step; start_step < 0 means from the first step.
    int start_step = -1;
    int stop_step = 1;
    std::size_t tile = 256;
    /// Empty: backend defaults.
    std::vector<std::string> feature_layers;
    /// Self-attention layers receiving warped values; empty: all of them.
    std::vector<std::string> apa_layers;
};

struct EditJobSpec {
    std::filesystem::path source_image;
    std::filesystem::path source_layout;
    std::filesystem::path target_layout;
    /// Optional; without a bundle objects are referenced by their token phrase.
    std::filesystem::path concepts;
    std::string backend = "toy";
    /// 0: backend default (20 for the toy backend, 50 otherwise).
    int num_steps = 0;
    guidance::GuidanceConfig guidance;
    editing::Mode mode = editing::Mode::asynchronous;
    editing::BaseMode base = editing::BaseMode::unguided;
    InitMode init = InitMode::random;
    init::LfinConfig lfin;
    ProjectionConfig projection;
    std::uint64_t seed = 0;
    std::filesystem::path output;
    std::filesystem::path debug_dir;
    std::filesystem::path telemetry;
};

nlohmann::json to_json(const EditJobSpec& spec);
/// Relative paths are resolved against `base_dir`.
EditJobSpec spec_from_json(const nlohmann::json& j, const std::filesystem::path& base_dir = {});
EditJobSpec load_spec(const std::filesystem::path& path);

/// Validation failure carrying the individual findings.
class SpecValidationError : public ValidationError {
public:
    explicit SpecValidationError(std::vector<layout::Finding> findings);
    const std::vector<layout::Finding>& findings() const { return findings_; }

private:
    std::vector<layout::Finding> findings_;
};

std::string to_string(InitMode m);
InitMode parse_init_mode(const std::string& s);

/// Findings for a job: layout pairs, file presence, config ranges.
std::vector<layout::Finding> validate_spec(const EditJobSpec& spec);
std::vector<layout::Finding> validate_inputs(const layout::LayoutSpec& source, const layout::LayoutSpec& target,
                                             const EditJobSpec& spec);

struct ProgressEvent {
    /// 1-based, strictly increasing within a run.
    int index = 0;
    int t = 0;
    int total = 0;
    bool guided = false;
    std::vector<std::string> object_ids;
    std::vector<double> losses;
    double total_loss = 0.0;
    std::optional<Image> preview;
};

struct ProgressSink {
    std::function<void(const ProgressEvent&)> on_step;
    /// Polled before every step; true aborts the run with CancelledError.
    std::function<bool()> cancelled;
    /// Decode a preview every N steps (0: never).
    int preview_every = 0;
};

/// Everything edit_layout needs, already loaded.
struct EditInputs {
    Image image;
    layout::LayoutSpec source;
    layout::LayoutSpec target;
    std::optional<concepts::ConceptBundle> bundle;
    /// Input hashes recorded in the manifest.
    nlohmann::json input_hashes = nlohmann::json::object();
};

struct EditResult {
    Image image;
    Latent initial_latent;
    Latent final_latent;
    backend::Prompt prompt;
    int start_step = 0;
    std::vector<double> initial_losses;
    std::vector<double> final_losses;
    /// Shared latent after every step (start-1 ... 0).
    std::vector<Latent> trajectory;
    /// Source inversion trace X_0..X_T.
    backend::DenoisingTrace source_trace;
    nlohmann::json manifest;
};

EditInputs load_inputs(const EditJobSpec& spec);
EditResult edit_layout(const EditInputs& inputs, const EditJobSpec& spec, const ProgressSink& sink = {});
/// Loads inputs, runs, writes the output image, manifest (next to the output
/// as <stem>.manifest.json), telemetry CSV and debug dumps when configured.
EditResult edit_layout(const EditJobSpec& spec, const ProgressSink& sink = {});

/// Re-runs a job from its manifest; true when the output hash matches.
bool reproduce(const nlohmann::json& manifest, const std::filesystem::path& output);

struct LearnConfig {
    concepts::TrainConfig stage1{200, 1e-2, 0, {"*"}, false};
    concepts::TrainConfig stage2{200, 1e-3, 0, {"*"}, false};
    std::string backend = "toy";
    int num_steps = 0;
    std::uint64_t seed = 0;
};

/// Both concept-learning stages on one image and its layout.
concepts::ConceptBundle learn_concepts(const Image& image, const layout::LayoutSpec& layout, const LearnConfig& config);

/// Default number of steps for a backend selector.
int default_steps(const std::string& backend);

}  // namespace relayout::pipeline
