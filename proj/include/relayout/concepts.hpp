// Copyright (C) 2026 The relayout Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "relayout/backend.hpp"
#include "relayout/tensor.hpp"

namespace relayout::concepts {

/// Mean squared error over masked cells (mask broadcast over channels):
/// sum_u m(u) |noise(u) - predicted(u)|^2 / max(1, C * sum_u m(u)).
/// An all-zero mask returns 0 and logs a warning.
double masked_diffusion_loss(const Latent& noise, const Latent& predicted, const Mask& mask);

/// Gradient of masked_diffusion_loss with respect to `predicted`.
Latent masked_diffusion_loss_grad(const Latent& noise, const Latent& predicted, const Mask& mask);

struct ConceptObject {
    std::string id;
    /// `<id>` style token, unique and outside the base vocabulary.
    std::string placeholder;
    /// Class noun from the layout ("cat"); the embedding is initialised from it.
    std::string class_noun;
    std::vector<double> embedding;

    bool operator==(const ConceptObject&) const = default;
};

struct StageRecord {
    int steps = 0;
    double lr = 0.0;
    /// Training loss per step.
    std::vector<double> losses;

    bool operator==(const StageRecord&) const = default;
};

struct ConceptBundle {
    std::string backend_id;
    std::string prompt_template = "a photo of {token} {noun}";
    std::vector<ConceptObject> objects;
    /// Backend-opaque weight state after stage 2; empty when only stage 1 ran.
    std::vector<std::uint8_t> weights;
    std::uint64_t seed = 0;
    StageRecord stage1;
    StageRecord stage2;
    /// Parameter-name patterns used by stage 2.
    std::vector<std::string> stage2_selector;
    bool stage2_updated_embeddings = false;

    const ConceptObject* find(const std::string& id) const;
    bool operator==(const ConceptBundle&) const = default;
};

std::string placeholder_for(const std::string& object_id);

/// "a photo of <id> noun" under the bundle's template.
backend::Prompt object_prompt(const std::string& prompt_template, const std::string& placeholder,
                              const std::string& noun);

/// Target-branch prompt: "a photo of <v1> cat and <v2> pot".
backend::Prompt joint_prompt(const std::vector<std::string>& phrases);

struct TrainingSet {
    /// Clean image latent.
    Latent x0;
    /// One latent-resolution mask per object, each with at least one cell.
    std::vector<Mask> masks;
    /// One prompt per object; must contain the object's placeholder.
    std::vector<backend::Prompt> prompts;
};

struct TrainConfig {
    int steps = 200;
    double lr = 1e-2;
    std::uint64_t seed = 0;
    /// Stage 2 only: glob patterns over parameter names (`*` and `?`).
    std::vector<std::string> selector = {"*"};
    /// Stage 2 only: also update the placeholder embeddings.
    bool update_embeddings = false;
};

/// Initialise placeholders from class-noun embeddings, register them with the
/// backend, and optimise only the embeddings.
ConceptBundle learn_stage1(backend::Denoiser& denoiser, const std::vector<ConceptObject>& objects,
                           const TrainingSet& data, const backend::NoiseSchedule& schedule, const TrainConfig& cfg);

/// Fine-tunes the selected backend parameters with the same masked loss. The
/// bundle receives the resulting weight state and (if enabled) embeddings.
void learn_stage2(ConceptBundle& bundle, backend::Denoiser& denoiser, const TrainingSet& data,
                  const backend::NoiseSchedule& schedule, const TrainConfig& cfg);

/// Average masked loss over a fixed set of (object, t, noise) draws taken from
/// the "eval" substream of `seed`; independent of the training draws.
double evaluate_masked_loss(const backend::Denoiser& denoiser, const TrainingSet& data,
                            const backend::NoiseSchedule& schedule, std::uint64_t seed, int samples,
                            bool complement = false);

/// Parameter names matched by at least one pattern.
std::vector<std::string> select_parameters(const backend::Denoiser& denoiser,
                                           const std::vector<std::string>& patterns);
bool glob_match(const std::string& pattern, const std::string& text);

/// Registers embeddings and loads weights; throws LoadError when the bundle
/// was produced by a different backend.
void apply_bundle(const ConceptBundle& bundle, backend::Denoiser& denoiser);

void save_bundle(const ConceptBundle& bundle, const std::filesystem::path& dir);
/// Verifies content hashes; with a non-empty `expected_backend` also rejects
/// bundles produced by another backend (LoadError).
ConceptBundle load_bundle(const std::filesystem::path& dir, const std::string& expected_backend = {});
/// Hash of manifest.json, used to reference a bundle from run manifests.
std::string bundle_hash(const std::filesystem::path& dir);

}  // namespace relayout::concepts
