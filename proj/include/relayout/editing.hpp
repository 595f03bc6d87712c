// Copyright (C) 2026 The relayout Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <span>
#include <string>
#include <vector>

#include "relayout/backend.hpp"
#include "relayout/guidance.hpp"

namespace relayout::editing {

enum class Mode { asynchronous, synchronous };
/// Where background noise comes from: an unguided branch on the shared latent
/// or the latent guided jointly on all objects.
enum class BaseMode { unguided, joint };

inline constexpr int kBaseBranch = -1;

struct BranchResult {
    /// Object index, or kBaseBranch.
    int object = kBaseBranch;
    Latent latent;
    Latent noise;
    /// Branch loss (object loss, or mean loss for joint/synchronous) around the optimisation.
    double loss_before = 0.0;
    double loss_after = 0.0;
    bool guided = false;
};

/// Per cell: index of the branch that owns it, kBaseBranch when no target mask
/// covers it. Overlaps resolve to the last-listed object.
Grid<int> fusion_owners(std::span<const Mask> target_masks, int height, int width);

/// Stitches per-branch fields (noise or latent) by the owner map.
Latent fuse(std::span<const Latent> objects, const Latent& base, const Grid<int>& owners);

/// fuse() applied to branch noises; validates one branch per layout object.
Latent fuse_noise(std::span<const BranchResult> branches, const BranchResult& base,
                  std::span<const Mask> target_masks);

struct EditContext {
    const backend::Denoiser* denoiser = nullptr;
    const backend::NoiseSchedule* schedule = nullptr;
    backend::Prompt prompt;
    /// Guidance targets at attention resolution, in layout order.
    std::vector<guidance::ObjectTarget> objects;
    /// Target masks at latent resolution, in layout order.
    std::vector<Mask> latent_masks;
    guidance::GuidanceConfig guidance;
    Mode mode = Mode::asynchronous;
    BaseMode base = BaseMode::unguided;
    /// Executed steps (guidance predicate horizon); 0 means schedule->num_steps.
    int horizon = 0;
    /// Interventions applied to every branch prediction of a step.
    std::vector<backend::AttentionIntervention> interventions;
};

/// Clone of the shared latent optimised on object `i`'s region loss alone,
/// followed by a noise prediction on the clone.
BranchResult per_object_guidance(const EditContext& ctx, const Latent& shared, int object, int t);

struct StepResult {
    Latent next;
    /// Per-object region loss on the shared latent before any guidance.
    std::vector<double> object_losses;
    double total_loss = 0.0;
    /// Cells owned by each object branch, then the base branch last.
    std::vector<std::size_t> occupancy;
    bool guided = false;
};

/// One denoising step. Asynchronous: per-object branches plus a base branch,
/// latents and noises fused by the target layout, one ddim_step. Synchronous:
/// one latent guided on the mean loss, one prediction, one ddim_step.
StepResult editing_step(const EditContext& ctx, const Latent& shared, int t);

}  // namespace relayout::editing
