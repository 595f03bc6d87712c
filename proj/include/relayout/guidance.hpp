// Copyright (C) 2026 The relayout Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <span>
#include <vector>

#include "relayout/backend.hpp"
#include "relayout/tensor.hpp"

namespace relayout::guidance {

struct GuidanceConfig {
    /// Guidance scale; 0 disables the latent update.
    double eta = 30.0;
    /// Fraction of steps, counted down from the first editing step, that are guided.
    double guidance_fraction = 0.3;
    int inner_iterations = 3;
    backend::AlphaMode alpha_mode = backend::AlphaMode::cumulative;

    void validate() const;
};

/// Area-resamples each layer map to (height, width) and averages them.
Map2D aggregate_attention(std::span<const Map2D> layers, int height, int width);

/// 1 - (attention mass inside mask) / (total mass).
double region_loss(const Map2D& attention, const Mask& mask);
/// d region_loss / d attention.
Map2D region_loss_grad(const Map2D& attention, const Mask& mask);

double total_region_loss(std::span<const double> losses);

/// x - sigma_t^2 * eta * grad with sigma_t^2 = (1 - alpha_t) / alpha_t.
Latent guided_update(const Latent& latent, const Latent& grad, int t, const backend::NoiseSchedule& schedule,
                     const GuidanceConfig& config);

/// Number of guided steps: floor(fraction * num_steps).
int guided_steps(double fraction, int num_steps);
/// True for the first guided_steps() steps counted down from num_steps,
/// i.e. t > num_steps - guided_steps(). Pass the number of executed steps as
/// `num_steps` when sampling starts below T.
bool guidance_active(int t, int num_steps, const GuidanceConfig& config);
bool guidance_active(int t, const backend::NoiseSchedule& schedule, const GuidanceConfig& config);

/// One object's view of the target prompt and layout.
struct ObjectTarget {
    /// Prompt positions of the object's tokens; multi-token phrases use the
    /// elementwise max of the per-token maps.
    std::vector<int> token_positions;
    /// Target mask at the attention resolution.
    Mask mask;
};

/// Coarsest cross-attention resolution of the backend.
std::pair<int, int> attention_resolution(const backend::Denoiser& denoiser);

/// Aggregated map for one object from a predict_noise output.
Map2D object_attention(const backend::DenoiserOutput& out, const ObjectTarget& object, int height, int width);

struct LossEvaluation {
    std::vector<double> losses;
    double total = 0.0;
    /// Gradient of the weighted mean of object losses w.r.t. the latent.
    Latent grad;
};

/// Per-object region losses at `latent`. When `weights` is non-empty the
/// gradient of sum_i weights[i] * loss_i / sum_i weights[i] is returned too.
LossEvaluation evaluate(const backend::Denoiser& denoiser, const Latent& latent, int t, const backend::Prompt& prompt,
                        std::span<const ObjectTarget> objects, std::span<const double> weights = {});

struct OptimizeResult {
    Latent latent;
    /// Weighted loss before the first and after the last inner iteration.
    double loss_before = 0.0;
    double loss_after = 0.0;
    std::vector<double> object_losses_before;
};

/// inner_iterations rounds of guided_update, each recomputing attention.
OptimizeResult optimize_latent(const backend::Denoiser& denoiser, const Latent& latent, int t,
                               const backend::NoiseSchedule& schedule, const backend::Prompt& prompt,
                               std::span<const ObjectTarget> objects, std::span<const double> weights,
                               const GuidanceConfig& config);

}  // namespace relayout::guidance
