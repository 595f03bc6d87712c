// Copyright (C) 2026 The relayout Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <optional>

#include "relayout/backend.hpp"
#include "relayout/image.hpp"
#include "relayout/layout.hpp"

namespace relayout::init {

struct LfinConfig {
    double stop_fraction = 0.7;
    double blend_lambda = 0.7;
    std::uint64_t seed = 0;
    /// Blend only inside target masks; outside cells take the random noise.
    bool mask_aware = false;

    void validate() const;
};

/// Blank canvas with every object's masked source pixels mapped into its
/// target bbox (translate + uniform scale); later objects paint on top.
Image composite_image(const Image& source, const layout::LayoutSpec& source_layout,
                      const layout::LayoutSpec& target_layout, std::uint8_t fill = 127);

/// Standard normal latent from the "init" substream of `seed`.
Latent random_latent(const backend::LatentShape& shape, std::uint64_t seed);

/// sqrt(lambda) * inverted + sqrt(1 - lambda) * noise; `mask` (latent
/// resolution) limits the blend to its cells when given.
Latent blend(const Latent& inverted, const Latent& noise, double lambda, const Mask* mask = nullptr);

/// Inverts `composite_latent` to round(stop_fraction * T) and blends it with
/// noise drawn from the "lfin" substream of config.seed.
Latent lfin_noise(const backend::Denoiser& denoiser, const Latent& composite_latent, const backend::Prompt& prompt,
                  const backend::NoiseSchedule& schedule, const LfinConfig& config, const Mask* mask = nullptr);

/// First editing step for an LFIN start: round(stop_fraction * T).
int lfin_start_step(const LfinConfig& config, int num_steps);

}  // namespace relayout::init
