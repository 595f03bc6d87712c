// Copyright (C) 2026 The relayout Authors
// SPDX-License-Identifier: Apache-2.0

#include "relayout/noise_init.hpp"

#include <cmath>

#include "relayout/errors.hpp"
#include "relayout/rng.hpp"

namespace relayout::init {

void LfinConfig::validate() const {
    if (!(stop_fraction > 0.0 && stop_fraction <= 1.0))
        throw ValidationError("lfin: stop_fraction must lie in (0, 1]");
    if (!(blend_lambda >= 0.0 && blend_lambda <= 1.0))
        throw ValidationError("lfin: blend_lambda must lie in [0, 1]");
}

Image composite_image(const Image& source, const layout::LayoutSpec& source_layout,
                      const layout::LayoutSpec& target_layout, std::uint8_t fill) {
    Image out(source.width, source.height, source.channels, fill);
    for (const auto& tar : target_layout.objects) {
        const auto* src = source_layout.find(tar.id);
        if (!src)
            throw ValidationError("composite: object '" + tar.id + "' missing from the source layout");
        if (!src->mask.same_shape(source.height, source.width))
            throw ValidationError("composite: source mask of '" + tar.id + "' does not match the image");
        const layout::BBox from = layout::bbox_of(src->mask);
        const layout::BBox to = tar.bbox ? *tar.bbox : layout::bbox_of(tar.mask);
        if (to.empty())
            throw ValidationError("composite: target bbox of '" + tar.id + "' has zero area");
        if (from.empty())
            throw ValidationError("composite: source mask of '" + tar.id + "' is empty");
        const auto tr = layout::BoxTransform::between(from, to);
        for (int y = std::max(0, to.y); y < std::min(out.height, to.y + to.h); ++y)
            for (int x = std::max(0, to.x); x < std::min(out.width, to.x + to.w); ++x) {
                int sx = 0, sy = 0;
                if (!tr.source_of(x, y, sx, sy) || !src->mask(sy, sx))
                    continue;
                for (int c = 0; c < out.channels; ++c)
                    out.at(y, x, c) = source.at(sy, sx, c);
            }
    }
    return out;
}

Latent random_latent(const backend::LatentShape& shape, std::uint64_t seed) {
    NormalSampler rng(substream(seed, "init"));
    Latent x(shape.channels, shape.height, shape.width);
    for (auto& v : x.data)
        v = rng();
    return x;
}

Latent blend(const Latent& inverted, const Latent& noise, double lambda, const Mask* mask) {
    if (!inverted.same_shape(noise))
        throw ContractViolation("lfin blend: shapes differ");
    if (!(lambda >= 0.0 && lambda <= 1.0))
        throw ValidationError("lfin blend: lambda must lie in [0, 1]");
    if (mask && !mask->same_shape(inverted.height, inverted.width))
        throw ContractViolation("lfin blend: mask resolution differs from the latent");
    // Exact pass-through at the end points.
    if (lambda == 1.0 && !mask)
        return inverted;
    if (lambda == 0.0)
        return noise;
    const double a = std::sqrt(lambda), b = std::sqrt(1.0 - lambda);
    Latent out = noise;
    for (int c = 0; c < out.channels; ++c)
        for (std::size_t u = 0; u < out.plane(); ++u)
            if (!mask || (*mask)[u])
                out.at(c, u) = lambda == 1.0 ? inverted.at(c, u) : a * inverted.at(c, u) + b * noise.at(c, u);
    return out;
}

Latent lfin_noise(const backend::Denoiser& denoiser, const Latent& composite_latent, const backend::Prompt& prompt,
                  const backend::NoiseSchedule& schedule, const LfinConfig& config, const Mask* mask) {
    config.validate();
    const auto trace = backend::ddim_invert_trace(denoiser, composite_latent, prompt, schedule, config.stop_fraction);
    NormalSampler rng(substream(config.seed, "lfin"));
    Latent noise(composite_latent.channels, composite_latent.height, composite_latent.width);
    for (auto& v : noise.data)
        v = rng();
    return blend(trace.back(), noise, config.blend_lambda, mask);
}

int lfin_start_step(const LfinConfig& config, int num_steps) {
    config.validate();
    return backend::inversion_steps(config.stop_fraction, num_steps);
}

}  // namespace relayout::init
