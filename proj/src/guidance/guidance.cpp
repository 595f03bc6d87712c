// Copyright (C) 2026 The relayout Authors
// SPDX-License-Identifier: Apache-2.0

#include "relayout/guidance.hpp"

#include <cmath>
#include <limits>

#include "relayout/errors.hpp"

namespace relayout::guidance {

using backend::Denoiser;
using backend::NoiseSchedule;

void GuidanceConfig::validate() const {
    if (!(eta >= 0.0) || !std::isfinite(eta))
        throw ValidationError("guidance: eta must be finite and >= 0");
    if (!(guidance_fraction > 0.0 && guidance_fraction <= 1.0))
        throw ValidationError("guidance: guidance_fraction must lie in (0, 1]");
    if (inner_iterations < 1)
        throw ValidationError("guidance: inner_iterations must be >= 1");
}

Map2D aggregate_attention(std::span<const Map2D> layers, int height, int width) {
    if (layers.empty())
        throw ValidationError("aggregate_attention: no layer maps");
    Map2D out(height, width, 0.0);
    for (const auto& l : layers) {
        const Map2D r = area_resample(l, height, width);
        for (std::size_t i = 0; i < out.size(); ++i)
            out[i] += r[i];
    }
    for (auto& v : out.data)
        v /= static_cast<double>(layers.size());
    return out;
}

double region_loss(const Map2D& attention, const Mask& mask) {
    if (!mask.same_shape(attention.height, attention.width))
        throw ContractViolation("region_loss: mask resolution differs from the attention map");
    double inside = 0.0, total = 0.0;
    for (std::size_t u = 0; u < attention.size(); ++u) {
        total += attention[u];
        if (mask[u])
            inside += attention[u];
    }
    if (!(total > 0.0))
        throw ContractViolation("region_loss: attention map has no mass");
    return 1.0 - inside / total;
}

Map2D region_loss_grad(const Map2D& attention, const Mask& mask) {
    if (!mask.same_shape(attention.height, attention.width))
        throw ContractViolation("region_loss: mask resolution differs from the attention map");
    double inside = 0.0, total = 0.0;
    for (std::size_t u = 0; u < attention.size(); ++u) {
        total += attention[u];
        if (mask[u])
            inside += attention[u];
    }
    if (!(total > 0.0))
        throw ContractViolation("region_loss: attention map has no mass");
    Map2D g(attention.height, attention.width);
    for (std::size_t u = 0; u < attention.size(); ++u)
        g[u] = (inside - (mask[u] ? total : 0.0)) / (total * total);
    return g;
}

double total_region_loss(std::span<const double> losses) {
    if (losses.empty())
        throw ValidationError("total_region_loss: empty list");
    double s = 0.0;
    for (double l : losses)
        s += l;
    return s / static_cast<double>(losses.size());
}

Latent guided_update(const Latent& latent, const Latent& grad, int t, const NoiseSchedule& schedule,
                     const GuidanceConfig& config) {
    if (!latent.same_shape(grad))
        throw ContractViolation("guided_update: gradient shape differs from latent");
    const double step = schedule.sigma_squared(t, config.alpha_mode) * config.eta;
    Latent out = latent;
    for (std::size_t i = 0; i < out.size(); ++i)
        out.data[i] -= step * grad.data[i];
    return out;
}

int guided_steps(double fraction, int num_steps) {
    // Tolerance keeps fraction * T exact for values such as 0.3 * 20.
    return static_cast<int>(std::floor(fraction * num_steps + 1e-9));
}

bool guidance_active(int t, int num_steps, const GuidanceConfig& config) {
    if (t < 0 || t > num_steps)
        throw OutOfRangeError("guidance_active: t outside [0, T]");
    return t >= 1 && t > num_steps - guided_steps(config.guidance_fraction, num_steps);
}

bool guidance_active(int t, const NoiseSchedule& schedule, const GuidanceConfig& config) {
    return guidance_active(t, schedule.num_steps, config);
}

std::pair<int, int> attention_resolution(const Denoiser& denoiser) {
    const auto layers = denoiser.cross_attention_layers();
    if (layers.empty())
        throw ConfigurationError("backend exposes no cross-attention layers");
    auto best = denoiser.layer_resolution(layers.front());
    for (const auto& l : layers) {
        const auto r = denoiser.layer_resolution(l);
        if (static_cast<long>(r.first) * r.second < static_cast<long>(best.first) * best.second)
            best = r;
    }
    return best;
}

namespace {

const std::vector<Map2D>& maps_for(const backend::DenoiserOutput& out, int pos) {
    const auto it = out.cross_attention.find(pos);
    if (it == out.cross_attention.end())
        throw ContractViolation("no cross-attention maps for token position " + std::to_string(pos));
    return it->second;
}

/// Aggregated map per token of the object plus the elementwise max.
struct ObjectMaps {
    std::vector<Map2D> per_token;
    Map2D combined;
    /// Index into per_token that supplied each cell of `combined`.
    std::vector<int> winner;
};

ObjectMaps object_maps(const backend::DenoiserOutput& out, const ObjectTarget& object, int h, int w) {
    if (object.token_positions.empty())
        throw ValidationError("object has no prompt tokens");
    ObjectMaps m;
    for (int pos : object.token_positions)
        m.per_token.push_back(aggregate_attention(maps_for(out, pos), h, w));
    m.combined = m.per_token.front();
    m.winner.assign(m.combined.size(), 0);
    for (std::size_t k = 1; k < m.per_token.size(); ++k)
        for (std::size_t u = 0; u < m.combined.size(); ++u)
            if (m.per_token[k][u] > m.combined[u]) {
                m.combined[u] = m.per_token[k][u];
                m.winner[u] = static_cast<int>(k);
            }
    return m;
}

}  // namespace

Map2D object_attention(const backend::DenoiserOutput& out, const ObjectTarget& object, int height, int width) {
    return object_maps(out, object, height, width).combined;
}

LossEvaluation evaluate(const Denoiser& denoiser, const Latent& latent, int t, const backend::Prompt& prompt,
                        std::span<const ObjectTarget> objects, std::span<const double> weights) {
    if (!weights.empty() && weights.size() != objects.size())
        throw ContractViolation("evaluate: one weight per object");
    const auto [h, w] = attention_resolution(denoiser);
    backend::TapConfig taps;
    for (const auto& o : objects)
        taps.token_positions.insert(taps.token_positions.end(), o.token_positions.begin(), o.token_positions.end());
    if (taps.token_positions.empty())
        taps.cross_attention = false;
    const auto out = denoiser.predict_noise(latent, t, prompt, taps);

    LossEvaluation ev;
    std::vector<ObjectMaps> maps;
    for (const auto& o : objects) {
        maps.push_back(object_maps(out, o, h, w));
        ev.losses.push_back(region_loss(maps.back().combined, o.mask));
    }
    ev.total = objects.empty() ? 0.0 : total_region_loss(ev.losses);
    if (weights.empty())
        return ev;

    double wsum = 0.0;
    for (double v : weights)
        wsum += v;
    if (!(wsum > 0.0))
        throw ContractViolation("evaluate: weights must have a positive sum");

    backend::CrossAttentionGrad upstream;
    for (std::size_t i = 0; i < objects.size(); ++i) {
        if (weights[i] == 0.0)
            continue;
        Map2D g = region_loss_grad(maps[i].combined, objects[i].mask);
        for (auto& v : g.data)
            v *= weights[i] / wsum;
        for (std::size_t k = 0; k < objects[i].token_positions.size(); ++k) {
            Map2D gk(h, w, 0.0);
            for (std::size_t u = 0; u < g.size(); ++u)
                if (maps[i].winner[u] == static_cast<int>(k))
                    gk[u] = g[u];
            const int pos = objects[i].token_positions[k];
            auto& per_layer = upstream[pos];
            const auto& raw = maps_for(out, pos);
            if (per_layer.empty())
                for (const auto& r : raw)
                    per_layer.emplace_back(r.height, r.width, 0.0);
            for (std::size_t l = 0; l < raw.size(); ++l) {
                const Map2D back = area_resample_adjoint(gk, raw[l].height, raw[l].width);
                for (std::size_t u = 0; u < back.size(); ++u)
                    per_layer[l][u] += back[u] / static_cast<double>(raw.size());
            }
        }
    }
    ev.grad = denoiser.cross_attention_vjp(latent, t, prompt, upstream);
    return ev;
}

OptimizeResult optimize_latent(const Denoiser& denoiser, const Latent& latent, int t, const NoiseSchedule& schedule,
                               const backend::Prompt& prompt, std::span<const ObjectTarget> objects,
                               std::span<const double> weights, const GuidanceConfig& config) {
    auto weighted = [&](const LossEvaluation& ev) {
        double s = 0.0, ws = 0.0;
        for (std::size_t i = 0; i < ev.losses.size(); ++i) {
            s += weights[i] * ev.losses[i];
            ws += weights[i];
        }
        return ws > 0.0 ? s / ws : 0.0;
    };
    OptimizeResult r;
    r.latent = latent;
    for (int it = 0; it < config.inner_iterations; ++it) {
        const auto ev = evaluate(denoiser, r.latent, t, prompt, objects, weights);
        if (it == 0) {
            r.loss_before = weighted(ev);
            r.object_losses_before = ev.losses;
        }
        r.latent = guided_update(r.latent, ev.grad, t, schedule, config);
    }
    r.loss_after = weighted(evaluate(denoiser, r.latent, t, prompt, objects));
    return r;
}

}  // namespace relayout::guidance
