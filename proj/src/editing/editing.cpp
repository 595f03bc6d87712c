// Copyright (C) 2026 The relayout Authors
// SPDX-License-Identifier: Apache-2.0

#include "relayout/editing.hpp"

#include "relayout/errors.hpp"

namespace relayout::editing {

using backend::ddim_step;

Grid<int> fusion_owners(std::span<const Mask> target_masks, int height, int width) {
    Grid<int> owners(height, width, kBaseBranch);
    for (std::size_t i = 0; i < target_masks.size(); ++i) {
        if (!target_masks[i].same_shape(height, width))
            throw ContractViolation("fusion: target mask resolution differs from the latent");
        for (std::size_t u = 0; u < owners.size(); ++u)
            if (target_masks[i][u])
                owners[u] = static_cast<int>(i);
    }
    return owners;
}

Latent fuse(std::span<const Latent> objects, const Latent& base, const Grid<int>& owners) {
    if (!owners.same_shape(base.height, base.width))
        throw ContractViolation("fusion: owner map resolution differs from the latent");
    for (const auto& o : objects)
        if (!o.same_shape(base))
            throw ContractViolation("fusion: branch shapes differ");
    Latent out = base;
    for (std::size_t u = 0; u < owners.size(); ++u) {
        const int k = owners[u];
        if (k == kBaseBranch)
            continue;
        if (k < 0 || static_cast<std::size_t>(k) >= objects.size())
            throw ContractViolation("fusion: owner refers to a missing branch");
        for (int c = 0; c < base.channels; ++c)
            out.at(c, u) = objects[static_cast<std::size_t>(k)].at(c, u);
    }
    return out;
}

Latent fuse_noise(std::span<const BranchResult> branches, const BranchResult& base, std::span<const Mask> target_masks) {
    if (base.object != kBaseBranch)
        throw ContractViolation("fuse_noise: base branch expected");
    if (branches.size() != target_masks.size())
        throw ContractViolation("fuse_noise: missing branch for a layout object");
    std::vector<Latent> noises;
    for (std::size_t i = 0; i < branches.size(); ++i) {
        if (branches[i].object != static_cast<int>(i))
            throw ContractViolation("fuse_noise: branches must follow layout order");
        noises.push_back(branches[i].noise);
    }
    return fuse(noises, base.noise, fusion_owners(target_masks, base.noise.height, base.noise.width));
}

namespace {

int horizon(const EditContext& ctx) { return ctx.horizon > 0 ? ctx.horizon : ctx.schedule->num_steps; }

bool active(const EditContext& ctx, int t) {
    return !ctx.objects.empty() && ctx.guidance.eta > 0.0 && guidance::guidance_active(t, horizon(ctx), ctx.guidance);
}

Latent predict(const EditContext& ctx, const Latent& x, int t) {
    backend::TapConfig taps;
    taps.cross_attention = false;
    return ctx.denoiser->predict_noise(x, t, ctx.prompt, taps, ctx.interventions).noise;
}

BranchResult optimised_branch(const EditContext& ctx, const Latent& shared, int object, std::vector<double> weights,
                              int t) {
    BranchResult b;
    b.object = object;
    const auto r = guidance::optimize_latent(*ctx.denoiser, shared, t, *ctx.schedule, ctx.prompt, ctx.objects,
                                             weights, ctx.guidance);
    b.latent = r.latent;
    b.loss_before = r.loss_before;
    b.loss_after = r.loss_after;
    b.guided = true;
    b.noise = predict(ctx, b.latent, t);
    return b;
}

}  // namespace

BranchResult per_object_guidance(const EditContext& ctx, const Latent& shared, int object, int t) {
    if (object < 0 || static_cast<std::size_t>(object) >= ctx.objects.size())
        throw ContractViolation("per_object_guidance: object index out of range");
    if (!active(ctx, t)) {
        BranchResult b;
        b.object = object;
        b.latent = shared;
        b.noise = predict(ctx, shared, t);
        return b;
    }
    std::vector<double> weights(ctx.objects.size(), 0.0);
    weights[static_cast<std::size_t>(object)] = 1.0;
    return optimised_branch(ctx, shared, object, std::move(weights), t);
}

StepResult editing_step(const EditContext& ctx, const Latent& shared, int t) {
    if (!ctx.denoiser || !ctx.schedule)
        throw ContractViolation("editing_step: context is missing the backend or schedule");
    if (t < 1)
        throw OutOfRangeError("editing_step: t must be >= 1");
    if (ctx.latent_masks.size() != ctx.objects.size())
        throw ContractViolation("editing_step: one latent mask per object");

    StepResult r;
    if (!ctx.objects.empty()) {
        const auto ev = guidance::evaluate(*ctx.denoiser, shared, t, ctx.prompt, ctx.objects);
        r.object_losses = ev.losses;
        r.total_loss = ev.total;
    }
    const Grid<int> owners = fusion_owners(ctx.latent_masks, shared.height, shared.width);
    r.occupancy.assign(ctx.objects.size() + 1, 0);
    for (std::size_t u = 0; u < owners.size(); ++u)
        ++r.occupancy[owners[u] == kBaseBranch ? ctx.objects.size() : static_cast<std::size_t>(owners[u])];

    r.guided = active(ctx, t);
    if (!r.guided) {
        // Every branch sees the same latent, prompt and interventions.
        r.next = ddim_step(shared, predict(ctx, shared, t), t, *ctx.schedule);
        return r;
    }

    const std::vector<double> uniform(ctx.objects.size(), 1.0);
    if (ctx.mode == Mode::synchronous) {
        const auto b = optimised_branch(ctx, shared, kBaseBranch, uniform, t);
        r.next = ddim_step(b.latent, b.noise, t, *ctx.schedule);
        return r;
    }

    std::vector<BranchResult> branches;
    for (int i = 0; i < static_cast<int>(ctx.objects.size()); ++i)
        branches.push_back(per_object_guidance(ctx, shared, i, t));
    BranchResult base;
    if (ctx.base == BaseMode::joint) {
        base = optimised_branch(ctx, shared, kBaseBranch, uniform, t);
    } else {
        base.latent = shared;
        base.noise = predict(ctx, shared, t);
    }
    std::vector<Latent> latents;
    for (const auto& b : branches)
        latents.push_back(b.latent);
    const Latent fused_latent = fuse(latents, base.latent, owners);
    const Latent fused_noise = fuse_noise(branches, base, ctx.latent_masks);
    r.next = ddim_step(fused_latent, fused_noise, t, *ctx.schedule);
    return r;
}

}  // namespace relayout::editing
