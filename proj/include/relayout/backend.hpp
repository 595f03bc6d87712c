// Copyright (C) 2026 The relayout Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "relayout/image.hpp"
#include "relayout/tensor.hpp"

namespace relayout::backend {

/// Which coefficient feeds the guidance scale sigma_t^2 = (1 - a) / a.
enum class AlphaMode { cumulative, per_step };

struct NoiseSchedule {
    int num_steps = 0;
    /// alpha_bar[0] == 1, strictly decreasing, size num_steps + 1.
    std::vector<double> alpha_bar;

    /// Stable-Diffusion style "scaled linear" betas over `train_steps`,
    /// subsampled at `num_steps` evenly spaced timesteps.
    static NoiseSchedule scaled_linear(int num_steps, double beta_start = 0.00085, double beta_end = 0.012,
                                       int train_steps = 1000);
    static NoiseSchedule from_alpha_bar(std::vector<double> alpha_bar);

    double alpha(int t, AlphaMode mode) const;
    double sigma_squared(int t, AlphaMode mode) const;
    void validate() const;
};

struct Prompt {
    std::vector<std::string> tokens;

    static Prompt parse(const std::string& text);
    std::string text() const;
    bool empty() const { return tokens.empty(); }
    /// Positions of `token` in the prompt.
    std::vector<int> positions_of(const std::string& token) const;
};

struct TapConfig {
    bool cross_attention = true;
    /// Token positions whose maps are returned; empty means every token.
    std::vector<int> token_positions;
    /// Feature layer ids (`dec.<block>.out`) to return.
    std::vector<std::string> feature_layers;
    /// Self-attention layer ids (`dec.<block>.self`) whose value arrays are captured.
    std::vector<std::string> value_layers;
};

/// Replaces the value array of one self-attention layer. Receives rows =
/// spatial locations. Returning std::nullopt leaves the layer unchanged.
struct AttentionIntervention {
    std::string layer;
    std::function<std::optional<Matrix>(const Matrix& query, const Matrix& key, const Matrix& value, int t)> apply;
};

struct DenoiserOutput {
    Latent noise;
    /// token position -> one map per cross-attention layer, in cross_attention_layers() order.
    std::map<int, std::vector<Map2D>> cross_attention;
    /// layer id -> features [d, h, w]
    std::map<std::string, Latent> features;
    /// layer id -> value array (locations x channels), before any intervention.
    std::map<std::string, Matrix> values;
};

/// Upstream gradient w.r.t. cross-attention maps: token position -> one map
/// per cross-attention layer (empty maps are skipped).
using CrossAttentionGrad = std::map<int, std::vector<Map2D>>;

struct Gradients {
    std::map<std::string, std::vector<double>> parameters;
    /// Keyed by token string; repeated tokens accumulate.
    std::map<std::string, std::vector<double>> embeddings;
};

struct LatentShape {
    int channels = 0;
    int height = 0;
    int width = 0;
    bool operator==(const LatentShape&) const = default;
};

/// Contract every denoiser adapter implements. Inference entry points are
/// const and must be deterministic for fixed inputs and weights.
class Denoiser {
public:
    virtual ~Denoiser() = default;

    /// Stable identity string; persisted artifacts are keyed by it.
    virtual std::string identity() const = 0;
    virtual LatentShape latent_shape() const = 0;
    virtual int downsample_factor() const = 0;

    virtual std::vector<std::string> self_attention_layers() const = 0;
    virtual std::vector<std::string> cross_attention_layers() const = 0;
    virtual std::vector<std::string> feature_layers() const = 0;
    virtual std::vector<std::string> default_feature_taps() const = 0;
    /// (height, width) of a tapped layer.
    virtual std::pair<int, int> layer_resolution(const std::string& layer) const = 0;

    virtual DenoiserOutput predict_noise(const Latent& latent, int t, const Prompt& prompt, const TapConfig& taps,
                                         std::span<const AttentionIntervention> interventions = {}) const = 0;

    /// Vector-Jacobian product of the cross-attention maps w.r.t. the latent.
    virtual Latent cross_attention_vjp(const Latent& latent, int t, const Prompt& prompt,
                                       const CrossAttentionGrad& upstream) const = 0;

    virtual Latent encode(const Image& image) const = 0;
    virtual Image decode(const Latent& latent) const = 0;

    // Text embeddings.
    virtual int embedding_dim() const = 0;
    virtual bool in_base_vocabulary(const std::string& token) const = 0;
    virtual std::vector<double> embedding(const std::string& token) const = 0;
    /// Registers or overwrites a placeholder token embedding.
    virtual void set_embedding(const std::string& token, std::span<const double> value) = 0;

    // Trainable weights.
    virtual std::vector<std::string> parameter_names() const = 0;
    virtual std::span<double> parameter(const std::string& name) = 0;
    virtual std::span<const double> parameter(const std::string& name) const = 0;
    /// Gradients of <grad_noise, predicted noise> w.r.t. every parameter and
    /// every prompt token embedding.
    virtual Gradients backward(const Latent& latent, int t, const Prompt& prompt, const Latent& grad_noise) const = 0;
    virtual std::vector<std::uint8_t> serialize_weights() const = 0;
    virtual void load_weights(std::span<const std::uint8_t> blob) = 0;
};

Latent ddim_step(const Latent& latent, const Latent& noise, int t, const NoiseSchedule& schedule);
/// Inverse of ddim_step for the same noise: maps x_t to x_{t+1}.
Latent ddim_invert_step(const Latent& latent, const Latent& noise, int t, const NoiseSchedule& schedule);

using DenoisingTrace = std::vector<Latent>;

/// Number of inversion steps for a stop fraction: round(stop_fraction * T).
int inversion_steps(double stop_fraction, int num_steps);

DenoisingTrace ddim_invert_trace(const Denoiser& denoiser, const Latent& x0, const Prompt& prompt,
                                 const NoiseSchedule& schedule, double stop_fraction);

/// Plain deterministic sampling from x_start at step `start` down to 0.
Latent ddim_sample(const Denoiser& denoiser, Latent x_start, int start, const Prompt& prompt,
                   const NoiseSchedule& schedule);

/// Splits `dec.<block>.<kind>` into (block, kind); throws ConfigurationError.
std::pair<int, std::string> parse_layer_id(const std::string& id);

/// `toy` or `adapter:<name>`. Only the toy backend ships; adapters throw BackendError.
std::unique_ptr<Denoiser> make_backend(const std::string& selector, int image_width, int image_height);

}  // namespace relayout::backend
