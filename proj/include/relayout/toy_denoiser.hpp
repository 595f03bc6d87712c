// Copyright (C) 2026 The relayout Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <set>

#include "relayout/backend.hpp"

namespace relayout::backend {

struct ToyConfig {
    std::uint64_t seed = 1234;
    int channels = 4;
    int height = 8;
    int width = 8;
    /// Average-pool factor per decoder block; one entry per block.
    std::vector<int> block_pool = {1, 2, 1};
    int embedding_dim = 16;
    int head_dim = 8;
    int feature_dim = 32;

    /// Latent-coupled terms. Their product with the trajectory length bounds
    /// the DDIM inversion round-trip error, so they stay small.
    double skip_gain = 2e-6;
    double self_gain = 2e-6;
    double cross_gain = 2e-6;
    /// Text values routed by a positional field (independent of the latent).
    double text_gain = 1.0;
    double key_std = 2.0;
    double bias_std = 0.2;

    std::set<std::string> vocab = {"a", "photo", "of", "and", "cat", "dog", "pot", "chair", "balloon",
                                   "apple", "cup", "plant", "ball", "box", "object"};

    int num_blocks() const { return static_cast<int>(block_pool.size()); }
    /// Default toy configuration for an image whose sides are multiples of 8.
    static ToyConfig for_image(int image_width, int image_height);
};

/// Deterministic analytic denoiser for desk-scale verification.
///
/// Block b pools the latent by block_pool[b] and divides it by its rms (a
/// one-group norm). Cross-attention for token j is softmax over locations of
/// <k_j, x(u)> / sqrt(C) with k_j = W_k e_j, so maps are differentiable in the
/// latent and in the token embedding. Decoder features are fixed linear maps of
/// the normalised pooled latent.
///
/// The noise prediction is a spatial bias, plus text values routed over a
/// learned positional field, plus small-gain skip / self-attention /
/// cross-attention terms. Only the small-gain terms see the latent, which keeps
/// the predictor a strong contraction.
class ToyDenoiser final : public Denoiser {
public:
    explicit ToyDenoiser(ToyConfig config);

    const ToyConfig& config() const { return config_; }

    std::string identity() const override;
    LatentShape latent_shape() const override { return {config_.channels, config_.height, config_.width}; }
    int downsample_factor() const override { return 8; }

    std::vector<std::string> self_attention_layers() const override;
    std::vector<std::string> cross_attention_layers() const override;
    std::vector<std::string> feature_layers() const override;
    std::vector<std::string> default_feature_taps() const override;
    std::pair<int, int> layer_resolution(const std::string& layer) const override;

    DenoiserOutput predict_noise(const Latent& latent, int t, const Prompt& prompt, const TapConfig& taps,
                                 std::span<const AttentionIntervention> interventions = {}) const override;
    Latent cross_attention_vjp(const Latent& latent, int t, const Prompt& prompt,
                               const CrossAttentionGrad& upstream) const override;

    Latent encode(const Image& image) const override;
    Image decode(const Latent& latent) const override;

    int embedding_dim() const override { return config_.embedding_dim; }
    bool in_base_vocabulary(const std::string& token) const override;
    std::vector<double> embedding(const std::string& token) const override;
    void set_embedding(const std::string& token, std::span<const double> value) override;

    std::vector<std::string> parameter_names() const override;
    std::span<double> parameter(const std::string& name) override;
    std::span<const double> parameter(const std::string& name) const override;
    Gradients backward(const Latent& latent, int t, const Prompt& prompt, const Latent& grad_noise) const override;
    std::vector<std::uint8_t> serialize_weights() const override;
    void load_weights(std::span<const std::uint8_t> blob) override;

    /// Key vector of `token` in the cross-attention of `block` (latent channel space).
    std::vector<double> token_key(const std::string& token, int block) const;

private:
    struct Forward;

    Forward run(const Latent& latent, const Prompt& prompt, std::span<const AttentionIntervention> interventions,
                int t) const;
    const Matrix& param(const std::string& name) const;
    int block_of(const std::string& layer, const std::string& kind) const;

    ToyConfig config_;
    std::map<std::string, Matrix> params_;
    std::map<std::string, std::vector<double>> placeholders_;
    Matrix codec_;      // channels x 3
    Matrix codec_inv_;  // 3 x channels
};

ToyDenoiser make_toy_denoiser(std::uint64_t seed, const std::set<std::string>& vocab, LatentShape shape,
                              int num_layers);

/// True for `<...>` style placeholder tokens.
bool is_placeholder_token(const std::string& token);

}  // namespace relayout::backend
