// Copyright (C) 2026 The relayout Authors
// SPDX-License-Identifier: Apache-2.0

#include "relayout/toy_denoiser.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>

#include "relayout/errors.hpp"
#include "relayout/kernels.hpp"
#include "relayout/rng.hpp"

namespace relayout::backend {

namespace {

constexpr char kWeightsMagic[8] = {'R', 'L', 'T', 'O', 'Y', 'W', '0', '1'};

std::string block_name(int b, const char* kind) { return "dec." + std::to_string(b) + "." + kind; }

void fill_normal(Matrix& m, NormalSampler& rng, double std) {
    for (auto& v : m.data)
        v = rng() * std;
}

double dot(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i)
        s += a[i] * b[i];
    return s;
}

/// Divides by the root mean square of all entries; returns that rms.
double rms_normalize(Matrix& m) {
    double ss = 0.0;
    for (double v : m.data)
        ss += v * v;
    const double r = std::sqrt(ss / static_cast<double>(m.data.size()) + 1e-8);
    for (double& v : m.data)
        v /= r;
    return r;
}

void softmax_inplace(std::vector<double>& s) {
    const double mx = *std::max_element(s.begin(), s.end());
    double sum = 0.0;
    for (auto& v : s) {
        v = std::exp(v - mx);
        sum += v;
    }
    for (auto& v : s)
        v /= sum;
}

template <typename T>
void put(std::vector<std::uint8_t>& out, const T& v) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
    out.insert(out.end(), p, p + sizeof(T));
}

template <typename T>
T take(std::span<const std::uint8_t> in, std::size_t& off) {
    if (off + sizeof(T) > in.size())
        throw LoadError("toy weights: truncated blob");
    T v;
    std::memcpy(&v, in.data() + off, sizeof(T));
    off += sizeof(T);
    return v;
}

}  // namespace

bool is_placeholder_token(const std::string& token) {
    return token.size() >= 3 && token.front() == '<' && token.back() == '>';
}

ToyConfig ToyConfig::for_image(int image_width, int image_height) {
    if (image_width <= 0 || image_height <= 0 || image_width % 8 || image_height % 8)
        throw BackendError("toy backend needs image sides that are positive multiples of 8");
    ToyConfig c;
    c.height = image_height / 8;
    c.width = image_width / 8;
    if (c.height % 2 || c.width % 2)
        c.block_pool = {1, 1, 1};
    return c;
}

struct ToyDenoiser::Forward {
    int n_tokens = 0;
    Matrix x_rows;                                          // N x C
    std::vector<Matrix> pooled;                             // [b] N_b x C, rms-normalised
    std::vector<double> pool_rms;                           // [b]
    std::vector<std::vector<double>> emb;                   // [j] E
    std::vector<std::vector<double>> text_value;            // [j] C
    std::vector<std::vector<std::vector<double>>> keys;     // [b][j] C
    std::vector<std::vector<std::vector<double>>> attn;     // [b][j] N_b
    std::vector<std::vector<double>> route_keys;            // [j] C
    std::vector<std::vector<double>> route;                 // [j] N
    std::vector<Matrix> q, k, v, v_used, probs, o;          // [b]
    Matrix eps_rows;                                        // N x C
};

ToyDenoiser::ToyDenoiser(ToyConfig config) : config_(std::move(config)) {
    const int C = config_.channels, E = config_.embedding_dim, D = config_.head_dim, F = config_.feature_dim;
    if (C < 3 || E < 1 || D < 1 || F < 1 || config_.block_pool.empty())
        throw ConfigurationError("toy denoiser: invalid dimensions");
    for (int p : config_.block_pool)
        if (p < 1 || config_.height % p || config_.width % p)
            throw ConfigurationError("toy denoiser: block pool factor must divide the latent size");
    for (const auto& w : config_.vocab)
        if (is_placeholder_token(w))
            throw ConfigurationError("toy denoiser: base vocabulary may not contain placeholder-style tokens");

    NormalSampler rng(substream(config_.seed, "toy-weights"));
    const auto N = static_cast<std::size_t>(config_.height) * config_.width;
    for (int b = 0; b < config_.num_blocks(); ++b) {
        Matrix wk(C, E), wq(C, D), wks(C, D), wv(C, D), wo(D, C), proj(C, F);
        fill_normal(wk, rng, config_.key_std);
        fill_normal(wq, rng, 1.0 / std::sqrt(C));
        fill_normal(wks, rng, 1.0 / std::sqrt(C));
        fill_normal(wv, rng, 1.0 / std::sqrt(C));
        fill_normal(wo, rng, 1.0 / std::sqrt(D));
        fill_normal(proj, rng, 1.0 / std::sqrt(C));
        params_[block_name(b, "cross.to_k")] = std::move(wk);
        params_[block_name(b, "self.to_q")] = std::move(wq);
        params_[block_name(b, "self.to_k")] = std::move(wks);
        params_[block_name(b, "self.to_v")] = std::move(wv);
        params_[block_name(b, "self.to_out")] = std::move(wo);
        params_[block_name(b, "out.proj")] = std::move(proj);
    }
    Matrix text(E, C), route_k(C, E), pos(N, C), skip(C, C), bias(N, C);
    fill_normal(text, rng, 0.5 / std::sqrt(E));
    fill_normal(route_k, rng, config_.key_std);
    fill_normal(pos, rng, 1.0);
    fill_normal(skip, rng, 1.0 / std::sqrt(C));
    fill_normal(bias, rng, config_.bias_std);
    params_["text.to_v"] = std::move(text);
    params_["text.to_k"] = std::move(route_k);
    params_["text.pos"] = std::move(pos);
    params_["out.skip"] = std::move(skip);
    params_["out.bias"] = std::move(bias);

    // Image codec: RGB -> latent channels, plus its least-squares inverse.
    codec_ = Matrix(C, 3);
    for (int c = 0; c < C; ++c)
        for (int k = 0; k < 3; ++k)
            codec_(c, k) = c < 3 ? (c == k ? 1.0 : 0.0) : ((c % 2 ? 1.0 : -1.0) / 3.0);
    Eigen::MatrixXd e(C, 3);
    for (int c = 0; c < C; ++c)
        for (int k = 0; k < 3; ++k)
            e(c, k) = codec_(c, k);
    const Eigen::MatrixXd pinv = (e.transpose() * e).inverse() * e.transpose();
    codec_inv_ = Matrix(3, C);
    for (int k = 0; k < 3; ++k)
        for (int c = 0; c < C; ++c)
            codec_inv_(k, c) = pinv(k, c);
}

std::string ToyDenoiser::identity() const {
    std::ostringstream s;
    s << "toy-v2;seed=" << config_.seed << ";c=" << config_.channels << ";h=" << config_.height
      << ";w=" << config_.width << ";e=" << config_.embedding_dim << ";pool=";
    for (std::size_t i = 0; i < config_.block_pool.size(); ++i)
        s << (i ? "," : "") << config_.block_pool[i];
    s << ";gains=" << config_.skip_gain << "," << config_.self_gain << "," << config_.cross_gain << ","
      << config_.text_gain;
    return s.str();
}

std::vector<std::string> ToyDenoiser::self_attention_layers() const {
    std::vector<std::string> out;
    for (int b = 0; b < config_.num_blocks(); ++b)
        out.push_back(block_name(b, "self"));
    return out;
}

std::vector<std::string> ToyDenoiser::cross_attention_layers() const {
    std::vector<std::string> out;
    for (int b = 0; b < config_.num_blocks(); ++b)
        out.push_back(block_name(b, "cross"));
    return out;
}

std::vector<std::string> ToyDenoiser::feature_layers() const {
    std::vector<std::string> out;
    for (int b = 0; b < config_.num_blocks(); ++b)
        out.push_back(block_name(b, "out"));
    return out;
}

std::vector<std::string> ToyDenoiser::default_feature_taps() const {
    // Second and third decoder blocks when present.
    std::vector<std::string> out;
    for (int b = 1; b <= 2 && b < config_.num_blocks(); ++b)
        out.push_back(block_name(b, "out"));
    if (out.empty())
        out.push_back(block_name(config_.num_blocks() - 1, "out"));
    return out;
}

int ToyDenoiser::block_of(const std::string& layer, const std::string& kind) const {
    const auto [block, k] = parse_layer_id(layer);
    if (block < 0 || block >= config_.num_blocks() || (!kind.empty() && k != kind) ||
        (k != "self" && k != "cross" && k != "out"))
        throw ConfigurationError("unknown layer id: " + layer);
    return block;
}

std::pair<int, int> ToyDenoiser::layer_resolution(const std::string& layer) const {
    const auto [block, kind] = parse_layer_id(layer);
    const int b = block_of(layer, "");
    const int p = kind == "self" ? 1 : config_.block_pool[b];
    return {config_.height / p, config_.width / p};
}

const Matrix& ToyDenoiser::param(const std::string& name) const { return params_.at(name); }

bool ToyDenoiser::in_base_vocabulary(const std::string& token) const {
    return config_.vocab.count(token) > 0 || !is_placeholder_token(token);
}

std::vector<double> ToyDenoiser::embedding(const std::string& token) const {
    if (auto it = placeholders_.find(token); it != placeholders_.end())
        return it->second;
    if (is_placeholder_token(token))
        throw ConfigurationError("placeholder token has no embedding: " + token);
    // Base words (listed or not) get a fixed pseudo-random embedding.
    NormalSampler rng(substream(config_.seed, "toy-weights/vocab/" + token));
    std::vector<double> e(static_cast<std::size_t>(config_.embedding_dim));
    for (auto& v : e)
        v = rng();
    return e;
}

void ToyDenoiser::set_embedding(const std::string& token, std::span<const double> value) {
    if (!is_placeholder_token(token) || config_.vocab.count(token))
        throw ValidationError("only <placeholder> tokens outside the base vocabulary can be set: " + token);
    if (value.size() != static_cast<std::size_t>(config_.embedding_dim))
        throw ValidationError("embedding dimension mismatch for " + token);
    placeholders_[token] = {value.begin(), value.end()};
}

std::vector<double> ToyDenoiser::token_key(const std::string& token, int block) const {
    const auto e = embedding(token);
    const Matrix& wk = param(block_name(block, "cross.to_k"));
    std::vector<double> k(wk.rows, 0.0);
    for (std::size_t c = 0; c < wk.rows; ++c)
        k[c] = dot(wk.row(c), e);
    return k;
}

ToyDenoiser::Forward ToyDenoiser::run(const Latent& latent, const Prompt& prompt,
                                      std::span<const AttentionIntervention> interventions, int t) const {
    if (latent.channels != config_.channels || latent.height != config_.height || latent.width != config_.width)
        throw ContractViolation("toy denoiser: latent shape does not match the backend");
    if (prompt.empty())
        throw ValidationError("prompt must not be empty");
    for (const auto& iv : interventions)
        block_of(iv.layer, "self");

    const int B = config_.num_blocks();
    const auto C = static_cast<std::size_t>(config_.channels);
    const std::size_t N = latent.plane();
    const double kappa = 1.0 / std::sqrt(static_cast<double>(C));

    Forward f;
    f.n_tokens = static_cast<int>(prompt.tokens.size());
    f.x_rows = latent.to_rows();
    const Matrix& wc = param("text.to_v");
    for (const auto& tok : prompt.tokens) {
        f.emb.push_back(embedding(tok));
        std::vector<double> w(C, 0.0);
        for (std::size_t c = 0; c < C; ++c)
            for (std::size_t e = 0; e < wc.rows; ++e)
                w[c] += f.emb.back()[e] * wc(e, c);
        f.text_value.push_back(std::move(w));
    }

    f.eps_rows = param("out.bias");
    {
        const Matrix& rk = param("text.to_k");
        const Matrix& pos = param("text.pos");
        const double route_c = config_.text_gain / f.n_tokens * static_cast<double>(N);
        for (int j = 0; j < f.n_tokens; ++j) {
            std::vector<double> key(C, 0.0);
            for (std::size_t c = 0; c < C; ++c)
                key[c] = dot(rk.row(c), f.emb[j]);
            std::vector<double> s(N);
            for (std::size_t u = 0; u < N; ++u)
                s[u] = kappa * dot(pos.row(u), key);
            softmax_inplace(s);
            for (std::size_t u = 0; u < N; ++u)
                for (std::size_t c = 0; c < C; ++c)
                    f.eps_rows(u, c) += route_c * s[u] * f.text_value[j][c];
            f.route_keys.push_back(std::move(key));
            f.route.push_back(std::move(s));
        }
    }
    {
        const Matrix skip = kernels::matmul(f.x_rows, param("out.skip"));
        for (std::size_t i = 0; i < skip.data.size(); ++i)
            f.eps_rows.data[i] += config_.skip_gain * skip.data[i];
    }

    f.pooled.resize(B);
    f.pool_rms.resize(B);
    f.keys.assign(B, {});
    f.attn.assign(B, {});
    f.q.resize(B);
    f.k.resize(B);
    f.v.resize(B);
    f.v_used.resize(B);
    f.probs.resize(B);
    f.o.resize(B);
    const double text_c = config_.cross_gain / (B * f.n_tokens);
    for (int b = 0; b < B; ++b) {
        const int p = config_.block_pool[b];
        f.pooled[b] = avg_pool(latent, p).to_rows();
        f.pool_rms[b] = rms_normalize(f.pooled[b]);
        const std::size_t Nb = f.pooled[b].rows;
        const Matrix& wk = param(block_name(b, "cross.to_k"));
        for (int j = 0; j < f.n_tokens; ++j) {
            std::vector<double> key(C, 0.0);
            for (std::size_t c = 0; c < C; ++c)
                key[c] = dot(wk.row(c), f.emb[j]);
            std::vector<double> s(Nb);
            for (std::size_t u = 0; u < Nb; ++u)
                s[u] = kappa * dot(f.pooled[b].row(u), key);
            softmax_inplace(s);
            f.keys[b].push_back(std::move(key));
            f.attn[b].push_back(std::move(s));
        }

        // Self-attention at full latent resolution.
        f.q[b] = kernels::matmul(f.x_rows, param(block_name(b, "self.to_q")));
        f.k[b] = kernels::matmul(f.x_rows, param(block_name(b, "self.to_k")));
        f.v[b] = kernels::matmul(f.x_rows, param(block_name(b, "self.to_v")));
        f.v_used[b] = f.v[b];
        const std::string layer = block_name(b, "self");
        for (const auto& iv : interventions) {
            if (iv.layer != layer || !iv.apply)
                continue;
            if (auto repl = iv.apply(f.q[b], f.k[b], f.v_used[b], t)) {
                if (!repl->same_shape(f.v[b]))
                    throw ContractViolation("intervention on " + layer + " returned a value array of the wrong shape");
                f.v_used[b] = std::move(*repl);
            }
        }
        f.probs[b] = kernels::attention_probabilities(f.q[b], f.k[b],
                                                      1.0 / std::sqrt(static_cast<double>(config_.head_dim)));
        f.o[b] = kernels::matmul(f.probs[b], f.v_used[b]);
        const Matrix sa = kernels::matmul(f.o[b], param(block_name(b, "self.to_out")));
        for (std::size_t i = 0; i < sa.data.size(); ++i)
            f.eps_rows.data[i] += config_.self_gain / B * sa.data[i];

        // Text values routed by the spatial attention maps.
        const int wb = config_.width / p;
        for (int j = 0; j < f.n_tokens; ++j)
            for (std::size_t u = 0; u < N; ++u) {
                const int y = static_cast<int>(u) / config_.width, x = static_cast<int>(u) % config_.width;
                const double weight = text_c * static_cast<double>(Nb) * f.attn[b][j][(y / p) * wb + x / p];
                for (std::size_t c = 0; c < C; ++c)
                    f.eps_rows(u, c) += weight * f.text_value[j][c];
            }
    }
    return f;
}

DenoiserOutput ToyDenoiser::predict_noise(const Latent& latent, int t, const Prompt& prompt, const TapConfig& taps,
                                          std::span<const AttentionIntervention> interventions) const {
    if (t < 0)
        throw OutOfRangeError("predict_noise: negative timestep");
    for (const auto& l : taps.feature_layers)
        block_of(l, "out");
    for (const auto& l : taps.value_layers)
        block_of(l, "self");
    for (int pos : taps.token_positions)
        if (pos < 0 || pos >= static_cast<int>(prompt.tokens.size()))
            throw ConfigurationError("tap token position outside prompt");

    const Forward f = run(latent, prompt, interventions, t);
    DenoiserOutput out;
    out.noise = Latent::from_rows(f.eps_rows, config_.height, config_.width);

    if (taps.cross_attention) {
        std::vector<int> positions = taps.token_positions;
        if (positions.empty())
            for (int j = 0; j < f.n_tokens; ++j)
                positions.push_back(j);
        for (int j : positions) {
            auto& maps = out.cross_attention[j];
            for (int b = 0; b < config_.num_blocks(); ++b) {
                const int p = config_.block_pool[b];
                Map2D m(config_.height / p, config_.width / p);
                m.data = f.attn[b][j];
                maps.push_back(std::move(m));
            }
        }
    }
    for (const auto& l : taps.feature_layers) {
        const int b = block_of(l, "out");
        const Matrix feat = kernels::matmul(f.pooled[b], param(block_name(b, "out.proj")));
        const int p = config_.block_pool[b];
        out.features[l] = Latent::from_rows(feat, config_.height / p, config_.width / p);
    }
    for (const auto& l : taps.value_layers)
        out.values[l] = f.v[block_of(l, "self")];
    return out;
}

Latent ToyDenoiser::cross_attention_vjp(const Latent& latent, int /*t*/, const Prompt& prompt,
                                        const CrossAttentionGrad& upstream) const {
    const Forward f = run(latent, prompt, {}, 0);
    const double kappa = 1.0 / std::sqrt(static_cast<double>(config_.channels));
    Latent grad(config_.channels, config_.height, config_.width, 0.0);
    for (const auto& [j, maps] : upstream) {
        if (j < 0 || j >= f.n_tokens)
            throw ConfigurationError("vjp token position outside prompt");
        if (maps.size() != static_cast<std::size_t>(config_.num_blocks()))
            throw ContractViolation("vjp needs one upstream map per cross-attention layer");
        for (int b = 0; b < config_.num_blocks(); ++b) {
            const Map2D& g = maps[b];
            if (g.size() == 0)
                continue;
            const auto& a = f.attn[b][j];
            if (g.size() != a.size())
                throw ContractViolation("vjp upstream map has the wrong resolution");
            double ag = 0.0;
            for (std::size_t u = 0; u < a.size(); ++u)
                ag += a[u] * g[u];
            const int p = config_.block_pool[b];
            Latent gp(config_.channels, config_.height / p, config_.width / p, 0.0);
            double gx = 0.0;
            for (std::size_t u = 0; u < a.size(); ++u) {
                const double ds = a[u] * (g[u] - ag);
                for (int c = 0; c < config_.channels; ++c) {
                    gp.at(c, u) = kappa * ds * f.keys[b][j][c];
                    gx += gp.at(c, u) * f.pooled[b](u, static_cast<std::size_t>(c));
                }
            }
            // Through the rms normalisation: (g - xhat * <g, xhat> / M) / r.
            const double m = static_cast<double>(gp.size());
            for (int c = 0; c < config_.channels; ++c)
                for (std::size_t u = 0; u < a.size(); ++u)
                    gp.at(c, u) = (gp.at(c, u) - f.pooled[b](u, static_cast<std::size_t>(c)) * gx / m) / f.pool_rms[b];
            const Latent up = avg_pool_adjoint(gp, p);
            for (std::size_t i = 0; i < grad.size(); ++i)
                grad.data[i] += up.data[i];
        }
    }
    return grad;
}

Gradients ToyDenoiser::backward(const Latent& latent, int t, const Prompt& prompt, const Latent& grad_noise) const {
    if (!grad_noise.same_shape(latent))
        throw ContractViolation("backward: gradient shape differs from latent");
    const Forward f = run(latent, prompt, {}, t);
    const int B = config_.num_blocks();
    const auto C = static_cast<std::size_t>(config_.channels);
    const std::size_t N = latent.plane();
    const double kappa = 1.0 / std::sqrt(static_cast<double>(C));
    const Matrix r = grad_noise.to_rows();

    Gradients g;
    auto& gp = g.parameters;
    gp["out.bias"] = r.data;
    {
        Matrix d = kernels::matmul_transpose_a(f.x_rows, r);
        for (auto& v : d.data)
            v *= config_.skip_gain;
        gp["out.skip"] = std::move(d.data);
    }
    for (int b = 0; b < B; ++b) {
        const double gs = config_.self_gain / B;
        const Matrix& wo = param(block_name(b, "self.to_out"));
        Matrix d_wo = kernels::matmul_transpose_a(f.o[b], r);
        for (auto& v : d_wo.data)
            v *= gs;
        Matrix d_o = kernels::matmul_transpose_b(r, wo);  // N x D
        for (auto& v : d_o.data)
            v *= gs;
        const Matrix& p = f.probs[b];
        const Matrix d_v = kernels::matmul_transpose_a(p, d_o);       // N x D
        const Matrix d_p = kernels::matmul_transpose_b(d_o, f.v_used[b]);  // N x N
        Matrix d_s(N, N);
        for (std::size_t i = 0; i < N; ++i) {
            double acc = 0.0;
            for (std::size_t j = 0; j < N; ++j)
                acc += p(i, j) * d_p(i, j);
            for (std::size_t j = 0; j < N; ++j)
                d_s(i, j) = p(i, j) * (d_p(i, j) - acc);
        }
        const double scale = 1.0 / std::sqrt(static_cast<double>(config_.head_dim));
        Matrix d_q = kernels::matmul(d_s, f.k[b]);
        Matrix d_k = kernels::matmul_transpose_a(d_s, f.q[b]);
        for (auto& v : d_q.data)
            v *= scale;
        for (auto& v : d_k.data)
            v *= scale;
        gp[block_name(b, "self.to_q")] = kernels::matmul_transpose_a(f.x_rows, d_q).data;
        gp[block_name(b, "self.to_k")] = kernels::matmul_transpose_a(f.x_rows, d_k).data;
        gp[block_name(b, "self.to_v")] = kernels::matmul_transpose_a(f.x_rows, d_v).data;
        gp[block_name(b, "self.to_out")] = std::move(d_wo.data);
        gp[block_name(b, "out.proj")] = std::vector<double>(param(block_name(b, "out.proj")).data.size(), 0.0);
        gp[block_name(b, "cross.to_k")] = std::vector<double>(param(block_name(b, "cross.to_k")).data.size(), 0.0);
    }

    // Text term.
    const Matrix& wc = param("text.to_v");
    const auto E = static_cast<std::size_t>(config_.embedding_dim);
    std::vector<double> d_wc(wc.data.size(), 0.0);
    std::vector<std::vector<double>> d_emb(f.n_tokens, std::vector<double>(E, 0.0));
    {
        // Positional routing.
        const Matrix& rk = param("text.to_k");
        const Matrix& pos = param("text.pos");
        std::vector<double> d_rk(rk.data.size(), 0.0);
        std::vector<double> d_pos(pos.data.size(), 0.0);
        const double route_c = config_.text_gain / f.n_tokens * static_cast<double>(N);
        for (int j = 0; j < f.n_tokens; ++j) {
            const auto& a = f.route[j];
            std::vector<double> d_w(C, 0.0);
            std::vector<double> d_a(N, 0.0);
            for (std::size_t u = 0; u < N; ++u) {
                double rw = 0.0;
                for (std::size_t c = 0; c < C; ++c) {
                    d_w[c] += route_c * a[u] * r(u, c);
                    rw += r(u, c) * f.text_value[j][c];
                }
                d_a[u] = route_c * rw;
            }
            double ada = 0.0;
            for (std::size_t u = 0; u < N; ++u)
                ada += a[u] * d_a[u];
            std::vector<double> d_key(C, 0.0);
            for (std::size_t u = 0; u < N; ++u) {
                const double ds = a[u] * (d_a[u] - ada);
                for (std::size_t c = 0; c < C; ++c) {
                    d_key[c] += kappa * ds * pos(u, c);
                    d_pos[u * C + c] += kappa * ds * f.route_keys[j][c];
                }
            }
            for (std::size_t c = 0; c < C; ++c)
                for (std::size_t e = 0; e < E; ++e) {
                    d_rk[c * E + e] += d_key[c] * f.emb[j][e];
                    d_emb[j][e] += rk(c, e) * d_key[c];
                }
            for (std::size_t e = 0; e < E; ++e)
                for (std::size_t c = 0; c < C; ++c) {
                    d_wc[e * C + c] += f.emb[j][e] * d_w[c];
                    d_emb[j][e] += wc(e, c) * d_w[c];
                }
        }
        gp["text.to_k"] = std::move(d_rk);
        gp["text.pos"] = std::move(d_pos);
    }
    const double text_c = config_.cross_gain / (B * f.n_tokens);
    for (int b = 0; b < B; ++b) {
        const int pool = config_.block_pool[b];
        const int wb = config_.width / pool;
        const std::size_t Nb = f.pooled[b].rows;
        const Matrix& wk = param(block_name(b, "cross.to_k"));
        auto& d_wk = gp[block_name(b, "cross.to_k")];
        for (int j = 0; j < f.n_tokens; ++j) {
            const auto& a = f.attn[b][j];
            std::vector<double> d_w(C, 0.0);
            std::vector<double> d_a(Nb, 0.0);
            for (std::size_t u = 0; u < N; ++u) {
                const int y = static_cast<int>(u) / config_.width, x = static_cast<int>(u) % config_.width;
                const std::size_t cell = static_cast<std::size_t>((y / pool) * wb + x / pool);
                const double weight = text_c * static_cast<double>(Nb) * a[cell];
                double rw = 0.0;
                for (std::size_t c = 0; c < C; ++c) {
                    d_w[c] += weight * r(u, c);
                    rw += r(u, c) * f.text_value[j][c];
                }
                d_a[cell] += text_c * static_cast<double>(Nb) * rw;
            }
            double ada = 0.0;
            for (std::size_t u = 0; u < Nb; ++u)
                ada += a[u] * d_a[u];
            std::vector<double> d_key(C, 0.0);
            for (std::size_t u = 0; u < Nb; ++u) {
                const double ds = a[u] * (d_a[u] - ada);
                for (std::size_t c = 0; c < C; ++c)
                    d_key[c] += kappa * ds * f.pooled[b](u, c);
            }
            for (std::size_t c = 0; c < C; ++c)
                for (std::size_t e = 0; e < E; ++e) {
                    d_wk[c * E + e] += d_key[c] * f.emb[j][e];
                    d_emb[j][e] += wk(c, e) * d_key[c];
                }
            for (std::size_t e = 0; e < E; ++e)
                for (std::size_t c = 0; c < C; ++c) {
                    d_wc[e * C + c] += f.emb[j][e] * d_w[c];
                    d_emb[j][e] += wc(e, c) * d_w[c];
                }
        }
    }
    gp["text.to_v"] = std::move(d_wc);
    for (int j = 0; j < f.n_tokens; ++j) {
        auto& acc = g.embeddings[prompt.tokens[j]];
        if (acc.empty())
            acc.assign(E, 0.0);
        for (std::size_t e = 0; e < E; ++e)
            acc[e] += d_emb[j][e];
    }
    return g;
}

std::vector<std::string> ToyDenoiser::parameter_names() const {
    std::vector<std::string> names;
    for (const auto& [k, _] : params_)
        names.push_back(k);
    return names;
}

std::span<double> ToyDenoiser::parameter(const std::string& name) {
    auto it = params_.find(name);
    if (it == params_.end())
        throw ConfigurationError("unknown parameter: " + name);
    return it->second.data;
}

std::span<const double> ToyDenoiser::parameter(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end())
        throw ConfigurationError("unknown parameter: " + name);
    return it->second.data;
}

std::vector<std::uint8_t> ToyDenoiser::serialize_weights() const {
    std::vector<std::uint8_t> out(std::begin(kWeightsMagic), std::end(kWeightsMagic));
    put<std::uint64_t>(out, params_.size());
    for (const auto& [name, m] : params_) {
        put<std::uint64_t>(out, name.size());
        out.insert(out.end(), name.begin(), name.end());
        put<std::uint64_t>(out, m.rows);
        put<std::uint64_t>(out, m.cols);
        const auto* p = reinterpret_cast<const std::uint8_t*>(m.data.data());
        out.insert(out.end(), p, p + m.data.size() * sizeof(double));
    }
    return out;
}

void ToyDenoiser::load_weights(std::span<const std::uint8_t> blob) {
    if (blob.size() < sizeof(kWeightsMagic) || std::memcmp(blob.data(), kWeightsMagic, sizeof(kWeightsMagic)) != 0)
        throw LoadError("toy weights: bad magic");
    std::size_t off = sizeof(kWeightsMagic);
    const auto count = take<std::uint64_t>(blob, off);
    if (count != params_.size())
        throw LoadError("toy weights: parameter count mismatch");
    std::map<std::string, Matrix> loaded;
    for (std::uint64_t i = 0; i < count; ++i) {
        const auto len = take<std::uint64_t>(blob, off);
        if (off + len > blob.size())
            throw LoadError("toy weights: truncated blob");
        std::string name(reinterpret_cast<const char*>(blob.data() + off), len);
        off += len;
        const auto rows = take<std::uint64_t>(blob, off);
        const auto cols = take<std::uint64_t>(blob, off);
        auto it = params_.find(name);
        if (it == params_.end() || it->second.rows != rows || it->second.cols != cols)
            throw LoadError("toy weights: unexpected parameter " + name);
        Matrix m(rows, cols);
        const std::size_t bytes = m.data.size() * sizeof(double);
        if (off + bytes > blob.size())
            throw LoadError("toy weights: truncated blob");
        std::memcpy(m.data.data(), blob.data() + off, bytes);
        off += bytes;
        loaded[name] = std::move(m);
    }
    params_ = std::move(loaded);
}

Latent ToyDenoiser::encode(const Image& image) const {
    if (image.channels != 3)
        throw DecodeError("toy encode expects an RGB image");
    if (image.width != config_.width * 8 || image.height != config_.height * 8)
        throw DecodeError("toy encode: image size does not match the backend latent size");
    Latent out(config_.channels, config_.height, config_.width);
    for (int y = 0; y < config_.height; ++y)
        for (int x = 0; x < config_.width; ++x) {
            double rgb[3] = {0, 0, 0};
            for (int dy = 0; dy < 8; ++dy)
                for (int dx = 0; dx < 8; ++dx)
                    for (int k = 0; k < 3; ++k)
                        rgb[k] += image.at(y * 8 + dy, x * 8 + dx, k);
            for (auto& v : rgb)
                v = v / 64.0 / 127.5 - 1.0;
            for (int c = 0; c < config_.channels; ++c)
                out.at(c, y, x) = codec_(c, 0) * rgb[0] + codec_(c, 1) * rgb[1] + codec_(c, 2) * rgb[2];
        }
    return out;
}

Image ToyDenoiser::decode(const Latent& latent) const {
    if (latent.channels != config_.channels || latent.height != config_.height || latent.width != config_.width)
        throw DecodeError("toy decode: latent shape does not match the backend");
    if (!latent.all_finite())
        throw DecodeError("toy decode: latent has non-finite entries");
    Image img(config_.width * 8, config_.height * 8, 3);
    for (int y = 0; y < config_.height; ++y)
        for (int x = 0; x < config_.width; ++x)
            for (int k = 0; k < 3; ++k) {
                double v = 0.0;
                for (int c = 0; c < config_.channels; ++c)
                    v += codec_inv_(k, c) * latent.at(c, y, x);
                const auto px = static_cast<std::uint8_t>(std::clamp(std::lround((v + 1.0) * 127.5), 0L, 255L));
                for (int dy = 0; dy < 8; ++dy)
                    for (int dx = 0; dx < 8; ++dx)
                        img.at(y * 8 + dy, x * 8 + dx, k) = px;
            }
    return img;
}

ToyDenoiser make_toy_denoiser(std::uint64_t seed, const std::set<std::string>& vocab, LatentShape shape,
                              int num_layers) {
    if (vocab.empty())
        throw ValidationError("toy denoiser vocabulary must not be empty");
    if (num_layers < 1)
        throw ValidationError("toy denoiser needs at least one layer");
    ToyConfig c;
    c.seed = seed;
    c.vocab = vocab;
    c.channels = shape.channels;
    c.height = shape.height;
    c.width = shape.width;
    c.block_pool.assign(static_cast<std::size_t>(num_layers), 1);
    if (num_layers >= 2 && shape.height % 2 == 0 && shape.width % 2 == 0)
        c.block_pool[1] = 2;
    return ToyDenoiser(std::move(c));
}

}  // namespace relayout::backend
