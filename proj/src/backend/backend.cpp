// Copyright (C) 2026 The relayout Authors
// SPDX-License-Identifier: Apache-2.0

#include "relayout/backend.hpp"

#include <cmath>
#include <sstream>

#include "relayout/errors.hpp"
#include "relayout/toy_denoiser.hpp"

namespace relayout::backend {

NoiseSchedule NoiseSchedule::scaled_linear(int num_steps, double beta_start, double beta_end, int train_steps) {
    if (num_steps < 1 || train_steps < num_steps)
        throw ValidationError("noise schedule: need 1 <= num_steps <= train_steps");
    std::vector<double> cumprod(static_cast<std::size_t>(train_steps));
    const double a = std::sqrt(beta_start), b = std::sqrt(beta_end);
    double prod = 1.0;
    for (int i = 0; i < train_steps; ++i) {
        const double s = train_steps == 1 ? a : a + (b - a) * i / (train_steps - 1);
        prod *= 1.0 - s * s;
        cumprod[i] = prod;
    }
    std::vector<double> ab(static_cast<std::size_t>(num_steps) + 1);
    ab[0] = 1.0;
    for (int t = 1; t <= num_steps; ++t) {
        const auto idx = static_cast<std::size_t>(std::llround(static_cast<double>(t) * train_steps / num_steps)) - 1;
        ab[t] = cumprod[idx];
    }
    return from_alpha_bar(std::move(ab));
}

NoiseSchedule NoiseSchedule::from_alpha_bar(std::vector<double> alpha_bar) {
    NoiseSchedule s;
    s.num_steps = static_cast<int>(alpha_bar.size()) - 1;
    s.alpha_bar = std::move(alpha_bar);
    s.validate();
    return s;
}

void NoiseSchedule::validate() const {
    if (num_steps < 1 || alpha_bar.size() != static_cast<std::size_t>(num_steps) + 1)
        throw ValidationError("noise schedule: alpha_bar must have num_steps + 1 entries");
    if (alpha_bar[0] != 1.0)
        throw ValidationError("noise schedule: alpha_bar[0] must be 1");
    for (int t = 1; t <= num_steps; ++t)
        if (!(alpha_bar[t] > 0.0 && alpha_bar[t] < alpha_bar[t - 1]))
            throw ValidationError("noise schedule: alpha_bar must be strictly decreasing within (0, 1]");
}

double NoiseSchedule::alpha(int t, AlphaMode mode) const {
    if (t < 0 || t > num_steps)
        throw OutOfRangeError("timestep outside schedule");
    if (mode == AlphaMode::cumulative || t == 0)
        return alpha_bar[t];
    return alpha_bar[t] / alpha_bar[t - 1];
}

double NoiseSchedule::sigma_squared(int t, AlphaMode mode) const {
    const double a = alpha(t, mode);
    return (1.0 - a) / a;
}

Prompt Prompt::parse(const std::string& text) {
    Prompt p;
    std::istringstream in(text);
    std::string tok;
    while (in >> tok)
        p.tokens.push_back(tok);
    return p;
}

std::string Prompt::text() const {
    std::string s;
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        if (i)
            s += ' ';
        s += tokens[i];
    }
    return s;
}

std::vector<int> Prompt::positions_of(const std::string& token) const {
    std::vector<int> pos;
    for (std::size_t i = 0; i < tokens.size(); ++i)
        if (tokens[i] == token)
            pos.push_back(static_cast<int>(i));
    return pos;
}

Latent ddim_step(const Latent& latent, const Latent& noise, int t, const NoiseSchedule& schedule) {
    if (t < 1 || t > schedule.num_steps)
        throw OutOfRangeError("ddim_step: t must be in [1, T]");
    if (!latent.same_shape(noise))
        throw ContractViolation("ddim_step: noise shape differs from latent");
    const double at = schedule.alpha_bar[t];
    const double ap = schedule.alpha_bar[t - 1];
    const double sa = std::sqrt(at), s1a = std::sqrt(1.0 - at);
    const double sp = std::sqrt(ap), s1p = std::sqrt(1.0 - ap);
    Latent out(latent.channels, latent.height, latent.width);
    for (std::size_t i = 0; i < latent.size(); ++i) {
        const double x0 = (latent.data[i] - s1a * noise.data[i]) / sa;
        out.data[i] = sp * x0 + s1p * noise.data[i];
    }
    return out;
}

Latent ddim_invert_step(const Latent& latent, const Latent& noise, int t, const NoiseSchedule& schedule) {
    if (t < 0 || t >= schedule.num_steps)
        throw OutOfRangeError("ddim_invert_step: t must be in [0, T)");
    if (!latent.same_shape(noise))
        throw ContractViolation("ddim_invert_step: noise shape differs from latent");
    const double ac = schedule.alpha_bar[t];
    const double an = schedule.alpha_bar[t + 1];
    const double sc = std::sqrt(ac), s1c = std::sqrt(1.0 - ac);
    const double sn = std::sqrt(an), s1n = std::sqrt(1.0 - an);
    Latent out(latent.channels, latent.height, latent.width);
    for (std::size_t i = 0; i < latent.size(); ++i) {
        const double x0 = (latent.data[i] - s1c * noise.data[i]) / sc;
        out.data[i] = sn * x0 + s1n * noise.data[i];
    }
    return out;
}

int inversion_steps(double stop_fraction, int num_steps) {
    if (!(stop_fraction > 0.0 && stop_fraction <= 1.0))
        throw ValidationError("stop_fraction must lie in (0, 1]");
    return static_cast<int>(std::lround(stop_fraction * num_steps));
}

DenoisingTrace ddim_invert_trace(const Denoiser& denoiser, const Latent& x0, const Prompt& prompt,
                                 const NoiseSchedule& schedule, double stop_fraction) {
    if (!x0.all_finite())
        throw ValidationError("ddim_invert_trace: x0 has non-finite entries");
    const int k = inversion_steps(stop_fraction, schedule.num_steps);
    TapConfig taps;
    taps.cross_attention = false;
    DenoisingTrace trace;
    trace.reserve(static_cast<std::size_t>(k) + 1);
    trace.push_back(x0);
    for (int t = 0; t < k; ++t) {
        const auto out = denoiser.predict_noise(trace.back(), t, prompt, taps);
        trace.push_back(ddim_invert_step(trace.back(), out.noise, t, schedule));
    }
    return trace;
}

Latent ddim_sample(const Denoiser& denoiser, Latent x, int start, const Prompt& prompt,
                   const NoiseSchedule& schedule) {
    TapConfig taps;
    taps.cross_attention = false;
    for (int t = start; t >= 1; --t) {
        const auto out = denoiser.predict_noise(x, t, prompt, taps);
        x = ddim_step(x, out.noise, t, schedule);
    }
    return x;
}

std::pair<int, std::string> parse_layer_id(const std::string& id) {
    // dec.<block>.<kind>
    const auto p1 = id.find('.');
    const auto p2 = id.find('.', p1 == std::string::npos ? p1 : p1 + 1);
    if (p1 == std::string::npos || p2 == std::string::npos || id.substr(0, p1) != "dec")
        throw ConfigurationError("unknown layer id: " + id);
    const auto block = id.substr(p1 + 1, p2 - p1 - 1);
    if (block.empty() || block.find_first_not_of("0123456789") != std::string::npos)
        throw ConfigurationError("unknown layer id: " + id);
    return {std::stoi(block), id.substr(p2 + 1)};
}

std::unique_ptr<Denoiser> make_backend(const std::string& selector, int image_width, int image_height) {
    if (selector == "toy")
        return std::make_unique<ToyDenoiser>(ToyConfig::for_image(image_width, image_height));
    if (selector.rfind("adapter:", 0) == 0)
        throw BackendError("no adapter named '" + selector.substr(8) + "' is available in this build");
    throw BackendError("unknown backend selector: " + selector);
}

}  // namespace relayout::backend
