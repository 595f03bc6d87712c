// Copyright (C) 2026 The relayout Authors
// SPDX-License-Identifier: Apache-2.0

#include "relayout/tensor.hpp"

#include <algorithm>
#include <cmath>

namespace relayout {

std::size_t count_nonzero(const Mask& m) {
    return static_cast<std::size_t>(std::count_if(m.data.begin(), m.data.end(), [](auto v) { return v != 0; }));
}

Mask mask_union(std::span<const Mask> masks, int height, int width) {
    Mask out(height, width, 0);
    for (const auto& m : masks) {
        if (!m.same_shape(height, width))
            throw std::invalid_argument("mask_union: shape mismatch");
        for (std::size_t i = 0; i < out.size(); ++i)
            out[i] = static_cast<std::uint8_t>(out[i] | (m[i] != 0));
    }
    return out;
}

bool Latent::all_finite() const {
    return std::all_of(data.begin(), data.end(), [](double v) { return std::isfinite(v); });
}

Matrix Latent::to_rows() const {
    Matrix m(plane(), static_cast<std::size_t>(channels));
    for (int c = 0; c < channels; ++c)
        for (std::size_t u = 0; u < plane(); ++u)
            m(u, c) = at(c, u);
    return m;
}

Latent Latent::from_rows(const Matrix& m, int height, int width) {
    if (m.rows != static_cast<std::size_t>(height) * width)
        throw std::invalid_argument("Latent::from_rows: row count does not match spatial size");
    Latent out(static_cast<int>(m.cols), height, width);
    for (std::size_t c = 0; c < m.cols; ++c)
        for (std::size_t u = 0; u < m.rows; ++u)
            out.at(static_cast<int>(c), u) = m(u, c);
    return out;
}

double max_abs_diff(const Latent& a, const Latent& b) {
    if (!a.same_shape(b))
        throw std::invalid_argument("max_abs_diff: shape mismatch");
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i)
        m = std::max(m, std::abs(a.data[i] - b.data[i]));
    return m;
}

double max_abs_diff(const Matrix& a, const Matrix& b) {
    if (!a.same_shape(b))
        throw std::invalid_argument("max_abs_diff: shape mismatch");
    double m = 0.0;
    for (std::size_t i = 0; i < a.data.size(); ++i)
        m = std::max(m, std::abs(a.data[i] - b.data[i]));
    return m;
}

Matrix area_weights(int src, int dst) {
    if (src <= 0 || dst <= 0)
        throw std::invalid_argument("area_weights: sizes must be positive");
    Matrix w(static_cast<std::size_t>(dst), static_cast<std::size_t>(src));
    // Work in units of 1/(src*dst) so cell boundaries are exact integers.
    const long long span = src;  // each dst cell spans `src` units, each src cell spans `dst` units
    for (int i = 0; i < dst; ++i) {
        const long long lo = static_cast<long long>(i) * span;
        const long long hi = lo + span;
        for (int j = 0; j < src; ++j) {
            const long long slo = static_cast<long long>(j) * dst;
            const long long shi = slo + dst;
            const long long overlap = std::min(hi, shi) - std::max(lo, slo);
            if (overlap > 0)
                w(i, j) = static_cast<double>(overlap) / static_cast<double>(span);
        }
    }
    return w;
}

Map2D area_resample(const Map2D& in, int height, int width) {
    if (in.height == height && in.width == width)
        return in;
    const Matrix wy = area_weights(in.height, height);
    const Matrix wx = area_weights(in.width, width);
    Map2D out(height, width, 0.0);
    for (int y = 0; y < height; ++y)
        for (int sy = 0; sy < in.height; ++sy) {
            const double a = wy(y, sy);
            if (a == 0.0)
                continue;
            for (int x = 0; x < width; ++x)
                for (int sx = 0; sx < in.width; ++sx) {
                    const double b = wx(x, sx);
                    if (b != 0.0)
                        out(y, x) += a * b * in(sy, sx);
                }
        }
    return out;
}

Map2D area_resample_adjoint(const Map2D& grad_out, int in_height, int in_width) {
    if (grad_out.height == in_height && grad_out.width == in_width)
        return grad_out;
    const Matrix wy = area_weights(in_height, grad_out.height);
    const Matrix wx = area_weights(in_width, grad_out.width);
    Map2D g(in_height, in_width, 0.0);
    for (int y = 0; y < grad_out.height; ++y)
        for (int sy = 0; sy < in_height; ++sy) {
            const double a = wy(y, sy);
            if (a == 0.0)
                continue;
            for (int x = 0; x < grad_out.width; ++x)
                for (int sx = 0; sx < in_width; ++sx) {
                    const double b = wx(x, sx);
                    if (b != 0.0)
                        g(sy, sx) += a * b * grad_out(y, x);
                }
        }
    return g;
}

Mask resample_mask(const Mask& in, int height, int width) {
    if (in.height == height && in.width == width)
        return in;
    Map2D f(in.height, in.width);
    for (std::size_t i = 0; i < in.size(); ++i)
        f[i] = in[i] ? 1.0 : 0.0;
    const Map2D r = area_resample(f, height, width);
    Mask out(height, width, 0);
    for (std::size_t i = 0; i < out.size(); ++i)
        out[i] = r[i] >= 0.5 - 1e-12 ? 1 : 0;
    return out;
}

Latent bilinear_resample(const Latent& in, int height, int width) {
    if (in.height == height && in.width == width)
        return in;
    Latent out(in.channels, height, width);
    const double sy = static_cast<double>(in.height) / height;
    const double sx = static_cast<double>(in.width) / width;
    for (int y = 0; y < height; ++y) {
        const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, static_cast<double>(in.height - 1));
        const int y0 = static_cast<int>(std::floor(fy));
        const int y1 = std::min(y0 + 1, in.height - 1);
        const double ay = fy - y0;
        for (int x = 0; x < width; ++x) {
            const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, static_cast<double>(in.width - 1));
            const int x0 = static_cast<int>(std::floor(fx));
            const int x1 = std::min(x0 + 1, in.width - 1);
            const double ax = fx - x0;
            for (int c = 0; c < in.channels; ++c) {
                const double top = (1 - ax) * in.at(c, y0, x0) + ax * in.at(c, y0, x1);
                const double bot = (1 - ax) * in.at(c, y1, x0) + ax * in.at(c, y1, x1);
                out.at(c, y, x) = (1 - ay) * top + ay * bot;
            }
        }
    }
    return out;
}

Latent avg_pool(const Latent& in, int factor) {
    if (factor == 1)
        return in;
    if (factor <= 0 || in.height % factor || in.width % factor)
        throw std::invalid_argument("avg_pool: factor must divide spatial dims");
    const int h = in.height / factor, w = in.width / factor;
    const double inv = 1.0 / (factor * factor);
    Latent out(in.channels, h, w);
    for (int c = 0; c < in.channels; ++c)
        for (int y = 0; y < in.height; ++y)
            for (int x = 0; x < in.width; ++x)
                out.at(c, y / factor, x / factor) += in.at(c, y, x) * inv;
    return out;
}

Latent avg_pool_adjoint(const Latent& grad_out, int factor) {
    if (factor == 1)
        return grad_out;
    const double inv = 1.0 / (factor * factor);
    Latent g(grad_out.channels, grad_out.height * factor, grad_out.width * factor);
    for (int c = 0; c < g.channels; ++c)
        for (int y = 0; y < g.height; ++y)
            for (int x = 0; x < g.width; ++x)
                g.at(c, y, x) = grad_out.at(c, y / factor, x / factor) * inv;
    return g;
}

Map2D nearest_upsample(const Map2D& in, int factor) {
    if (factor == 1)
        return in;
    Map2D out(in.height * factor, in.width * factor);
    for (int y = 0; y < out.height; ++y)
        for (int x = 0; x < out.width; ++x)
            out(y, x) = in(y / factor, x / factor);
    return out;
}

Map2D nearest_upsample_adjoint(const Map2D& grad_out, int factor) {
    if (factor == 1)
        return grad_out;
    Map2D g(grad_out.height / factor, grad_out.width / factor, 0.0);
    for (int y = 0; y < grad_out.height; ++y)
        for (int x = 0; x < grad_out.width; ++x)
            g(y / factor, x / factor) += grad_out(y, x);
    return g;
}

}  // namespace relayout
