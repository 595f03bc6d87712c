// Copyright (C) 2026 The relayout Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace relayout {

/// Dense row-major matrix of doubles. Used for attention operands (rows =
/// spatial locations, cols = channels), descriptors and similarity blocks.
struct Matrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> data;

    Matrix() = default;
    Matrix(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), data(r * c, fill) {}

    double& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
    double operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }

    std::span<double> row(std::size_t r) { return {data.data() + r * cols, cols}; }
    std::span<const double> row(std::size_t r) const { return {data.data() + r * cols, cols}; }

    bool same_shape(const Matrix& o) const { return rows == o.rows && cols == o.cols; }
    bool operator==(const Matrix&) const = default;
};

/// Single-channel 2-D map. Masks use Grid<uint8_t> with values {0,1}.
template <typename T>
struct Grid {
    int height = 0;
    int width = 0;
    std::vector<T> data;

    Grid() = default;
    Grid(int h, int w, T fill = T{}) : height(h), width(w), data(static_cast<std::size_t>(h) * w, fill) {}

    T& operator()(int y, int x) { return data[static_cast<std::size_t>(y) * width + x]; }
    const T& operator()(int y, int x) const { return data[static_cast<std::size_t>(y) * width + x]; }
    T& operator[](std::size_t i) { return data[i]; }
    const T& operator[](std::size_t i) const { return data[i]; }

    std::size_t size() const { return data.size(); }
    bool same_shape(int h, int w) const { return height == h && width == w; }
    bool operator==(const Grid&) const = default;
};

using Mask = Grid<std::uint8_t>;
using Map2D = Grid<double>;

std::size_t count_nonzero(const Mask& m);
Mask mask_union(std::span<const Mask> masks, int height, int width);

/// Latent tensor [channels, height, width], channel-major.
struct Latent {
    int channels = 0;
    int height = 0;
    int width = 0;
    std::vector<double> data;

    Latent() = default;
    Latent(int c, int h, int w, double fill = 0.0)
        : channels(c), height(h), width(w), data(static_cast<std::size_t>(c) * h * w, fill) {}

    std::size_t plane() const { return static_cast<std::size_t>(height) * width; }
    std::size_t size() const { return data.size(); }

    double& at(int c, int y, int x) { return data[c * plane() + static_cast<std::size_t>(y) * width + x]; }
    double at(int c, int y, int x) const { return data[c * plane() + static_cast<std::size_t>(y) * width + x]; }
    double& at(int c, std::size_t u) { return data[c * plane() + u]; }
    double at(int c, std::size_t u) const { return data[c * plane() + u]; }

    bool same_shape(const Latent& o) const {
        return channels == o.channels && height == o.height && width == o.width;
    }
    bool all_finite() const;
    bool operator==(const Latent&) const = default;

    /// Locations as rows, channels as columns.
    Matrix to_rows() const;
    static Latent from_rows(const Matrix& m, int height, int width);
};

double max_abs_diff(const Latent& a, const Latent& b);
double max_abs_diff(const Matrix& a, const Matrix& b);

/// Area-average resampling weights mapping `src` cells onto `dst` cells
/// (dst x src, rows sum to one). Handles both shrinking and growing.
Matrix area_weights(int src, int dst);

Map2D area_resample(const Map2D& in, int height, int width);
/// Adjoint of area_resample: maps a gradient at the output resolution back.
Map2D area_resample_adjoint(const Map2D& grad_out, int in_height, int in_width);

/// Area-average then threshold at 0.5.
Mask resample_mask(const Mask& in, int height, int width);

/// Bilinear resampling with half-pixel centers, applied per channel.
Latent bilinear_resample(const Latent& in, int height, int width);

/// Average pool by an integer factor (factor must divide both dimensions).
Latent avg_pool(const Latent& in, int factor);
Latent avg_pool_adjoint(const Latent& grad_out, int factor);
Map2D nearest_upsample(const Map2D& in, int factor);
Map2D nearest_upsample_adjoint(const Map2D& grad_out, int factor);

}  // namespace relayout
