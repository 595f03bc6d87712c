// Copyright (C) 2026 The relayout Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "relayout/tensor.hpp"

namespace relayout {

/// 8-bit interleaved image (1 = gray, 3 = RGB).
struct Image {
    int width = 0;
    int height = 0;
    int channels = 3;
    std::vector<std::uint8_t> pixels;

    Image() = default;
    Image(int w, int h, int c, std::uint8_t fill = 0)
        : width(w), height(h), channels(c), pixels(static_cast<std::size_t>(w) * h * c, fill) {}

    std::uint8_t& at(int y, int x, int c) { return pixels[(static_cast<std::size_t>(y) * width + x) * channels + c]; }
    std::uint8_t at(int y, int x, int c) const {
        return pixels[(static_cast<std::size_t>(y) * width + x) * channels + c];
    }
    bool operator==(const Image&) const = default;
};

namespace png {

/// Decodes 1/2/3/4-channel, 8 or 16 bit PNGs to 8-bit gray or RGB (alpha dropped).
Image decode(std::span<const std::uint8_t> bytes);
Image read(const std::filesystem::path& path);

std::vector<std::uint8_t> encode(const Image& img);
void write(const std::filesystem::path& path, const Image& img);

/// 16-bit grayscale, values stored verbatim.
std::vector<std::uint8_t> encode_gray16(const Grid<std::uint16_t>& img);
void write_gray16(const std::filesystem::path& path, const Grid<std::uint16_t>& img);
Grid<std::uint16_t> read_gray16(const std::filesystem::path& path);

/// Palette image: one index per pixel into `palette` (RGB triples).
void write_indexed(const std::filesystem::path& path, const Grid<std::uint8_t>& indices,
                   std::span<const std::array<std::uint8_t, 3>> palette);

}  // namespace png

/// Binary mask from a single-channel image: 255 -> 1, 0 -> 0.
/// Any other value throws ValidationError (masks must be binary).
Mask mask_from_image(const Image& img);
Image mask_to_image(const Mask& m);

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);
void write_text(const std::filesystem::path& path, const std::string& text);
std::string read_text(const std::filesystem::path& path);

}  // namespace relayout
