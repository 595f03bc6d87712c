// Copyright (C) 2026 The relayout Authors
// SPDX-License-Identifier: Apache-2.0

#include "relayout/image.hpp"

#include <png.h>

#include <cstring>
#include <fstream>
#include <iterator>

#include "relayout/errors.hpp"

namespace relayout {

namespace {

struct PngImage {
    png_image img{};
    PngImage() {
        std::memset(&img, 0, sizeof(img));
        img.version = PNG_IMAGE_VERSION;
    }
    ~PngImage() { png_image_free(&img); }
    PngImage(const PngImage&) = delete;
    PngImage& operator=(const PngImage&) = delete;
};

std::vector<std::uint8_t> write_simplified(png_image& img, const void* buffer, std::ptrdiff_t row_stride,
                                           const void* colormap) {
    png_alloc_size_t size = 0;
    if (!png_image_write_to_memory(&img, nullptr, &size, 0, buffer, static_cast<png_int_32>(row_stride), colormap))
        throw DecodeError(std::string("png encode: ") + img.message);
    std::vector<std::uint8_t> out(size);
    if (!png_image_write_to_memory(&img, out.data(), &size, 0, buffer, static_cast<png_int_32>(row_stride), colormap))
        throw DecodeError(std::string("png encode: ") + img.message);
    out.resize(size);
    return out;
}

}  // namespace

namespace png {

Image decode(std::span<const std::uint8_t> bytes) {
    PngImage p;
    if (!png_image_begin_read_from_memory(&p.img, bytes.data(), bytes.size()))
        throw DecodeError(std::string("png decode: ") + p.img.message);
    const bool color = (p.img.format & PNG_FORMAT_FLAG_COLOR) != 0;
    p.img.format = color ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
    Image out(static_cast<int>(p.img.width), static_cast<int>(p.img.height), color ? 3 : 1);
    if (!png_image_finish_read(&p.img, nullptr, out.pixels.data(), 0, nullptr))
        throw DecodeError(std::string("png decode: ") + p.img.message);
    return out;
}

Image read(const std::filesystem::path& path) { return decode(read_file(path)); }

std::vector<std::uint8_t> encode(const Image& img) {
    if (img.channels != 1 && img.channels != 3)
        throw std::invalid_argument("png::encode: only gray or RGB supported");
    PngImage p;
    p.img.width = static_cast<png_uint_32>(img.width);
    p.img.height = static_cast<png_uint_32>(img.height);
    p.img.format = img.channels == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
    return write_simplified(p.img, img.pixels.data(), static_cast<std::ptrdiff_t>(img.width) * img.channels,
                            nullptr);
}

void write(const std::filesystem::path& path, const Image& img) { write_file(path, encode(img)); }

std::vector<std::uint8_t> encode_gray16(const Grid<std::uint16_t>& img) {
    PngImage p;
    p.img.width = static_cast<png_uint_32>(img.width);
    p.img.height = static_cast<png_uint_32>(img.height);
    p.img.format = PNG_FORMAT_LINEAR_Y;
    return write_simplified(p.img, img.data.data(), img.width, nullptr);
}

void write_gray16(const std::filesystem::path& path, const Grid<std::uint16_t>& img) {
    write_file(path, encode_gray16(img));
}

Grid<std::uint16_t> read_gray16(const std::filesystem::path& path) {
    const auto bytes = read_file(path);
    PngImage p;
    if (!png_image_begin_read_from_memory(&p.img, bytes.data(), bytes.size()))
        throw DecodeError(std::string("png decode: ") + p.img.message);
    p.img.format = PNG_FORMAT_LINEAR_Y;
    Grid<std::uint16_t> out(static_cast<int>(p.img.height), static_cast<int>(p.img.width));
    if (!png_image_finish_read(&p.img, nullptr, out.data.data(), 0, nullptr))
        throw DecodeError(std::string("png decode: ") + p.img.message);
    return out;
}

void write_indexed(const std::filesystem::path& path, const Grid<std::uint8_t>& indices,
                   std::span<const std::array<std::uint8_t, 3>> palette) {
    if (palette.empty() || palette.size() > 256)
        throw std::invalid_argument("png::write_indexed: palette must hold 1..256 entries");
    for (auto v : indices.data)
        if (v >= palette.size())
            throw std::invalid_argument("png::write_indexed: index outside palette");
    std::vector<std::uint8_t> cmap;
    for (const auto& c : palette)
        cmap.insert(cmap.end(), c.begin(), c.end());
    PngImage p;
    p.img.width = static_cast<png_uint_32>(indices.width);
    p.img.height = static_cast<png_uint_32>(indices.height);
    p.img.format = PNG_FORMAT_RGB_COLORMAP;
    p.img.colormap_entries = static_cast<png_uint_32>(palette.size());
    write_file(path, write_simplified(p.img, indices.data.data(), indices.width, cmap.data()));
}

}  // namespace png

Mask mask_from_image(const Image& img) {
    if (img.channels != 1)
        throw ValidationError("mask image must be single-channel");
    Mask m(img.height, img.width, 0);
    for (std::size_t i = 0; i < img.pixels.size(); ++i) {
        const auto v = img.pixels[i];
        if (v != 0 && v != 255)
            throw ValidationError("mask image is not binary (values must be 0 or 255)");
        m[i] = v == 255 ? 1 : 0;
    }
    return m;
}

Image mask_to_image(const Mask& m) {
    Image img(m.width, m.height, 1);
    for (std::size_t i = 0; i < m.size(); ++i)
        img.pixels[i] = m[i] ? 255 : 0;
    return img;
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw LoadError("cannot open " + path.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
    if (path.has_parent_path())
        std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out)
        throw Error("cannot write " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

void write_text(const std::filesystem::path& path, const std::string& text) {
    write_file(path, {reinterpret_cast<const std::uint8_t*>(text.data()), text.size()});
}

std::string read_text(const std::filesystem::path& path) {
    const auto b = read_file(path);
    return {b.begin(), b.end()};
}

}  // namespace relayout
