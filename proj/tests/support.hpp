// Copyright (C) 2026 The relayout Authors
// SPDX-License-Identifier: Apache-2.0
//
// Shared fixtures for the unit tests and the acceptance runner.

#pragma once

#include <atomic>
#include <filesystem>
#include <random>
#include <string>
#include <unistd.h>

#include "relayout/backend.hpp"
#include "relayout/guidance.hpp"
#include "relayout/image.hpp"
#include "relayout/layout.hpp"
#include "relayout/rng.hpp"
#include "relayout/service.hpp"

namespace relayout::testing {

/// Removes itself on destruction.
class TempDir {
public:
    explicit TempDir(const std::string& tag = "t") {
        static std::atomic<int> counter{0};
        path_ = std::filesystem::temp_directory_path() /
                ("relayout-" + tag + "-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
        std::filesystem::remove_all(path_);
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    const std::filesystem::path& path() const { return path_; }
    std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

private:
    std::filesystem::path path_;
};

inline Mask box_mask(int height, int width, int x0, int y0, int w, int h) {
    Mask m(height, width, 0);
    for (int y = y0; y < y0 + h && y < height; ++y)
        for (int x = x0; x < x0 + w && x < width; ++x)
            m(y, x) = 1;
    return m;
}

inline Latent random_latent(int c, int h, int w, std::uint64_t seed, double scale = 1.0) {
    NormalSampler n(substream(seed, "test-latent"));
    Latent l(c, h, w);
    for (auto& v : l.data)
        v = scale * n();
    return l;
}

inline Matrix random_matrix(std::size_t rows, std::size_t cols, std::mt19937_64& gen) {
    std::normal_distribution<double> d;
    Matrix m(rows, cols);
    for (auto& v : m.data)
        v = d(gen);
    return m;
}

/// One object moved between two boxes on a flat gray canvas.
struct MoveScene {
    Image image;
    layout::LayoutSpec source;
    layout::LayoutSpec target;
};

inline MoveScene move_scene(int size = 64, layout::BBox from = {0, 0, 32, 32}, layout::BBox to = {32, 32, 32, 32},
                            const std::string& token = "cat") {
    MoveScene s;
    s.image = Image(size, size, 3, 60);
    for (int y = from.y; y < from.y + from.h; ++y)
        for (int x = from.x; x < from.x + from.w; ++x) {
            s.image.at(y, x, 0) = 220;
            s.image.at(y, x, 1) = 90;
        }
    s.source = {size, size, {{"obj", token, box_mask(size, size, from.x, from.y, from.w, from.h), from, ""}}};
    s.target = {size, size, {{"obj", token, box_mask(size, size, to.x, to.y, to.w, to.h), to, ""}}};
    return s;
}

/// Writes image, masks and both layouts into `dir`; returns the layout paths.
inline void write_scene(const MoveScene& s, const std::filesystem::path& dir) {
    png::write(dir / "source.png", s.image);
    auto src = s.source;
    auto tar = s.target;
    for (auto& o : src.objects)
        o.mask_path = "src_" + o.id + ".png";
    for (auto& o : tar.objects)
        o.mask_path = "tar_" + o.id + ".png";
    layout::save(src, dir / "source.json");
    layout::save(tar, dir / "target.json");
}

/// Region-loss targets for the toy prompt "a photo of <token>".
inline std::vector<guidance::ObjectTarget> single_object_target(const backend::Denoiser& d, const Mask& image_mask) {
    const auto [h, w] = guidance::attention_resolution(d);
    return {{{3}, resample_mask(image_mask, h, w)}};
}

/// Upload payload for a scene: masks travel as separate files.
inline service::SubmitRequest submit_request(const MoveScene& s, nlohmann::json config = nlohmann::json::object()) {
    service::SubmitRequest r;
    r.image = png::encode(s.image);
    auto src = s.source;
    auto tar = s.target;
    for (auto& o : src.objects) {
        o.mask_path = "src_" + o.id + ".png";
        r.files[o.mask_path] = png::encode(mask_to_image(o.mask));
    }
    for (auto& o : tar.objects) {
        o.mask_path = "tar_" + o.id + ".png";
        r.files[o.mask_path] = png::encode(mask_to_image(o.mask));
    }
    r.source_layout = layout::to_json(src).dump();
    r.target_layout = layout::to_json(tar).dump();
    r.config = std::move(config);
    return r;
}

}  // namespace relayout::testing
