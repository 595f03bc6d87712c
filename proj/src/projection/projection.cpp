// Copyright (C) 2026 The relayout Authors
// SPDX-License-Identifier: Apache-2.0

#include "relayout/projection.hpp"

#include <Eigen/Dense>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>

#include "relayout/errors.hpp"

namespace relayout::projection {

namespace {

/// Separable square min/max filter; out-of-grid pixels do not take part.
Mask morph(const Mask& m, int radius, bool dilation) {
    if (radius < 0)
        throw ValidationError("morphology radius must be >= 0");
    Mask tmp(m.height, m.width, 0), out(m.height, m.width, 0);
    for (int y = 0; y < m.height; ++y)
        for (int x = 0; x < m.width; ++x) {
            bool v = !dilation;
            for (int dx = -radius; dx <= radius; ++dx) {
                const int xx = x + dx;
                if (xx < 0 || xx >= m.width)
                    continue;
                v = dilation ? (v || m(y, xx)) : (v && m(y, xx));
            }
            tmp(y, x) = v ? 1 : 0;
        }
    for (int y = 0; y < m.height; ++y)
        for (int x = 0; x < m.width; ++x) {
            bool v = !dilation;
            for (int dy = -radius; dy <= radius; ++dy) {
                const int yy = y + dy;
                if (yy < 0 || yy >= m.height)
                    continue;
                v = dilation ? (v || tmp(yy, x)) : (v && tmp(yy, x));
            }
            out(y, x) = v ? 1 : 0;
        }
    return out;
}

void check_masks(std::span<const Mask> masks, int h, int w, const char* what) {
    for (const auto& m : masks)
        if (!m.same_shape(h, w))
            throw ContractViolation(std::string(what) + " mask resolution differs from the decomposition");
}

std::vector<std::uint32_t> cells_of(const Mask& m) {
    std::vector<std::uint32_t> out;
    for (std::size_t u = 0; u < m.size(); ++u)
        if (m[u])
            out.push_back(static_cast<std::uint32_t>(u));
    return out;
}

}  // namespace

Mask dilate(const Mask& m, int radius) { return morph(m, radius, true); }
Mask erode(const Mask& m, int radius) { return morph(m, radius, false); }

RegionDecomposition decompose_regions(std::span<const Mask> source_masks, std::span<const Mask> target_masks,
                                      int band_radius) {
    if (source_masks.size() != target_masks.size())
        throw ValidationError("decompose_regions: source and target have different object counts");
    int h = 0, w = 0;
    if (!source_masks.empty()) {
        h = source_masks.front().height;
        w = source_masks.front().width;
    } else {
        throw ValidationError("decompose_regions: resolution unknown without masks; use the layout overload");
    }
    check_masks(source_masks, h, w, "source");
    check_masks(target_masks, h, w, "target");

    RegionDecomposition d;
    d.height = h;
    d.width = w;
    d.labels.assign(static_cast<std::size_t>(h) * w, kBackground);
    const Mask src_union = mask_union(source_masks, h, w);
    for (std::size_t u = 0; u < d.labels.size(); ++u) {
        int owner = kBackground;
        for (std::size_t i = 0; i < target_masks.size(); ++i)
            if (target_masks[i][u])
                owner = static_cast<int>(i);
        if (owner >= 0)
            d.labels[u] = owner;
        else if (src_union[u])
            d.labels[u] = kUncertain;
    }
    const Mask dil = dilate(src_union, band_radius);
    const Mask ero = erode(src_union, band_radius);
    d.band = Mask(h, w, 0);
    for (std::size_t u = 0; u < d.band.size(); ++u)
        d.band[u] = (dil[u] && !ero[u]) ? 1 : 0;
    return d;
}

RegionDecomposition decompose_regions(const layout::LayoutSpec& source, const layout::LayoutSpec& target, int height,
                                      int width, int band_radius) {
    if (source.objects.size() != target.objects.size())
        throw ValidationError("decompose_regions: layouts have different objects");
    for (const auto& o : source.objects)
        if (!target.find(o.id))
            throw ValidationError("decompose_regions: object '" + o.id + "' missing from target layout");
    if (source.objects.empty()) {
        RegionDecomposition d;
        d.height = height;
        d.width = width;
        d.labels.assign(static_cast<std::size_t>(height) * width, kBackground);
        d.band = Mask(height, width, 0);
        return d;
    }
    // Target masks in target order; source masks reordered to match.
    std::vector<Mask> tar = target.masks_at(height, width);
    std::vector<Mask> src;
    for (const auto& o : target.objects) {
        const auto* s = source.find(o.id);
        src.push_back(s->mask.same_shape(height, width) ? s->mask : resample_mask(s->mask, height, width));
    }
    return decompose_regions(src, tar, band_radius);
}

Pca Pca::fit(const Matrix& data, int k) {
    const auto d = static_cast<int>(data.cols);
    if (k < 1 || k > d)
        throw ValidationError("PCA: k must lie in [1, " + std::to_string(d) + "]");
    if (data.rows == 0)
        throw ValidationError("PCA: no samples");
    Pca p;
    p.mean.assign(data.cols, 0.0);
    for (std::size_t r = 0; r < data.rows; ++r)
        for (std::size_t c = 0; c < data.cols; ++c)
            p.mean[c] += data(r, c);
    for (auto& v : p.mean)
        v /= static_cast<double>(data.rows);
    Eigen::MatrixXd x(data.rows, data.cols);
    for (std::size_t r = 0; r < data.rows; ++r)
        for (std::size_t c = 0; c < data.cols; ++c)
            x(r, c) = data(r, c) - p.mean[c];
    const Eigen::MatrixXd cov = (x.transpose() * x) / static_cast<double>(data.rows);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov);
    if (es.info() != Eigen::Success)
        throw Error("PCA: eigen decomposition failed");
    // Eigen returns ascending eigenvalues.
    p.components = Matrix(static_cast<std::size_t>(k), data.cols);
    for (int i = 0; i < k; ++i) {
        const int col = d - 1 - i;
        Eigen::VectorXd v = es.eigenvectors().col(col);
        // Sign convention: largest-magnitude entry positive.
        Eigen::Index arg = 0;
        v.cwiseAbs().maxCoeff(&arg);
        if (v(arg) < 0)
            v = -v;
        for (int c = 0; c < d; ++c)
            p.components(i, c) = v(c);
        p.eigenvalues.push_back(es.eigenvalues()(col));
    }
    return p;
}

Matrix Pca::project(const Matrix& data) const {
    if (data.cols != mean.size())
        throw ContractViolation("PCA: feature dimension differs from the fitted basis");
    Matrix centered = data;
    for (std::size_t r = 0; r < data.rows; ++r)
        for (std::size_t c = 0; c < data.cols; ++c)
            centered(r, c) -= mean[c];
    return kernels::matmul_transpose_b(centered, components);
}

Matrix concat_features(const std::map<std::string, Latent>& features, int height, int width) {
    if (features.empty())
        throw ContractViolation("no feature layers tapped");
    std::size_t total = 0;
    for (const auto& [_, f] : features)
        total += static_cast<std::size_t>(f.channels);
    Matrix out(static_cast<std::size_t>(height) * width, total);
    std::size_t off = 0;
    for (const auto& [name, f] : features) {
        const Latent r = (f.height == height && f.width == width) ? f : bilinear_resample(f, height, width);
        for (int c = 0; c < r.channels; ++c)
            for (std::size_t u = 0; u < r.plane(); ++u)
                out(u, off + static_cast<std::size_t>(c)) = r.at(c, u);
        off += static_cast<std::size_t>(f.channels);
    }
    return out;
}

namespace {

void check_same_taps(const std::map<std::string, Latent>& a, const std::map<std::string, Latent>& b) {
    if (a.size() != b.size())
        throw ContractViolation("source and target branches tapped different feature layers");
    for (const auto& [name, f] : a) {
        const auto it = b.find(name);
        if (it == b.end() || it->second.channels != f.channels)
            throw ContractViolation("source and target branches tapped different feature layers");
    }
}

}  // namespace

Descriptors extract_descriptors(const std::map<std::string, Latent>& source_features,
                                const std::map<std::string, Latent>& target_features, int height, int width, int k) {
    check_same_taps(source_features, target_features);
    const Matrix s = concat_features(source_features, height, width);
    const Matrix t = concat_features(target_features, height, width);
    if (k < 1 || static_cast<std::size_t>(k) > s.cols)
        throw ValidationError("PCA dims k=" + std::to_string(k) + " exceeds total feature dim " +
                              std::to_string(s.cols));
    Matrix both(s.rows + t.rows, s.cols);
    std::copy(s.data.begin(), s.data.end(), both.data.begin());
    std::copy(t.data.begin(), t.data.end(), both.data.begin() + static_cast<std::ptrdiff_t>(s.data.size()));
    const Pca pca = Pca::fit(both, k);
    return {pca.project(s), pca.project(t)};
}

Descriptors extract_descriptors(const std::map<std::string, Latent>& source_features,
                                const std::map<std::string, Latent>& target_features, int height, int width,
                                const Pca& pca) {
    check_same_taps(source_features, target_features);
    return {pca.project(concat_features(source_features, height, width)),
            pca.project(concat_features(target_features, height, width))};
}

Matrix similarity_matrix(const Matrix& source, const Matrix& target, std::size_t tile) {
    if (source.cols != target.cols)
        throw ContractViolation("similarity_matrix: descriptor dimensions differ");
    return kernels::cosine_similarity(source, target, tile);
}

ProjectionField projection_field(const Matrix& sim) { return kernels::column_argmax(sim); }

kernels::CandidateSets restriction_sets(const RegionDecomposition& decomp, std::span<const Mask> source_masks) {
    check_masks(source_masks, decomp.height, decomp.width, "source");
    kernels::CandidateSets c;
    c.sets.push_back(cells_of(decomp.band));
    for (const auto& m : source_masks)
        c.sets.push_back(cells_of(m));
    c.set_of_target.resize(decomp.labels.size());
    for (std::size_t j = 0; j < decomp.labels.size(); ++j) {
        const int l = decomp.labels[j];
        if (l == kUncertain) {
            c.set_of_target[j] = 0;
        } else if (l >= 0) {
            if (static_cast<std::size_t>(l) >= source_masks.size())
                throw ContractViolation("decomposition refers to an unknown object");
            c.set_of_target[j] = 1 + l;
        } else {
            c.set_of_target[j] = static_cast<int>(c.sets.size());
            c.sets.push_back({static_cast<std::uint32_t>(j)});
        }
    }
    return c;
}

namespace {

Correction finish(std::vector<std::int64_t> restricted, const RegionDecomposition& decomp,
                  const std::function<std::int64_t(std::size_t)>& unrestricted) {
    Correction out;
    out.field = std::move(restricted);
    for (std::size_t j = 0; j < out.field.size(); ++j) {
        if (out.field[j] != kernels::kNoMatch)
            continue;
        out.field[j] = unrestricted(j);
        out.fallback_cells.push_back(static_cast<std::int64_t>(j));
        spdlog::warn("projection field: empty restriction set for target cell {} ({}), using unrestricted match {}",
                     j, decomp.labels[j] == kUncertain ? "uncertain" : "foreground", out.field[j]);
    }
    return out;
}

}  // namespace

Correction correct_projection_field(const ProjectionField& field, const Matrix& sim, const RegionDecomposition& decomp,
                                    std::span<const Mask> source_masks) {
    const std::size_t n = decomp.labels.size();
    if (field.size() != n || sim.cols != n || sim.rows != n)
        throw ContractViolation("correct_projection_field: resolutions differ");
    auto restricted = kernels::restricted_column_argmax(sim, restriction_sets(decomp, source_masks));
    return finish(std::move(restricted), decomp, [&](std::size_t j) { return field[j]; });
}

Correction corrected_field_from_descriptors(const Matrix& source, const Matrix& target,
                                            const RegionDecomposition& decomp, std::span<const Mask> source_masks,
                                            std::size_t tile) {
    const std::size_t n = decomp.labels.size();
    if (source.rows != n || target.rows != n)
        throw ContractViolation("corrected_field_from_descriptors: resolutions differ");
    const auto sets = restriction_sets(decomp, source_masks);
    auto restricted = kernels::streaming_restricted_argmax(source, target, sets, tile);
    std::vector<std::int64_t> free;
    if (std::find(restricted.begin(), restricted.end(), kernels::kNoMatch) != restricted.end()) {
        kernels::CandidateSets all;
        all.set_of_target.assign(n, -1);
        free = kernels::streaming_restricted_argmax(source, target, all, tile);
    }
    return finish(std::move(restricted), decomp, [&](std::size_t j) { return free[j]; });
}

Matrix warp(const Matrix& values, const ProjectionField& field) { return kernels::gather_rows(values, field); }

Matrix apa_attention(const Matrix& q, const Matrix& k, const Matrix& v_projected, double d) {
    if (!(d > 0.0))
        throw ContractViolation("apa_attention: d must be positive");
    if (q.cols != k.cols || k.rows != v_projected.rows)
        throw ContractViolation("apa_attention: incompatible shapes");
    return kernels::matmul(kernels::attention_probabilities(q, k, 1.0 / std::sqrt(d)), v_projected);
}

Grid<std::uint16_t> field_image(const ProjectionField& field, int height, int width) {
    if (field.size() != static_cast<std::size_t>(height) * width)
        throw ContractViolation("field_image: size mismatch");
    Grid<std::uint16_t> img(height, width);
    for (std::size_t j = 0; j < field.size(); ++j) {
        if (field[j] < 0 || field[j] > 65535)
            throw ContractViolation("field_image: index does not fit 16 bits");
        img[j] = static_cast<std::uint16_t>(field[j]);
    }
    return img;
}

Grid<std::uint8_t> label_image(const RegionDecomposition& decomp) {
    Grid<std::uint8_t> img(decomp.height, decomp.width);
    for (std::size_t j = 0; j < decomp.labels.size(); ++j) {
        const int l = decomp.labels[j];
        img[j] = static_cast<std::uint8_t>(l == kBackground ? 0 : l == kUncertain ? 1 : std::min(255, 2 + l));
    }
    return img;
}

}  // namespace relayout::projection
