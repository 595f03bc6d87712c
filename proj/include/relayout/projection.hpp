// Copyright (C) 2026 The relayout Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "relayout/kernels.hpp"
#include "relayout/layout.hpp"
#include "relayout/tensor.hpp"

namespace relayout::projection {

/// Target-indexed correspondence: field[j] is a flat source index.
using ProjectionField = std::vector<std::int64_t>;

/// Cell labels of a RegionDecomposition. Values >= 0 are FOREGROUND(object index).
inline constexpr int kBackground = -1;
inline constexpr int kUncertain = -2;

struct RegionDecomposition {
    int height = 0;
    int width = 0;
    /// kBackground, kUncertain, or the index of the owning object.
    std::vector<int> labels;
    /// Transitional band over the source grid.
    Mask band;
};

/// Square structuring element of side 2r + 1. Pixels outside the grid are
/// ignored, so shapes touching the border do not erode from it.
Mask dilate(const Mask& m, int radius);
Mask erode(const Mask& m, int radius);

/// Masks are at the decomposition resolution, in layout order (last is front-most).
RegionDecomposition decompose_regions(std::span<const Mask> source_masks, std::span<const Mask> target_masks,
                                      int band_radius = 4);
/// Checks matching object ids (ValidationError) and resamples masks.
RegionDecomposition decompose_regions(const layout::LayoutSpec& source, const layout::LayoutSpec& target,
                                      int height, int width, int band_radius = 4);

/// Principal axes fitted on the rows of `data`.
struct Pca {
    std::vector<double> mean;
    /// k x d, rows are unit eigenvectors sorted by decreasing eigenvalue.
    Matrix components;
    std::vector<double> eigenvalues;

    static Pca fit(const Matrix& data, int k);
    Matrix project(const Matrix& data) const;
};

struct Descriptors {
    /// h*w x k, rows = locations.
    Matrix source;
    Matrix target;
};

/// Resamples every tapped layer to (height, width) bilinearly, concatenates
/// channels, fits PCA on the union of source and target locations and
/// projects both to k dims.
Descriptors extract_descriptors(const std::map<std::string, Latent>& source_features,
                                const std::map<std::string, Latent>& target_features, int height, int width, int k);
/// Same but with a PCA basis fitted earlier (pca_fit = once).
Descriptors extract_descriptors(const std::map<std::string, Latent>& source_features,
                                const std::map<std::string, Latent>& target_features, int height, int width,
                                const Pca& pca);
/// Concatenated raw features (before PCA), rows = locations.
Matrix concat_features(const std::map<std::string, Latent>& features, int height, int width);

/// Sim(i, j) between source i and target j, processed in target tiles.
Matrix similarity_matrix(const Matrix& source, const Matrix& target, std::size_t tile = 256);

/// field[j] = argmax_i sim(i, j), ties to the lowest i.
ProjectionField projection_field(const Matrix& sim);

struct Correction {
    ProjectionField field;
    /// Target cells whose restriction set was empty and fell back to the
    /// unrestricted match (each one is logged as a warning).
    std::vector<std::int64_t> fallback_cells;
};

/// Candidate restriction implied by a decomposition: background cells map to
/// themselves, foreground cells to their object's source mask, uncertain
/// cells to the transitional band.
kernels::CandidateSets restriction_sets(const RegionDecomposition& decomp, std::span<const Mask> source_masks);

Correction correct_projection_field(const ProjectionField& field, const Matrix& sim,
                                    const RegionDecomposition& decomp, std::span<const Mask> source_masks);

/// Corrected field computed straight from descriptors, never holding more than
/// one tile of the similarity matrix. Identical result to the two-step path.
Correction corrected_field_from_descriptors(const Matrix& source, const Matrix& target,
                                            const RegionDecomposition& decomp, std::span<const Mask> source_masks,
                                            std::size_t tile = 256);

/// out(j) = values(field(j)).
Matrix warp(const Matrix& values, const ProjectionField& field);

/// softmax(Q K^T / sqrt(d)) V_projected.
Matrix apa_attention(const Matrix& q, const Matrix& k, const Matrix& v_projected, double d);

/// Debug renderings: field as 16-bit index image, labels as palette indices
/// (0 background, 1 uncertain, 2 + i foreground of object i).
Grid<std::uint16_t> field_image(const ProjectionField& field, int height, int width);
Grid<std::uint8_t> label_image(const RegionDecomposition& decomp);

}  // namespace relayout::projection
