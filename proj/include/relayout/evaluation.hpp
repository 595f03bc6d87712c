// Copyright (C) 2026 The relayout Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "relayout/image.hpp"
#include "relayout/layout.hpp"
#include "relayout/tensor.hpp"

namespace relayout::evaluation {

enum class AlignmentMode { attention, segmentation };
std::string to_string(AlignmentMode m);

struct AlignmentScore {
    AlignmentMode mode = AlignmentMode::attention;
    std::vector<std::string> ids;
    std::vector<double> per_object;
    double score = 0.0;
};

/// Fraction of the map's mass inside `mask` (0 for an all-zero map).
double attention_in_mask(const Map2D& attention, const Mask& mask);
/// Intersection over union; two empty masks give 1.
double iou(const Mask& a, const Mask& b);

/// Target masks are resampled to each map's resolution.
AlignmentScore alignment_from_attention(const std::map<std::string, Map2D>& maps, const layout::LayoutSpec& target);
/// Segmentation masks at image resolution, keyed by object id.
AlignmentScore alignment_from_segmentation(const std::map<std::string, Mask>& segmentation,
                                           const layout::LayoutSpec& target);
/// Final-step attention maps recorded in a run manifest.
std::map<std::string, Map2D> manifest_attention(const nlohmann::json& manifest);

/// Segmentation wins when both inputs are given; neither throws ValidationError.
AlignmentScore layout_alignment_score(const nlohmann::json* manifest,
                                      const std::map<std::string, Mask>* segmentation,
                                      const layout::LayoutSpec& target);

/// External image embedder returning unit vectors.
class Embedder {
public:
    virtual ~Embedder() = default;
    virtual std::string name() const = 0;
    virtual bool available() const { return true; }
    virtual std::vector<double> embed(const Image& crop) const = 0;
};

/// Deterministic stand-in: 8x8 area-averaged RGB thumbnail projected by a
/// seeded Gaussian matrix, normalised.
class MockEmbedder final : public Embedder {
public:
    explicit MockEmbedder(std::uint64_t seed = 0, int dim = 64);
    std::string name() const override { return "mock"; }
    std::vector<double> embed(const Image& crop) const override;

private:
    Matrix projection_;
};

/// Crop clipped to the image; an empty box yields a 0 x 0 image.
Image crop(const Image& image, const layout::BBox& box);

struct SimilarityScore {
    bool skipped = false;
    std::string reason;
    std::vector<std::string> ids;
    std::vector<double> per_object;
    double mean = 0.0;
};

double cosine(std::span<const double> a, std::span<const double> b);

SimilarityScore visual_similarity(std::span<const Image> source_crops, std::span<const Image> edited_crops,
                                  const std::vector<std::string>& ids, const Embedder* embedder);
/// Crops each object's source bbox from the source and its target bbox from the edited image.
SimilarityScore visual_similarity(const Image& source, const layout::LayoutSpec& source_layout, const Image& edited,
                                  const layout::LayoutSpec& target_layout, const Embedder* embedder);

struct EvalCase {
    std::string id;
    Image source_image;
    layout::LayoutSpec source;
    layout::LayoutSpec target;
    Image edited_image;
    std::optional<nlohmann::json> manifest;
    std::optional<std::map<std::string, Mask>> segmentation;
};

/// Reads `<dir>/case.json`: {"source_image", "source_layout", "target_layout",
/// "edited_image", optional "manifest", optional "segmentation": {id: mask.png}}.
EvalCase load_case(const std::filesystem::path& dir);

nlohmann::json evaluate_case(const EvalCase& c, const Embedder* embedder);
/// Every immediate subdirectory holding a case.json, sorted by name. Report
/// carries per-case scores with mode labels plus mean / population stddev.
nlohmann::json evaluate_cases(const std::filesystem::path& dir, const Embedder* embedder);
nlohmann::json summarize(const std::vector<nlohmann::json>& case_reports);

}  // namespace relayout::evaluation
