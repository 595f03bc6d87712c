// Copyright (C) 2026 The relayout Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "relayout/image.hpp"
#include "relayout/tensor.hpp"

namespace relayout::layout {

/// Axis-aligned box in pixels: [x, x + w) x [y, y + h).
struct BBox {
    int x = 0;
    int y = 0;
    int w = 0;
    int h = 0;

    bool empty() const { return w <= 0 || h <= 0; }
    bool operator==(const BBox&) const = default;
};

/// Tight bounding box of the nonzero cells; empty box for an empty mask.
BBox bbox_of(const Mask& mask);

struct LayoutObject {
    std::string id;
    /// Token phrase, e.g. "cat" or "red balloon".
    std::string token;
    /// Full image resolution. Empty grid (0 x 0) when only a bbox was given.
    Mask mask;
    std::optional<BBox> bbox;
    /// Mask file name relative to the layout JSON (kept for round trips).
    std::string mask_path;

    bool has_mask() const { return mask.height > 0 && mask.width > 0; }
};

/// Ordered object list over an image. Later objects are in front.
struct LayoutSpec {
    int width = 0;
    int height = 0;
    std::vector<LayoutObject> objects;

    const LayoutObject* find(const std::string& id) const;
    std::vector<std::string> ids() const;
    /// Object masks resampled to (height, width), in layout order.
    std::vector<Mask> masks_at(int height, int width) const;
};

/// Parses layout JSON. Mask paths are resolved against `base_dir`; a missing
/// mask is allowed when a bbox is present (see resolve_target).
LayoutSpec from_json(const nlohmann::json& j, const std::filesystem::path& base_dir);
LayoutSpec load(const std::filesystem::path& path);

/// Layout JSON; mask file names default to "<id>_mask.png".
nlohmann::json to_json(const LayoutSpec& spec);
/// Writes the JSON and every mask PNG next to it.
void save(const LayoutSpec& spec, const std::filesystem::path& path);

/// Translate + uniform scale taking box `from` into box `to`. The scaled box is
/// centered inside `to`.
struct BoxTransform {
    BBox from;
    BBox to;
    double scale = 1.0;
    double offset_x = 0.0;
    double offset_y = 0.0;

    static BoxTransform between(const BBox& from, const BBox& to);
    /// Source pixel sampled by destination pixel (x, y) under nearest-neighbour
    /// lookup, or false when (x, y) falls outside the scaled box.
    bool source_of(int x, int y, int& sx, int& sy) const;
};

/// Places `mask` (whose content sits in `from`) into `to` with translation and
/// a uniform scale min(to.w / from.w, to.h / from.h), centered in `to`.
/// Nearest-neighbour sampling; the result is clipped to the canvas.
Mask transport_mask(const Mask& mask, const BBox& from, const BBox& to, int height, int width);

/// Fills in masks for target objects that only carry a bbox by transporting
/// the matching source mask, and derives missing bboxes from masks.
LayoutSpec resolve_target(const LayoutSpec& source, const LayoutSpec& target);

enum class Severity { error, warning };

struct Finding {
    Severity severity = Severity::error;
    std::string code;
    std::string message;
    std::string object_id;
};

nlohmann::json to_json(const Finding& f);
nlohmann::json to_json(const std::vector<Finding>& findings);
bool has_errors(const std::vector<Finding>& findings);

/// Single-layout checks: unique ids, mask size, binary non-empty masks, bbox
/// consistent with mask and inside the image.
std::vector<Finding> validate(const LayoutSpec& spec, const std::string& which);

/// Pairwise checks on top of validate(): equal image size, equal id sets, and
/// a warning for overlapping target masks naming the front-most object.
std::vector<Finding> validate_pair(const LayoutSpec& source, const LayoutSpec& target);

}  // namespace relayout::layout
