// Copyright (C) 2026 The relayout Authors
// SPDX-License-Identifier: Apache-2.0

#include "relayout/layout.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "relayout/errors.hpp"

namespace relayout::layout {

namespace fs = std::filesystem;

BBox bbox_of(const Mask& mask) {
    int x0 = mask.width, y0 = mask.height, x1 = -1, y1 = -1;
    for (int y = 0; y < mask.height; ++y)
        for (int x = 0; x < mask.width; ++x)
            if (mask(y, x)) {
                x0 = std::min(x0, x);
                y0 = std::min(y0, y);
                x1 = std::max(x1, x);
                y1 = std::max(y1, y);
            }
    if (x1 < 0)
        return {};
    return {x0, y0, x1 - x0 + 1, y1 - y0 + 1};
}

const LayoutObject* LayoutSpec::find(const std::string& id) const {
    for (const auto& o : objects)
        if (o.id == id)
            return &o;
    return nullptr;
}

std::vector<std::string> LayoutSpec::ids() const {
    std::vector<std::string> out;
    for (const auto& o : objects)
        out.push_back(o.id);
    return out;
}

std::vector<Mask> LayoutSpec::masks_at(int h, int w) const {
    std::vector<Mask> out;
    for (const auto& o : objects) {
        if (!o.has_mask())
            throw ValidationError("object '" + o.id + "' has no mask");
        out.push_back(o.mask.same_shape(h, w) ? o.mask : resample_mask(o.mask, h, w));
    }
    return out;
}

LayoutSpec from_json(const nlohmann::json& j, const fs::path& base_dir) {
    if (!j.is_object() || !j.contains("width") || !j.contains("height") || !j.contains("objects"))
        throw ValidationError("layout JSON needs width, height and objects");
    LayoutSpec spec;
    try {
        spec.width = j.at("width").get<int>();
        spec.height = j.at("height").get<int>();
        if (spec.width <= 0 || spec.height <= 0)
            throw ValidationError("layout width and height must be positive");
        if (!j.at("objects").is_array())
            throw ValidationError("layout objects must be an array");
        for (const auto& o : j.at("objects")) {
            LayoutObject obj;
            obj.id = o.at("id").get<std::string>();
            obj.token = o.value("token", std::string());
            if (o.contains("bbox") && !o.at("bbox").is_null()) {
                const auto b = o.at("bbox").get<std::vector<int>>();
                if (b.size() != 4)
                    throw ValidationError("bbox of '" + obj.id + "' must be [x, y, w, h]");
                obj.bbox = BBox{b[0], b[1], b[2], b[3]};
            }
            if (o.contains("mask") && !o.at("mask").is_null()) {
                obj.mask_path = o.at("mask").get<std::string>();
                const fs::path p = fs::path(obj.mask_path).is_absolute() ? fs::path(obj.mask_path)
                                                                         : base_dir / obj.mask_path;
                obj.mask = mask_from_image(png::read(p));
            } else if (!obj.bbox) {
                throw ValidationError("object '" + obj.id + "' needs a mask or a bbox");
            }
            spec.objects.push_back(std::move(obj));
        }
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError(std::string("layout JSON: ") + e.what());
    } catch (const LoadError& e) {
        throw ValidationError(e.what());
    } catch (const DecodeError& e) {
        throw ValidationError(std::string("mask image: ") + e.what());
    }
    return spec;
}

LayoutSpec load(const fs::path& path) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(read_text(path));
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError(path.string() + ": " + e.what());
    } catch (const LoadError& e) {
        throw ValidationError(e.what());
    }
    return from_json(j, path.parent_path());
}

namespace {

std::string mask_name(const LayoutObject& o) { return o.mask_path.empty() ? o.id + "_mask.png" : o.mask_path; }

}  // namespace

nlohmann::json to_json(const LayoutSpec& spec) {
    nlohmann::json objects = nlohmann::json::array();
    for (const auto& o : spec.objects) {
        nlohmann::json e{{"id", o.id}, {"token", o.token}};
        if (o.has_mask())
            e["mask"] = mask_name(o);
        if (o.bbox)
            e["bbox"] = {o.bbox->x, o.bbox->y, o.bbox->w, o.bbox->h};
        objects.push_back(std::move(e));
    }
    return {{"width", spec.width}, {"height", spec.height}, {"objects", std::move(objects)}};
}

void save(const LayoutSpec& spec, const fs::path& path) {
    write_text(path, to_json(spec).dump(2));
    for (const auto& o : spec.objects)
        if (o.has_mask())
            png::write(path.parent_path() / mask_name(o), mask_to_image(o.mask));
}

BoxTransform BoxTransform::between(const BBox& from, const BBox& to) {
    if (from.empty() || to.empty())
        throw ValidationError("box transform needs non-empty boxes");
    BoxTransform t;
    t.from = from;
    t.to = to;
    t.scale = std::min(static_cast<double>(to.w) / from.w, static_cast<double>(to.h) / from.h);
    t.offset_x = to.x + (to.w - from.w * t.scale) / 2.0;
    t.offset_y = to.y + (to.h - from.h * t.scale) / 2.0;
    return t;
}

bool BoxTransform::source_of(int x, int y, int& sx, int& sy) const {
    const double fx = (x + 0.5 - offset_x) / scale;
    const double fy = (y + 0.5 - offset_y) / scale;
    if (fx < 0.0 || fy < 0.0 || fx >= from.w || fy >= from.h)
        return false;
    sx = from.x + static_cast<int>(std::floor(fx));
    sy = from.y + static_cast<int>(std::floor(fy));
    return true;
}

Mask transport_mask(const Mask& mask, const BBox& from, const BBox& to, int height, int width) {
    const auto tr = BoxTransform::between(from, to);
    Mask out(height, width, 0);
    for (int y = std::max(0, to.y); y < std::min(height, to.y + to.h); ++y)
        for (int x = std::max(0, to.x); x < std::min(width, to.x + to.w); ++x) {
            int sx = 0, sy = 0;
            if (tr.source_of(x, y, sx, sy) && sx >= 0 && sy >= 0 && sx < mask.width && sy < mask.height)
                out(y, x) = mask(sy, sx);
        }
    return out;
}

LayoutSpec resolve_target(const LayoutSpec& source, const LayoutSpec& target) {
    LayoutSpec out = target;
    for (auto& o : out.objects) {
        if (o.has_mask()) {
            if (!o.bbox)
                o.bbox = bbox_of(o.mask);
            continue;
        }
        const LayoutObject* src = source.find(o.id);
        if (!src || !src->has_mask())
            throw ValidationError("target object '" + o.id + "' has only a bbox and no source mask to transport");
        if (o.bbox->empty())
            throw ValidationError("target bbox of '" + o.id + "' has zero area");
        o.mask = transport_mask(src->mask, bbox_of(src->mask), *o.bbox, out.height, out.width);
        o.bbox = bbox_of(o.mask);
        if (o.mask_path.empty())
            o.mask_path = o.id + "_target_mask.png";
    }
    return out;
}

nlohmann::json to_json(const Finding& f) {
    nlohmann::json j{{"severity", f.severity == Severity::error ? "error" : "warning"},
                     {"code", f.code},
                     {"message", f.message}};
    if (!f.object_id.empty())
        j["object_id"] = f.object_id;
    return j;
}

nlohmann::json to_json(const std::vector<Finding>& findings) {
    nlohmann::json a = nlohmann::json::array();
    for (const auto& f : findings)
        a.push_back(to_json(f));
    return a;
}

bool has_errors(const std::vector<Finding>& findings) {
    return std::any_of(findings.begin(), findings.end(),
                       [](const Finding& f) { return f.severity == Severity::error; });
}

std::vector<Finding> validate(const LayoutSpec& spec, const std::string& which) {
    std::vector<Finding> out;
    auto error = [&](std::string code, std::string msg, std::string id) {
        out.push_back({Severity::error, std::move(code), which + ": " + msg, std::move(id)});
    };
    if (spec.width <= 0 || spec.height <= 0)
        error("bad_size", "image size must be positive", "");
    std::set<std::string> seen;
    for (const auto& o : spec.objects) {
        if (o.id.empty())
            error("empty_id", "object id must not be empty", "");
        else if (!seen.insert(o.id).second)
            error("duplicate_id", "object id '" + o.id + "' appears more than once", o.id);
        if (!o.has_mask()) {
            error("missing_mask", "object '" + o.id + "' has no mask", o.id);
            continue;
        }
        if (!o.mask.same_shape(spec.height, spec.width)) {
            error("mask_size", "mask of '" + o.id + "' does not match the image size", o.id);
            continue;
        }
        if (std::any_of(o.mask.data.begin(), o.mask.data.end(), [](std::uint8_t v) { return v > 1; }))
            error("mask_not_binary", "mask of '" + o.id + "' is not binary", o.id);
        const BBox box = bbox_of(o.mask);
        if (box.empty()) {
            error("empty_mask", "mask of '" + o.id + "' is empty", o.id);
            continue;
        }
        if (o.bbox) {
            const BBox& b = *o.bbox;
            if (b.x < 0 || b.y < 0 || b.x + b.w > spec.width || b.y + b.h > spec.height || b.empty())
                error("bbox_bounds", "bbox of '" + o.id + "' is outside the image or empty", o.id);
            else if (!(b == box))
                error("bbox_mismatch", "bbox of '" + o.id + "' is not the bounding box of its mask", o.id);
        }
    }
    return out;
}

std::vector<Finding> validate_pair(const LayoutSpec& source, const LayoutSpec& target) {
    auto out = validate(source, "source");
    auto t = validate(target, "target");
    out.insert(out.end(), t.begin(), t.end());
    if (source.width != target.width || source.height != target.height)
        out.push_back({Severity::error, "size_mismatch", "source and target layouts have different image sizes", ""});
    for (const auto& o : source.objects)
        if (!target.find(o.id))
            out.push_back(
                {Severity::error, "missing_in_target", "object '" + o.id + "' is missing from the target", o.id});
    for (const auto& o : target.objects)
        if (!source.find(o.id))
            out.push_back(
                {Severity::error, "missing_in_source", "object '" + o.id + "' is missing from the source", o.id});

    // Later objects are drawn in front.
    for (std::size_t b = 1; b < target.objects.size(); ++b)
        for (std::size_t a = 0; a < b; ++a) {
            const auto& ma = target.objects[a].mask;
            const auto& mb = target.objects[b].mask;
            if (!ma.same_shape(target.height, target.width) || !mb.same_shape(target.height, target.width))
                continue;
            std::size_t overlap = 0;
            for (std::size_t i = 0; i < ma.size(); ++i)
                overlap += (ma[i] && mb[i]) ? 1 : 0;
            if (overlap)
                out.push_back({Severity::warning, "target_overlap",
                               "target masks of '" + target.objects[a].id + "' and '" + target.objects[b].id +
                                   "' overlap on " + std::to_string(overlap) + " pixels; '" +
                                   target.objects[b].id + "' is in front",
                               target.objects[b].id});
        }
    return out;
}

}  // namespace relayout::layout
