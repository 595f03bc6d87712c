// Copyright (C) 2026 The relayout Authors
// SPDX-License-Identifier: Apache-2.0

#include "relayout/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <spdlog/spdlog.h>

#include "relayout/errors.hpp"
#include "relayout/rng.hpp"

namespace relayout::evaluation {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

/// Sum in sorted order so the result does not depend on object order.
double sorted_mean(std::vector<double> v) {
    if (v.empty())
        return 0.0;
    std::sort(v.begin(), v.end());
    double s = 0.0;
    for (double x : v)
        s += x;
    return s / static_cast<double>(v.size());
}

const Mask& target_mask(const layout::LayoutSpec& target, const std::string& id) {
    const auto* o = target.find(id);
    if (!o)
        throw ValidationError("object '" + id + "' is not in the target layout");
    if (!o->has_mask())
        throw ValidationError("target object '" + id + "' has no mask");
    return o->mask;
}

}  // namespace

std::string to_string(AlignmentMode m) { return m == AlignmentMode::attention ? "attention" : "segmentation"; }

double attention_in_mask(const Map2D& a, const Mask& m) {
    if (!m.same_shape(a.height, a.width))
        throw ContractViolation("attention_in_mask: resolution mismatch");
    double in = 0.0, total = 0.0;
    for (std::size_t u = 0; u < a.size(); ++u) {
        if (a[u] < 0.0 || !std::isfinite(a[u]))
            throw ValidationError("attention map must be finite and non-negative");
        total += a[u];
        if (m[u])
            in += a[u];
    }
    return total > 0.0 ? std::clamp(in / total, 0.0, 1.0) : 0.0;
}

double iou(const Mask& a, const Mask& b) {
    if (!a.same_shape(b.height, b.width))
        throw ContractViolation("iou: resolution mismatch");
    std::size_t inter = 0, uni = 0;
    for (std::size_t u = 0; u < a.size(); ++u) {
        inter += (a[u] && b[u]) ? 1 : 0;
        uni += (a[u] || b[u]) ? 1 : 0;
    }
    return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

AlignmentScore alignment_from_attention(const std::map<std::string, Map2D>& maps, const layout::LayoutSpec& target) {
    AlignmentScore s;
    s.mode = AlignmentMode::attention;
    for (const auto& o : target.objects) {
        auto it = maps.find(o.id);
        if (it == maps.end())
            throw ValidationError("no attention map for object '" + o.id + "'");
        const Mask m = resample_mask(target_mask(target, o.id), it->second.height, it->second.width);
        s.ids.push_back(o.id);
        s.per_object.push_back(attention_in_mask(it->second, m));
    }
    s.score = sorted_mean(s.per_object);
    return s;
}

AlignmentScore alignment_from_segmentation(const std::map<std::string, Mask>& seg, const layout::LayoutSpec& target) {
    AlignmentScore s;
    s.mode = AlignmentMode::segmentation;
    for (const auto& o : target.objects) {
        auto it = seg.find(o.id);
        if (it == seg.end())
            throw ValidationError("no segmentation mask for object '" + o.id + "'");
        s.ids.push_back(o.id);
        s.per_object.push_back(iou(it->second, target_mask(target, o.id)));
    }
    s.score = sorted_mean(s.per_object);
    return s;
}

std::map<std::string, Map2D> manifest_attention(const json& manifest) {
    std::map<std::string, Map2D> out;
    if (!manifest.contains("final") || !manifest.at("final").contains("attention"))
        return out;
    try {
        for (const auto& [id, m] : manifest.at("final").at("attention").items()) {
            Map2D map(m.at("height").get<int>(), m.at("width").get<int>());
            const auto data = m.at("data").get<std::vector<double>>();
            if (data.size() != map.size())
                throw ValidationError("manifest attention map for '" + id + "' has the wrong size");
            map.data = data;
            out.emplace(id, std::move(map));
        }
    } catch (const json::exception& e) {
        throw ValidationError(std::string("manifest attention: ") + e.what());
    }
    return out;
}

AlignmentScore layout_alignment_score(const json* manifest, const std::map<std::string, Mask>* segmentation,
                                      const layout::LayoutSpec& target) {
    if (segmentation)
        return alignment_from_segmentation(*segmentation, target);
    if (manifest) {
        const auto maps = manifest_attention(*manifest);
        if (!maps.empty())
            return alignment_from_attention(maps, target);
    }
    throw ValidationError("layout alignment needs final attention maps or a segmentation");
}

MockEmbedder::MockEmbedder(std::uint64_t seed, int dim) : projection_(static_cast<std::size_t>(dim), 8 * 8 * 3) {
    if (dim < 1)
        throw ValidationError("mock embedder dimension must be >= 1");
    NormalSampler rng(substream(seed, "mock-embedder"));
    for (auto& v : projection_.data)
        v = rng();
}

std::vector<double> MockEmbedder::embed(const Image& img) const {
    if (img.width <= 0 || img.height <= 0)
        throw ValidationError("cannot embed an empty crop");
    std::vector<double> thumb(8 * 8 * 3, 0.0);
    for (int ch = 0; ch < 3; ++ch) {
        Map2D plane(img.height, img.width);
        for (int y = 0; y < img.height; ++y)
            for (int x = 0; x < img.width; ++x)
                plane(y, x) = img.at(y, x, img.channels == 1 ? 0 : ch) / 255.0;
        const Map2D small = area_resample(plane, 8, 8);
        for (std::size_t u = 0; u < small.size(); ++u)
            thumb[static_cast<std::size_t>(ch) * 64 + u] = small[u] - 0.5;
    }
    std::vector<double> e(projection_.rows, 0.0);
    for (std::size_t r = 0; r < projection_.rows; ++r)
        for (std::size_t c = 0; c < thumb.size(); ++c)
            e[r] += projection_(r, c) * thumb[c];
    double n = 0.0;
    for (double v : e)
        n += v * v;
    n = std::sqrt(n);
    if (n > 0.0)
        for (double& v : e)
            v /= n;
    return e;
}

Image crop(const Image& image, const layout::BBox& box) {
    const int x0 = std::max(0, box.x), y0 = std::max(0, box.y);
    const int x1 = std::min(image.width, box.x + box.w), y1 = std::min(image.height, box.y + box.h);
    if (x1 <= x0 || y1 <= y0)
        return Image(0, 0, image.channels);
    Image out(x1 - x0, y1 - y0, image.channels);
    for (int y = y0; y < y1; ++y)
        for (int x = x0; x < x1; ++x)
            for (int c = 0; c < image.channels; ++c)
                out.at(y - y0, x - x0, c) = image.at(y, x, c);
    return out;
}

double cosine(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size())
        throw ContractViolation("cosine: dimension mismatch");
    double ab = 0.0, aa = 0.0, bb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        ab += a[i] * b[i];
        aa += a[i] * a[i];
        bb += b[i] * b[i];
    }
    const double d = std::sqrt(aa) * std::sqrt(bb);
    return d > 1e-12 ? ab / d : 0.0;
}

SimilarityScore visual_similarity(std::span<const Image> src, std::span<const Image> edited,
                                  const std::vector<std::string>& ids, const Embedder* embedder) {
    if (src.size() != edited.size() || src.size() != ids.size())
        throw ContractViolation("visual_similarity: crop sets differ in size");
    SimilarityScore s;
    s.ids = ids;
    if (!embedder || !embedder->available()) {
        s.skipped = true;
        s.reason = embedder ? "embedder '" + embedder->name() + "' unavailable" : "no embedder configured";
        return s;
    }
    try {
        for (std::size_t i = 0; i < src.size(); ++i) {
            if (src[i].width == 0 || edited[i].width == 0) {
                spdlog::warn("object '{}' has an empty crop; scored 0", ids[i]);
                s.per_object.push_back(0.0);
                continue;
            }
            const auto a = embedder->embed(src[i]);
            const auto b = embedder->embed(edited[i]);
            s.per_object.push_back(cosine(a, b));
        }
    } catch (const BackendError& e) {
        s = {};
        s.ids = ids;
        s.skipped = true;
        s.reason = e.what();
        return s;
    }
    s.mean = sorted_mean(s.per_object);
    return s;
}

SimilarityScore visual_similarity(const Image& source, const layout::LayoutSpec& source_layout, const Image& edited,
                                  const layout::LayoutSpec& target_layout, const Embedder* embedder) {
    std::vector<Image> a, b;
    std::vector<std::string> ids;
    for (const auto& t : target_layout.objects) {
        const auto* s = source_layout.find(t.id);
        if (!s)
            throw ValidationError("object '" + t.id + "' missing from the source layout");
        const layout::BBox sb = s->bbox ? *s->bbox : layout::bbox_of(s->mask);
        const layout::BBox tb = t.bbox ? *t.bbox : layout::bbox_of(t.mask);
        a.push_back(crop(source, sb));
        b.push_back(crop(edited, tb));
        ids.push_back(t.id);
    }
    return visual_similarity(a, b, ids, embedder);
}

EvalCase load_case(const fs::path& dir) {
    const fs::path cj = dir / "case.json";
    json j;
    try {
        j = json::parse(read_text(cj));
    } catch (const json::exception& e) {
        throw ValidationError(cj.string() + ": " + e.what());
    }
    auto path_of = [&](const char* key) { return dir / j.at(key).get<std::string>(); };
    EvalCase c;
    c.id = dir.filename().string();
    try {
        c.source_image = png::read(path_of("source_image"));
        c.source = layout::load(path_of("source_layout"));
        c.target = layout::resolve_target(c.source, layout::load(path_of("target_layout")));
        c.edited_image = png::read(path_of("edited_image"));
        if (j.contains("manifest") && !j.at("manifest").is_null())
            c.manifest = json::parse(read_text(path_of("manifest")));
        if (j.contains("segmentation") && !j.at("segmentation").is_null()) {
            std::map<std::string, Mask> seg;
            for (const auto& [id, p] : j.at("segmentation").items())
                seg.emplace(id, mask_from_image(png::read(dir / p.get<std::string>())));
            c.segmentation = std::move(seg);
        }
    } catch (const json::exception& e) {
        throw ValidationError(cj.string() + ": " + e.what());
    }
    auto findings = layout::validate_pair(c.source, c.target);
    if (layout::has_errors(findings))
        throw ValidationError("case " + c.id + ": invalid layouts");
    return c;
}

json evaluate_case(const EvalCase& c, const Embedder* embedder) {
    json r = {{"case", c.id}};
    try {
        const auto a = layout_alignment_score(c.manifest ? &*c.manifest : nullptr,
                                              c.segmentation ? &*c.segmentation : nullptr, c.target);
        json per = json::object();
        for (std::size_t i = 0; i < a.ids.size(); ++i)
            per[a.ids[i]] = a.per_object[i];
        r["layout_alignment"] = {{"mode", to_string(a.mode)}, {"score", a.score}, {"per_object", per}};
    } catch (const ValidationError& e) {
        r["layout_alignment"] = {{"status", "ERROR"}, {"message", e.what()}};
    }
    const auto s = visual_similarity(c.source_image, c.source, c.edited_image, c.target, embedder);
    if (s.skipped) {
        r["visual_similarity"] = {{"status", "SKIPPED"}, {"reason", s.reason}};
    } else {
        json per = json::object();
        for (std::size_t i = 0; i < s.ids.size(); ++i)
            per[s.ids[i]] = s.per_object[i];
        r["visual_similarity"] = {{"embedder", embedder->name()}, {"mean", s.mean}, {"per_object", per}};
    }
    return r;
}

json summarize(const std::vector<json>& reports) {
    auto stats = [](std::vector<double> v) -> json {
        if (v.empty())
            return {{"status", "SKIPPED"}, {"count", 0}};
        const double m = sorted_mean(v);
        std::vector<double> sq;
        for (double x : v)
            sq.push_back((x - m) * (x - m));
        return {{"mean", m}, {"stddev", std::sqrt(sorted_mean(sq))}, {"count", v.size()}};
    };
    std::map<std::string, std::vector<double>> alignment;
    std::vector<double> similarity;
    for (const auto& r : reports) {
        const auto& la = r.at("layout_alignment");
        if (la.contains("score"))
            alignment[la.at("mode").get<std::string>()].push_back(la.at("score").get<double>());
        const auto& vs = r.at("visual_similarity");
        if (vs.contains("mean"))
            similarity.push_back(vs.at("mean").get<double>());
    }
    json la = json::object();
    for (const char* mode : {"attention", "segmentation"})
        la[mode] = stats(alignment[mode]);
    return {{"layout_alignment", la}, {"visual_similarity", stats(similarity)}};
}

json evaluate_cases(const fs::path& dir, const Embedder* embedder) {
    if (!fs::is_directory(dir))
        throw ValidationError("cases directory not found: " + dir.string());
    std::vector<fs::path> dirs;
    for (const auto& e : fs::directory_iterator(dir))
        if (e.is_directory() && fs::exists(e.path() / "case.json"))
            dirs.push_back(e.path());
    std::sort(dirs.begin(), dirs.end());
    std::vector<json> reports(dirs.size());
#pragma omp parallel for schedule(dynamic)
    for (std::size_t i = 0; i < dirs.size(); ++i) {
        try {
            reports[i] = evaluate_case(load_case(dirs[i]), embedder);
        } catch (const Error& e) {
            reports[i] = {{"case", dirs[i].filename().string()},
                          {"error", e.what()},
                          {"layout_alignment", {{"status", "ERROR"}}},
                          {"visual_similarity", {{"status", "ERROR"}}}};
        }
    }
    return {{"format", "relayout-eval-1"},
            {"embedder", embedder && embedder->available() ? json(embedder->name()) : json(nullptr)},
            {"cases", reports},
            {"summary", summarize(reports)}};
}

}  // namespace relayout::evaluation
