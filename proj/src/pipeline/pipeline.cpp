// Copyright (C) 2026 The relayout Authors
// SPDX-License-Identifier: Apache-2.0

#include "relayout/pipeline.hpp"

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <fstream>
#include <memory>
#include <sstream>

#include <spdlog/spdlog.h>

#include "relayout/hash.hpp"
#include "relayout/projection.hpp"

namespace relayout::pipeline {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string join_codes(const std::vector<layout::Finding>& findings) {
    std::string s;
    for (const auto& f : findings) {
        if (f.severity != layout::Severity::error)
            continue;
        if (!s.empty())
            s += ", ";
        s += f.code;
        if (!f.object_id.empty())
            s += "(" + f.object_id + ")";
    }
    return s;
}

std::string mode_name(editing::Mode m) { return m == editing::Mode::asynchronous ? "asynchronous" : "synchronous"; }
std::string base_name(editing::BaseMode m) { return m == editing::BaseMode::unguided ? "unguided" : "joint"; }
std::string alpha_name(backend::AlphaMode m) { return m == backend::AlphaMode::cumulative ? "cumulative" : "per_step"; }

editing::Mode parse_mode(const std::string& s) {
    if (s == "asynchronous")
        return editing::Mode::asynchronous;
    if (s == "synchronous")
        return editing::Mode::synchronous;
    throw ValidationError("unknown editing mode: " + s);
}

editing::BaseMode parse_base(const std::string& s) {
    if (s == "unguided")
        return editing::BaseMode::unguided;
    if (s == "joint")
        return editing::BaseMode::joint;
    throw ValidationError("unknown base mode: " + s);
}

backend::AlphaMode parse_alpha(const std::string& s) {
    if (s == "cumulative")
        return backend::AlphaMode::cumulative;
    if (s == "per_step")
        return backend::AlphaMode::per_step;
    throw ValidationError("unknown alpha mode: " + s);
}

std::string path_string(const fs::path& p) { return p.generic_string(); }

fs::path resolve(const json& j, const char* key, const fs::path& base) {
    if (!j.contains(key) || j.at(key).is_null())
        return {};
    fs::path p = j.at(key).get<std::string>();
    if (p.empty() || p.is_absolute() || base.empty())
        return p;
    return base / p;
}

template <typename T>
void read_opt(const json& j, const char* key, T& out) {
    if (j.contains(key) && !j.at(key).is_null())
        out = j.at(key).get<T>();
}

layout::Finding error_finding(std::string code, std::string message, std::string id = {}) {
    return {layout::Severity::error, std::move(code), std::move(message), std::move(id)};
}

void check_config(const EditJobSpec& spec, std::vector<layout::Finding>& out) {
    auto range = [&](bool ok, const std::string& what) {
        if (!ok)
            out.push_back(error_finding("config_range", what));
    };
    const auto& g = spec.guidance;
    range(g.eta >= 0.0 && std::isfinite(g.eta), "guidance.eta must be finite and >= 0");
    range(g.guidance_fraction >= 0.0 && g.guidance_fraction <= 1.0, "guidance.guidance_fraction must lie in [0, 1]");
    range(g.inner_iterations >= 0, "guidance.inner_iterations must be >= 0");
    range(spec.lfin.stop_fraction > 0.0 && spec.lfin.stop_fraction <= 1.0, "lfin.stop_fraction must lie in (0, 1]");
    range(spec.lfin.blend_lambda >= 0.0 && spec.lfin.blend_lambda <= 1.0, "lfin.blend_lambda must lie in [0, 1]");
    range(spec.num_steps >= 0 && spec.num_steps <= 1000, "num_steps must lie in [0, 1000]");
    range(spec.projection.pca_dims >= 1, "projection.pca_dims must be >= 1");
    range(spec.projection.band_radius >= 0, "projection.band_radius must be >= 0");
    range(spec.projection.tile >= 1, "projection.tile must be >= 1");
    range(spec.projection.stop_step >= 1, "projection.stop_step must be >= 1");
    if (spec.backend != "toy" && spec.backend.rfind("adapter:", 0) != 0)
        out.push_back(error_finding("backend", "unknown backend selector '" + spec.backend + "'"));
}

/// Prompt positions of each object's attention tokens inside the joint prompt.
struct PromptPlan {
    backend::Prompt prompt;
    std::vector<std::vector<int>> positions;
};

PromptPlan plan_prompt(const layout::LayoutSpec& target, const concepts::ConceptBundle* bundle) {
    PromptPlan plan;
    std::vector<std::string> phrases;
    int offset = 3;  // "a photo of"
    for (std::size_t i = 0; i < target.objects.size(); ++i) {
        const auto& obj = target.objects[i];
        if (i)
            ++offset;  // "and"
        std::vector<int> pos;
        std::string phrase;
        if (bundle) {
            const auto* c = bundle->find(obj.id);
            if (!c)
                throw LoadError("concept bundle has no entry for object '" + obj.id + "'");
            phrase = c->placeholder + " " + c->class_noun;
            pos.push_back(offset);
        } else {
            phrase = obj.token;
            const auto n = backend::Prompt::parse(phrase).tokens.size();
            if (n == 0)
                throw ValidationError("object '" + obj.id + "' has an empty token phrase");
            for (std::size_t k = 0; k < n; ++k)
                pos.push_back(offset + static_cast<int>(k));
        }
        offset += static_cast<int>(backend::Prompt::parse(phrase).tokens.size());
        phrases.push_back(phrase);
        plan.positions.push_back(std::move(pos));
    }
    plan.prompt = concepts::joint_prompt(phrases);
    return plan;
}

json map_json(const Map2D& m) {
    return {{"height", m.height}, {"width", m.width}, {"data", m.data}};
}

std::string layout_hash(const layout::LayoutSpec& spec) {
    std::string blob = layout::to_json(spec).dump();
    for (const auto& o : spec.objects)
        blob.append(reinterpret_cast<const char*>(o.mask.data.data()), o.mask.data.size());
    return sha256_hex(std::string_view(blob));
}

const std::array<std::array<std::uint8_t, 3>, 10> kPalette = {{{0, 0, 0},
                                                               {255, 255, 255},
                                                               {230, 25, 75},
                                                               {60, 180, 75},
                                                               {0, 130, 200},
                                                               {245, 130, 48},
                                                               {145, 30, 180},
                                                               {70, 240, 240},
                                                               {240, 50, 230},
                                                               {210, 245, 60}}};

/// Everything the appearance projection needs at one spatial resolution.
struct ProjectionLevel {
    int height = 0;
    int width = 0;
    std::vector<std::string> layers;
    std::vector<Mask> source_masks;
    projection::RegionDecomposition decomp;
    std::optional<projection::Pca> pca;
};

}  // namespace

SpecValidationError::SpecValidationError(std::vector<layout::Finding> findings)
    : ValidationError("validation failed: " + join_codes(findings)), findings_(std::move(findings)) {}

std::string to_string(InitMode m) {
    switch (m) {
    case InitMode::random:
        return "random";
    case InitMode::lfin:
        return "lfin";
    case InitMode::inversion:
        return "inversion";
    }
    return "random";
}

InitMode parse_init_mode(const std::string& s) {
    if (s == "random")
        return InitMode::random;
    if (s == "lfin")
        return InitMode::lfin;
    if (s == "inversion")
        return InitMode::inversion;
    throw ValidationError("unknown init mode: " + s);
}

int default_steps(const std::string& backend) { return backend == "toy" ? 20 : 50; }

json to_json(const EditJobSpec& s) {
    const auto& p = s.projection;
    return {
        {"source_image", path_string(s.source_image)},
        {"source_layout", path_string(s.source_layout)},
        {"target_layout", path_string(s.target_layout)},
        {"concepts", s.concepts.empty() ? json(nullptr) : json(path_string(s.concepts))},
        {"backend", s.backend},
        {"num_steps", s.num_steps},
        {"seed", s.seed},
        {"mode", mode_name(s.mode)},
        {"base", base_name(s.base)},
        {"init", to_string(s.init)},
        {"guidance",
         {{"eta", s.guidance.eta},
          {"guidance_fraction", s.guidance.guidance_fraction},
          {"inner_iterations", s.guidance.inner_iterations},
          {"alpha_mode", alpha_name(s.guidance.alpha_mode)}}},
        {"lfin",
         {{"stop_fraction", s.lfin.stop_fraction},
          {"blend_lambda", s.lfin.blend_lambda},
          {"mask_aware", s.lfin.mask_aware}}},
        {"projection",
         {{"enabled", p.enabled},
          {"pca_dims", p.pca_dims},
          {"pca_fit", p.pca_per_step ? "per_step" : "once"},
          {"band_radius", p.band_radius},
          {"start_step", p.start_step},
          {"stop_step", p.stop_step},
          {"tile", p.tile},
          {"feature_layers", p.feature_layers},
          {"apa_layers", p.apa_layers}}},
        {"output", path_string(s.output)},
        {"debug_dir", s.debug_dir.empty() ? json(nullptr) : json(path_string(s.debug_dir))},
        {"telemetry", s.telemetry.empty() ? json(nullptr) : json(path_string(s.telemetry))},
    };
}

EditJobSpec spec_from_json(const json& j, const fs::path& base_dir) {
    if (!j.is_object())
        throw ValidationError("job spec must be a JSON object");
    EditJobSpec s;
    try {
        s.source_image = resolve(j, "source_image", base_dir);
        s.source_layout = resolve(j, "source_layout", base_dir);
        s.target_layout = resolve(j, "target_layout", base_dir);
        s.concepts = resolve(j, "concepts", base_dir);
        s.output = resolve(j, "output", base_dir);
        s.debug_dir = resolve(j, "debug_dir", base_dir);
        s.telemetry = resolve(j, "telemetry", base_dir);
        read_opt(j, "backend", s.backend);
        read_opt(j, "num_steps", s.num_steps);
        read_opt(j, "seed", s.seed);
        if (j.contains("mode"))
            s.mode = parse_mode(j.at("mode").get<std::string>());
        if (j.contains("base"))
            s.base = parse_base(j.at("base").get<std::string>());
        if (j.contains("init"))
            s.init = parse_init_mode(j.at("init").get<std::string>());
        if (j.contains("guidance")) {
            const auto& g = j.at("guidance");
            read_opt(g, "eta", s.guidance.eta);
            read_opt(g, "guidance_fraction", s.guidance.guidance_fraction);
            read_opt(g, "inner_iterations", s.guidance.inner_iterations);
            if (g.contains("alpha_mode"))
                s.guidance.alpha_mode = parse_alpha(g.at("alpha_mode").get<std::string>());
        }
        if (j.contains("lfin")) {
            const auto& l = j.at("lfin");
            read_opt(l, "stop_fraction", s.lfin.stop_fraction);
            read_opt(l, "blend_lambda", s.lfin.blend_lambda);
            read_opt(l, "mask_aware", s.lfin.mask_aware);
        }
        if (j.contains("projection")) {
            const auto& p = j.at("projection");
            read_opt(p, "enabled", s.projection.enabled);
            read_opt(p, "pca_dims", s.projection.pca_dims);
            if (p.contains("pca_fit")) {
                const auto fit = p.at("pca_fit").get<std::string>();
                if (fit != "per_step" && fit != "once")
                    throw ValidationError("projection.pca_fit must be per_step or once");
                s.projection.pca_per_step = fit == "per_step";
            }
            read_opt(p, "band_radius", s.projection.band_radius);
            read_opt(p, "start_step", s.projection.start_step);
            read_opt(p, "stop_step", s.projection.stop_step);
            read_opt(p, "tile", s.projection.tile);
            read_opt(p, "feature_layers", s.projection.feature_layers);
            read_opt(p, "apa_layers", s.projection.apa_layers);
        }
    } catch (const json::exception& e) {
        throw ValidationError(std::string("job spec: ") + e.what());
    }
    s.lfin.seed = s.seed;
    return s;
}

EditJobSpec load_spec(const fs::path& path) {
    json j;
    try {
        j = json::parse(read_text(path));
    } catch (const json::exception& e) {
        throw ValidationError("job spec " + path.string() + ": " + e.what());
    }
    return spec_from_json(j, path.parent_path());
}

std::vector<layout::Finding> validate_inputs(const layout::LayoutSpec& source, const layout::LayoutSpec& target,
                                             const EditJobSpec& spec) {
    std::vector<layout::Finding> out;
    check_config(spec, out);
    bool resolved = false;
    layout::LayoutSpec tar = target;
    try {
        tar = layout::resolve_target(source, target);
        resolved = true;
    } catch (const ValidationError& e) {
        // Leave bbox-only objects unresolved; validate_pair reports the rest.
        spdlog::debug("target resolution failed: {}", e.what());
    }
    auto pair = layout::validate_pair(source, resolved ? tar : target);
    out.insert(out.end(), pair.begin(), pair.end());
    if (source.width % 8 || source.height % 8)
        out.push_back(error_finding("image_size", "image sides must be multiples of 8"));
    return out;
}

std::vector<layout::Finding> validate_spec(const EditJobSpec& spec) {
    std::vector<layout::Finding> out;
    auto need = [&](const fs::path& p, const std::string& what) {
        if (p.empty())
            out.push_back(error_finding("missing_file", what + " path is empty"));
        else if (!fs::exists(p))
            out.push_back(error_finding("missing_file", what + " not found: " + p.string()));
    };
    need(spec.source_image, "source image");
    need(spec.source_layout, "source layout");
    need(spec.target_layout, "target layout");
    if (!spec.concepts.empty() && !fs::exists(spec.concepts / "manifest.json"))
        out.push_back(error_finding("missing_file", "concept bundle not found: " + spec.concepts.string()));
    if (layout::has_errors(out)) {
        check_config(spec, out);
        return out;
    }
    layout::LayoutSpec src, tar;
    try {
        src = layout::load(spec.source_layout);
        tar = layout::load(spec.target_layout);
    } catch (const Error& e) {
        out.push_back(error_finding("layout_invalid", e.what()));
        check_config(spec, out);
        return out;
    }
    try {
        const Image img = png::read(spec.source_image);
        if (img.width != src.width || img.height != src.height)
            out.push_back(error_finding("image_size", "source image size differs from the source layout"));
    } catch (const Error& e) {
        out.push_back(error_finding("image_invalid", e.what()));
    }
    auto rest = validate_inputs(src, tar, spec);
    out.insert(out.end(), rest.begin(), rest.end());
    return out;
}

EditInputs load_inputs(const EditJobSpec& spec) {
    EditInputs in;
    try {
        in.source = layout::load(spec.source_layout);
        in.target = layout::load(spec.target_layout);
    } catch (const LoadError& e) {
        throw ValidationError(e.what());
    }
    in.image = png::read(spec.source_image);
    in.input_hashes["source_image"] = sha256_file(spec.source_image);
    if (!spec.concepts.empty()) {
        in.bundle = concepts::load_bundle(spec.concepts);
        in.input_hashes["concepts"] = concepts::bundle_hash(spec.concepts);
    }
    return in;
}

EditResult edit_layout(const EditInputs& inputs, const EditJobSpec& spec, const ProgressSink& sink) {
    auto findings = validate_inputs(inputs.source, inputs.target, spec);
    if (inputs.image.width != inputs.source.width || inputs.image.height != inputs.source.height)
        findings.push_back(error_finding("image_size", "source image size differs from the source layout"));
    if (layout::has_errors(findings))
        throw SpecValidationError(findings);
    for (const auto& f : findings)
        spdlog::warn("{}: {}", f.code, f.message);
    spec.guidance.validate();

    const layout::LayoutSpec& source = inputs.source;
    const layout::LayoutSpec target = layout::resolve_target(source, inputs.target);
    const std::size_t n_obj = target.objects.size();

    auto denoiser = backend::make_backend(spec.backend, inputs.image.width, inputs.image.height);
    if (inputs.bundle)
        concepts::apply_bundle(*inputs.bundle, *denoiser);
    const backend::Denoiser& den = *denoiser;

    const int T = spec.num_steps > 0 ? spec.num_steps : default_steps(spec.backend);
    const auto schedule = backend::NoiseSchedule::scaled_linear(T);
    const auto plan = plan_prompt(target, inputs.bundle ? &*inputs.bundle : nullptr);
    const auto shape = den.latent_shape();

    EditResult res;
    res.prompt = plan.prompt;

    // Source branch: encode and keep the full inversion trace.
    const Latent x0 = den.encode(inputs.image);
    res.source_trace = backend::ddim_invert_trace(den, x0, plan.prompt, schedule, 1.0);
    const auto& trace = res.source_trace;
    std::vector<std::string> trace_hashes;
    for (const auto& x : trace)
        trace_hashes.push_back(sha256_latent(x));

    // Target masks at latent and attention resolution.
    const auto [ah, aw] = guidance::attention_resolution(den);
    std::vector<Mask> latent_masks = target.masks_at(shape.height, shape.width);
    const std::vector<Mask> attn_masks = target.masks_at(ah, aw);
    editing::EditContext ctx;
    ctx.denoiser = &den;
    ctx.schedule = &schedule;
    ctx.prompt = plan.prompt;
    ctx.guidance = spec.guidance;
    ctx.mode = spec.mode;
    ctx.base = spec.base;
    ctx.latent_masks = latent_masks;
    for (std::size_t i = 0; i < n_obj; ++i) {
        if (count_nonzero(latent_masks[i]) == 0)
            spdlog::warn("object '{}' vanishes at latent resolution", target.objects[i].id);
        if (count_nonzero(attn_masks[i]) == 0)
            spdlog::warn("object '{}' vanishes at attention resolution {}x{}", target.objects[i].id, ah, aw);
        ctx.objects.push_back({plan.positions[i], attn_masks[i]});
    }

    // Initial target latent.
    Latent x;
    int start = T;
    switch (spec.init) {
    case InitMode::random:
        x = init::random_latent(shape, spec.seed);
        break;
    case InitMode::inversion:
        x = trace.back();
        break;
    case InitMode::lfin: {
        init::LfinConfig cfg = spec.lfin;
        cfg.seed = spec.seed;
        const Image comp = init::composite_image(inputs.image, source, target);
        const Latent xc = den.encode(comp);
        Mask union_mask;
        if (cfg.mask_aware)
            union_mask = mask_union(latent_masks, shape.height, shape.width);
        x = init::lfin_noise(den, xc, plan.prompt, schedule, cfg, cfg.mask_aware ? &union_mask : nullptr);
        start = init::lfin_start_step(cfg, T);
        if (!spec.debug_dir.empty())
            png::write(spec.debug_dir / "lfin_composite.png", comp);
        break;
    }
    }
    ctx.horizon = start;
    res.start_step = start;
    res.initial_latent = x;
    if (n_obj)
        res.initial_losses = guidance::evaluate(den, x, start, plan.prompt, ctx.objects).losses;

    // Appearance projection set-up, one level per self-attention resolution.
    const auto& pc = spec.projection;
    const auto feature_layers = pc.feature_layers.empty() ? den.default_feature_taps() : pc.feature_layers;
    const auto apa_layers = pc.apa_layers.empty() ? den.self_attention_layers() : pc.apa_layers;
    std::vector<ProjectionLevel> levels;
    if (pc.enabled) {
        for (const auto& l : apa_layers) {
            const auto [h, w] = den.layer_resolution(l);
            auto it = std::find_if(levels.begin(), levels.end(),
                                   [&](const ProjectionLevel& lv) { return lv.height == h && lv.width == w; });
            if (it == levels.end()) {
                ProjectionLevel lv;
                lv.height = h;
                lv.width = w;
                for (const auto& o : target.objects)
                    lv.source_masks.push_back(resample_mask(source.find(o.id)->mask, h, w));
                lv.decomp = projection::decompose_regions(source, target, h, w, pc.band_radius);
                levels.push_back(std::move(lv));
                it = std::prev(levels.end());
            }
            it->layers.push_back(l);
        }
        if (!spec.debug_dir.empty())
            for (const auto& lv : levels) {
                const std::string tag = std::to_string(lv.height) + "x" + std::to_string(lv.width);
                png::write_indexed(spec.debug_dir / ("regions_" + tag + ".png"), projection::label_image(lv.decomp),
                                   kPalette);
                png::write(spec.debug_dir / ("band_" + tag + ".png"), mask_to_image(lv.decomp.band));
            }
    }
    const auto apa_active = [&](int t) {
        return pc.enabled && t >= pc.stop_step && (pc.start_step < 0 || t <= pc.start_step);
    };

    json steps = json::array();
    std::vector<std::string> ids = target.ids();
    int index = 0;
    for (int t = start; t >= 1; --t) {
        if (sink.cancelled && sink.cancelled())
            throw CancelledError();
        const auto t0 = std::chrono::steady_clock::now();
        ctx.interventions.clear();
        std::size_t fallbacks = 0;
        if (apa_active(t) && !levels.empty()) {
            backend::TapConfig st;
            st.cross_attention = false;
            st.feature_layers = feature_layers;
            st.value_layers = apa_layers;
            const auto src_out = den.predict_noise(trace[static_cast<std::size_t>(t)], t, plan.prompt, st);
            backend::TapConfig tt;
            tt.cross_attention = false;
            tt.feature_layers = feature_layers;
            const auto tar_out = den.predict_noise(x, t, plan.prompt, tt);
            for (auto& lv : levels) {
                const Matrix fs_src = projection::concat_features(src_out.features, lv.height, lv.width);
                int k = pc.pca_dims;
                if (k > static_cast<int>(fs_src.cols)) {
                    if (index == 0)
                        spdlog::warn("pca_dims {} exceeds the descriptor size {}; using {}", k, fs_src.cols,
                                     fs_src.cols);
                    k = static_cast<int>(fs_src.cols);
                }
                projection::Descriptors d;
                if (pc.pca_per_step) {
                    d = projection::extract_descriptors(src_out.features, tar_out.features, lv.height, lv.width, k);
                } else {
                    if (!lv.pca) {
                        const Matrix fs_tar = projection::concat_features(tar_out.features, lv.height, lv.width);
                        Matrix both(fs_src.rows + fs_tar.rows, fs_src.cols);
                        std::copy(fs_src.data.begin(), fs_src.data.end(), both.data.begin());
                        std::copy(fs_tar.data.begin(), fs_tar.data.end(),
                                  both.data.begin() + static_cast<std::ptrdiff_t>(fs_src.data.size()));
                        lv.pca = projection::Pca::fit(both, k);
                    }
                    d = projection::extract_descriptors(src_out.features, tar_out.features, lv.height, lv.width,
                                                        *lv.pca);
                }
                auto corr = projection::corrected_field_from_descriptors(d.source, d.target, lv.decomp,
                                                                         lv.source_masks, pc.tile);
                fallbacks += corr.fallback_cells.size();
                if (!spec.debug_dir.empty()) {
                    const std::string tag =
                        std::to_string(lv.height) + "x" + std::to_string(lv.width) + "_t" + std::to_string(t);
                    const auto raw =
                        projection::projection_field(projection::similarity_matrix(d.source, d.target, pc.tile));
                    png::write_gray16(spec.debug_dir / ("field_" + tag + ".png"),
                                      projection::field_image(raw, lv.height, lv.width));
                    png::write_gray16(spec.debug_dir / ("field_corrected_" + tag + ".png"),
                                      projection::field_image(corr.field, lv.height, lv.width));
                }
                for (const auto& layer : lv.layers) {
                    auto warped =
                        std::make_shared<const Matrix>(projection::warp(src_out.values.at(layer), corr.field));
                    ctx.interventions.push_back(
                        {layer, [warped](const Matrix&, const Matrix&, const Matrix&, int) -> std::optional<Matrix> {
                             return *warped;
                         }});
                }
            }
        }

        const auto step = editing::editing_step(ctx, x, t);
        x = step.next;
        res.trajectory.push_back(x);
        ++index;
        const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
        steps.push_back({{"index", index},
                         {"t", t},
                         {"guided", step.guided},
                         {"apa", apa_active(t) && !levels.empty()},
                         {"losses", step.object_losses},
                         {"total", step.total_loss},
                         {"occupancy", step.occupancy},
                         {"fallback_cells", fallbacks},
                         {"duration_ms", ms},
                         {"latent_sha256", sha256_latent(x)}});
        if (sink.on_step) {
            ProgressEvent ev;
            ev.index = index;
            ev.t = t;
            ev.total = start;
            ev.guided = step.guided;
            ev.object_ids = ids;
            ev.losses = step.object_losses;
            ev.total_loss = step.total_loss;
            if (sink.preview_every > 0 && (index % sink.preview_every == 0 || t == 1))
                ev.preview = den.decode(x);
            sink.on_step(ev);
        }
    }

    for (std::size_t i = 0; i < trace.size(); ++i)
        if (sha256_latent(trace[i]) != trace_hashes[i])
            throw ContractViolation("source trace changed during editing");

    res.final_latent = x;
    json attention = json::object();
    if (n_obj) {
        const auto ev = guidance::evaluate(den, x, 0, plan.prompt, ctx.objects);
        res.final_losses = ev.losses;
        backend::TapConfig taps;
        const auto out = den.predict_noise(x, 0, plan.prompt, taps);
        for (std::size_t i = 0; i < n_obj; ++i)
            attention[ids[i]] = map_json(guidance::object_attention(out, ctx.objects[i], ah, aw));
    }
    res.image = den.decode(x);
    const auto png_bytes = png::encode(res.image);

    json hashes = inputs.input_hashes;
    hashes["source_layout"] = layout_hash(source);
    hashes["target_layout"] = layout_hash(target);
    hashes["source_image_pixels"] = sha256_hex(std::span<const std::uint8_t>(inputs.image.pixels));
    json losses_final = json::object(), losses_initial = json::object();
    for (std::size_t i = 0; i < n_obj; ++i) {
        losses_initial[ids[i]] = res.initial_losses[i];
        losses_final[ids[i]] = res.final_losses[i];
    }
    res.manifest = {
        {"format", "relayout-run-1"},
        {"config", to_json(spec)},
        {"backend_id", den.identity()},
        {"prompt", plan.prompt.text()},
        {"objects", ids},
        {"seeds", {{"seed", spec.seed}, {"substreams", {"init", "lfin"}}}},
        {"inputs", hashes},
        {"schedule", {{"num_steps", T}, {"start_step", start}, {"kind", "scaled_linear"}}},
        {"source_trace_sha256", trace_hashes},
        {"initial", {{"losses", losses_initial}, {"latent_sha256", sha256_latent(res.initial_latent)}}},
        {"steps", steps},
        {"final",
         {{"losses", losses_final},
          {"attention", attention},
          {"attention_resolution", {ah, aw}},
          {"latent_sha256", sha256_latent(x)}}},
        {"output", {{"sha256", sha256_hex(std::span<const std::uint8_t>(png_bytes))}}},
    };
    return res;
}

namespace {

void write_telemetry(const fs::path& path, const EditResult& r) {
    std::ostringstream os;
    os << "index,t,guided,apa,object_id,loss,total_loss,occupancy,fallback_cells,duration_ms\n";
    const auto& ids = r.manifest.at("objects");
    for (const auto& s : r.manifest.at("steps")) {
        const auto& losses = s.at("losses");
        const auto& occ = s.at("occupancy");
        auto row = [&](const std::string& id, const std::string& loss, std::size_t occupancy) {
            os << s.at("index").get<int>() << ',' << s.at("t").get<int>() << ',' << (s.at("guided").get<bool>() ? 1 : 0)
               << ',' << (s.at("apa").get<bool>() ? 1 : 0) << ',' << id << ',' << loss << ','
               << s.at("total").get<double>() << ',' << occupancy << ',' << s.at("fallback_cells").get<std::size_t>()
               << ',' << s.at("duration_ms").get<double>() << '\n';
        };
        for (std::size_t i = 0; i < ids.size(); ++i)
            row(ids[i].get<std::string>(), std::to_string(losses[i].get<double>()), occ[i].get<std::size_t>());
        row("(base)", "", occ.back().get<std::size_t>());
    }
    write_text(path, os.str());
}

EditJobSpec absolute_paths(EditJobSpec s) {
    for (fs::path* p : {&s.source_image, &s.source_layout, &s.target_layout, &s.concepts, &s.output, &s.debug_dir,
                        &s.telemetry})
        if (!p->empty())
            *p = fs::absolute(*p);
    return s;
}

}  // namespace

EditResult edit_layout(const EditJobSpec& job, const ProgressSink& sink) {
    const EditJobSpec spec = absolute_paths(job);
    auto problems = validate_spec(spec);
    if (layout::has_errors(problems))
        throw SpecValidationError(problems);
    if (!spec.debug_dir.empty())
        fs::create_directories(spec.debug_dir);
    const EditInputs inputs = load_inputs(spec);
    EditResult r = edit_layout(inputs, spec, sink);
    if (!spec.output.empty()) {
        png::write(spec.output, r.image);
        r.manifest["output"]["path"] = path_string(spec.output);
        fs::path mpath = spec.output;
        mpath.replace_extension(".manifest.json");
        write_text(mpath, r.manifest.dump(2));
    }
    if (!spec.telemetry.empty())
        write_telemetry(spec.telemetry, r);
    return r;
}

bool reproduce(const json& manifest, const fs::path& output) {
    if (!manifest.contains("config") || !manifest.contains("output"))
        throw ValidationError("run manifest lacks config or output");
    EditJobSpec spec = spec_from_json(manifest.at("config"));
    spec.output = output;
    spec.debug_dir.clear();
    spec.telemetry.clear();
    const EditInputs inputs = load_inputs(spec);
    const auto& recorded = manifest.at("inputs");
    for (const char* key : {"source_image", "concepts"})
        if (recorded.contains(key) && inputs.input_hashes.value(key, "") != recorded.at(key).get<std::string>())
            spdlog::warn("input '{}' changed since the recorded run", key);
    EditResult r = edit_layout(inputs, spec, {});
    if (!output.empty())
        png::write(output, r.image);
    const bool same = r.manifest.at("output").at("sha256") == manifest.at("output").at("sha256");
    if (!same)
        spdlog::warn("reproduced output hash differs from the manifest");
    return same;
}

concepts::ConceptBundle learn_concepts(const Image& image, const layout::LayoutSpec& lay, const LearnConfig& config) {
    auto findings = layout::validate(lay, "source");
    if (image.width != lay.width || image.height != lay.height)
        findings.push_back(error_finding("image_size", "image size differs from the layout"));
    if (layout::has_errors(findings))
        throw SpecValidationError(findings);
    auto denoiser = backend::make_backend(config.backend, image.width, image.height);
    const auto shape = denoiser->latent_shape();
    const int T = config.num_steps > 0 ? config.num_steps : default_steps(config.backend);
    const auto schedule = backend::NoiseSchedule::scaled_linear(T);

    concepts::TrainingSet data;
    data.x0 = denoiser->encode(image);
    std::vector<concepts::ConceptObject> objects;
    const std::string tmpl = concepts::ConceptBundle{}.prompt_template;
    for (const auto& o : lay.objects) {
        concepts::ConceptObject c;
        c.id = o.id;
        c.placeholder = concepts::placeholder_for(o.id);
        const auto words = backend::Prompt::parse(o.token).tokens;
        if (words.empty())
            throw ValidationError("object '" + o.id + "' has an empty token phrase");
        c.class_noun = words.back();
        Mask m = resample_mask(o.mask, shape.height, shape.width);
        if (count_nonzero(m) == 0)
            throw SpecValidationError(
                {error_finding("empty_mask", "mask vanishes at latent resolution", o.id)});
        data.masks.push_back(std::move(m));
        data.prompts.push_back(concepts::object_prompt(tmpl, c.placeholder, c.class_noun));
        objects.push_back(std::move(c));
    }
    auto s1 = config.stage1;
    s1.seed = config.seed;
    auto s2 = config.stage2;
    s2.seed = config.seed;
    auto bundle = concepts::learn_stage1(*denoiser, objects, data, schedule, s1);
    concepts::learn_stage2(bundle, *denoiser, data, schedule, s2);
    return bundle;
}

}  // namespace relayout::pipeline
