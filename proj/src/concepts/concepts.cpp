// Copyright (C) 2026 The relayout Authors
// SPDX-License-Identifier: Apache-2.0

#include "relayout/concepts.hpp"

#include <spdlog/spdlog.h>

#include <charconv>
#include <cmath>
#include <cstring>
#include <map>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "relayout/errors.hpp"
#include "relayout/hash.hpp"
#include "relayout/image.hpp"
#include "relayout/rng.hpp"

namespace relayout::concepts {

namespace fs = std::filesystem;
using backend::Denoiser;
using backend::NoiseSchedule;
using backend::Prompt;

namespace {

constexpr char kEmbeddingsMagic[8] = {'R', 'L', 'E', 'M', 'B', '0', '0', '1'};
constexpr const char* kFormat = "relayout-concepts-1";

void check_mask(const Latent& a, const Mask& mask) {
    if (!mask.same_shape(a.height, a.width))
        throw ContractViolation("masked loss: mask resolution differs from the latent");
}

/// Adam with per-tensor step counters.
class Adam {
public:
    explicit Adam(double lr) : lr_(lr) {}

    void step(const std::string& name, std::span<double> param, std::span<const double> grad) {
        auto& s = state_[name];
        if (s.m.empty()) {
            s.m.assign(param.size(), 0.0);
            s.v.assign(param.size(), 0.0);
        }
        ++s.t;
        const double c1 = 1.0 - std::pow(kBeta1, s.t), c2 = 1.0 - std::pow(kBeta2, s.t);
        for (std::size_t i = 0; i < param.size(); ++i) {
            s.m[i] = kBeta1 * s.m[i] + (1.0 - kBeta1) * grad[i];
            s.v[i] = kBeta2 * s.v[i] + (1.0 - kBeta2) * grad[i] * grad[i];
            param[i] -= lr_ * (s.m[i] / c1) / (std::sqrt(s.v[i] / c2) + kEps);
        }
    }

private:
    static constexpr double kBeta1 = 0.9, kBeta2 = 0.999, kEps = 1e-8;
    struct State {
        std::vector<double> m, v;
        int t = 0;
    };
    double lr_;
    std::map<std::string, State> state_;
};

struct Draw {
    std::size_t object = 0;
    int t = 1;
    Latent noise;
};

Draw draw(NormalSampler& rng, const TrainingSet& data, const NoiseSchedule& schedule) {
    Draw d;
    d.object = static_cast<std::size_t>(rng.below(data.masks.size()));
    d.t = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(schedule.num_steps)));
    d.noise = Latent(data.x0.channels, data.x0.height, data.x0.width);
    for (auto& v : d.noise.data)
        v = rng();
    return d;
}

Latent noised(const Latent& x0, const Latent& noise, int t, const NoiseSchedule& schedule) {
    const double a = schedule.alpha_bar[t];
    Latent xt = x0;
    for (std::size_t i = 0; i < xt.size(); ++i)
        xt.data[i] = std::sqrt(a) * x0.data[i] + std::sqrt(1.0 - a) * noise.data[i];
    return xt;
}

void check_training_set(const TrainingSet& data) {
    if (data.masks.empty() || data.masks.size() != data.prompts.size())
        throw ValidationError("concept learning needs one mask and one prompt per object");
    for (const auto& m : data.masks) {
        check_mask(data.x0, m);
        if (count_nonzero(m) == 0)
            throw ValidationError("concept learning: an object mask is empty at latent resolution");
    }
}

/// One optimisation loop; `update` receives the gradients of each step.
template <typename Update>
std::vector<double> train_loop(const Denoiser& denoiser, const TrainingSet& data, const NoiseSchedule& schedule,
                               int steps, NormalSampler& rng, Update&& update) {
    std::vector<double> losses;
    backend::TapConfig taps;
    taps.cross_attention = false;
    for (int s = 0; s < steps; ++s) {
        const Draw d = draw(rng, data, schedule);
        const Latent xt = noised(data.x0, d.noise, d.t, schedule);
        const Prompt& prompt = data.prompts[d.object];
        const auto out = denoiser.predict_noise(xt, d.t, prompt, taps);
        const Mask& mask = data.masks[d.object];
        losses.push_back(masked_diffusion_loss(d.noise, out.noise, mask));
        const auto grads = denoiser.backward(xt, d.t, prompt, masked_diffusion_loss_grad(d.noise, out.noise, mask));
        update(d.object, grads);
    }
    return losses;
}

std::string write_losses_csv(const std::vector<double>& losses) {
    std::string out = "step,loss\n";
    char buf[64];
    for (std::size_t i = 0; i < losses.size(); ++i) {
        auto r = std::to_chars(buf, buf + sizeof(buf), losses[i]);
        out += std::to_string(i) + "," + std::string(buf, r.ptr) + "\n";
    }
    return out;
}

std::vector<double> read_losses_csv(const std::string& text) {
    std::vector<double> out;
    std::istringstream in(text);
    std::string line;
    std::getline(in, line);
    while (std::getline(in, line)) {
        if (line.empty())
            continue;
        const auto comma = line.find(',');
        if (comma == std::string::npos)
            throw LoadError("loss curve: malformed line");
        double v = 0.0;
        const char* b = line.data() + comma + 1;
        const char* e = line.data() + line.size();
        if (std::from_chars(b, e, v).ec != std::errc())
            throw LoadError("loss curve: malformed value");
        out.push_back(v);
    }
    return out;
}

std::vector<std::uint8_t> to_bytes(const std::string& s) { return {s.begin(), s.end()}; }

}  // namespace

double masked_diffusion_loss(const Latent& noise, const Latent& predicted, const Mask& mask) {
    if (!noise.same_shape(predicted))
        throw ContractViolation("masked loss: noise and prediction shapes differ");
    check_mask(noise, mask);
    const std::size_t n = count_nonzero(mask);
    if (n == 0) {
        spdlog::warn("masked diffusion loss: mask is empty, returning 0");
        return 0.0;
    }
    double sum = 0.0;
    for (int c = 0; c < noise.channels; ++c)
        for (std::size_t u = 0; u < noise.plane(); ++u)
            if (mask[u]) {
                const double d = noise.at(c, u) - predicted.at(c, u);
                sum += d * d;
            }
    return sum / std::max(1.0, static_cast<double>(noise.channels) * static_cast<double>(n));
}

Latent masked_diffusion_loss_grad(const Latent& noise, const Latent& predicted, const Mask& mask) {
    if (!noise.same_shape(predicted))
        throw ContractViolation("masked loss: noise and prediction shapes differ");
    check_mask(noise, mask);
    Latent g(noise.channels, noise.height, noise.width, 0.0);
    const double denom = std::max(1.0, static_cast<double>(noise.channels) * static_cast<double>(count_nonzero(mask)));
    for (int c = 0; c < noise.channels; ++c)
        for (std::size_t u = 0; u < noise.plane(); ++u)
            if (mask[u])
                g.at(c, u) = 2.0 * (predicted.at(c, u) - noise.at(c, u)) / denom;
    return g;
}

const ConceptObject* ConceptBundle::find(const std::string& id) const {
    for (const auto& o : objects)
        if (o.id == id)
            return &o;
    return nullptr;
}

std::string placeholder_for(const std::string& object_id) { return "<" + object_id + ">"; }

Prompt object_prompt(const std::string& prompt_template, const std::string& placeholder, const std::string& noun) {
    std::string text = prompt_template;
    auto sub = [&](const std::string& key, const std::string& value) {
        for (auto pos = text.find(key); pos != std::string::npos; pos = text.find(key, pos + value.size()))
            text.replace(pos, key.size(), value);
    };
    sub("{token}", placeholder);
    sub("{noun}", noun);
    return Prompt::parse(text);
}

Prompt joint_prompt(const std::vector<std::string>& phrases) {
    std::string text = "a photo of";
    for (std::size_t i = 0; i < phrases.size(); ++i)
        text += (i ? " and " : " ") + phrases[i];
    return Prompt::parse(text);
}

bool glob_match(const std::string& pattern, const std::string& text) {
    // Iterative wildcard match with single-star backtracking.
    std::size_t p = 0, t = 0, star = std::string::npos, mark = 0;
    while (t < text.size()) {
        if (p < pattern.size() && (pattern[p] == '?' || pattern[p] == text[t])) {
            ++p;
            ++t;
        } else if (p < pattern.size() && pattern[p] == '*') {
            star = p++;
            mark = t;
        } else if (star != std::string::npos) {
            p = star + 1;
            t = ++mark;
        } else {
            return false;
        }
    }
    while (p < pattern.size() && pattern[p] == '*')
        ++p;
    return p == pattern.size();
}

std::vector<std::string> select_parameters(const Denoiser& denoiser, const std::vector<std::string>& patterns) {
    std::vector<std::string> out;
    for (const auto& name : denoiser.parameter_names())
        for (const auto& p : patterns)
            if (glob_match(p, name)) {
                out.push_back(name);
                break;
            }
    return out;
}

ConceptBundle learn_stage1(Denoiser& denoiser, const std::vector<ConceptObject>& objects, const TrainingSet& data,
                           const NoiseSchedule& schedule, const TrainConfig& cfg) {
    if (cfg.steps < 0 || !(cfg.lr >= 0.0))
        throw ValidationError("stage 1: steps must be >= 0 and lr >= 0");
    if (objects.size() != data.prompts.size())
        throw ValidationError("stage 1: one prompt per object is required");
    check_training_set(data);

    ConceptBundle bundle;
    bundle.backend_id = denoiser.identity();
    bundle.seed = cfg.seed;
    std::set<std::string> seen;
    for (std::size_t i = 0; i < objects.size(); ++i) {
        ConceptObject o = objects[i];
        if (o.placeholder.empty())
            o.placeholder = placeholder_for(o.id);
        if (!seen.insert(o.placeholder).second)
            throw ValidationError("stage 1: placeholder tokens must be unique: " + o.placeholder);
        if (denoiser.in_base_vocabulary(o.placeholder))
            throw ValidationError("stage 1: placeholder collides with the base vocabulary: " + o.placeholder);
        if (data.prompts[i].positions_of(o.placeholder).empty())
            throw ValidationError("stage 1: prompt for '" + o.id + "' does not contain " + o.placeholder);
        if (o.embedding.empty())
            o.embedding = denoiser.embedding(o.class_noun);
        if (o.embedding.size() != static_cast<std::size_t>(denoiser.embedding_dim()))
            throw ValidationError("stage 1: embedding dimension mismatch for " + o.id);
        denoiser.set_embedding(o.placeholder, o.embedding);
        bundle.objects.push_back(std::move(o));
    }

    NormalSampler rng(substream(cfg.seed, "training/stage1"));
    Adam adam(cfg.lr);
    bundle.stage1.steps = cfg.steps;
    bundle.stage1.lr = cfg.lr;
    bundle.stage1.losses = train_loop(denoiser, data, schedule, cfg.steps, rng,
                                      [&](std::size_t i, const backend::Gradients& g) {
                                          auto& obj = bundle.objects[i];
                                          const auto it = g.embeddings.find(obj.placeholder);
                                          if (it == g.embeddings.end())
                                              return;
                                          adam.step(obj.placeholder, obj.embedding, it->second);
                                          denoiser.set_embedding(obj.placeholder, obj.embedding);
                                      });
    return bundle;
}

void learn_stage2(ConceptBundle& bundle, Denoiser& denoiser, const TrainingSet& data, const NoiseSchedule& schedule,
                  const TrainConfig& cfg) {
    if (cfg.steps < 0 || !(cfg.lr >= 0.0))
        throw ValidationError("stage 2: steps must be >= 0 and lr >= 0");
    if (bundle.objects.empty())
        throw ValidationError("stage 2 needs a stage-1 bundle");
    if (bundle.backend_id != denoiser.identity())
        throw BackendError("stage 2: bundle was learned on a different backend");
    check_training_set(data);
    const auto selected = select_parameters(denoiser, cfg.selector);
    if (selected.empty())
        throw ValidationError("stage 2: layer selector matches no parameters");
    for (const auto& o : bundle.objects)
        denoiser.set_embedding(o.placeholder, o.embedding);

    NormalSampler rng(substream(cfg.seed, "training/stage2"));
    Adam adam(cfg.lr);
    bundle.stage2.steps = cfg.steps;
    bundle.stage2.lr = cfg.lr;
    bundle.stage2_selector = cfg.selector;
    bundle.stage2_updated_embeddings = cfg.update_embeddings;
    bundle.stage2.losses = train_loop(denoiser, data, schedule, cfg.steps, rng,
                                      [&](std::size_t i, const backend::Gradients& g) {
                                          for (const auto& name : selected)
                                              adam.step(name, denoiser.parameter(name), g.parameters.at(name));
                                          if (!cfg.update_embeddings)
                                              return;
                                          auto& obj = bundle.objects[i];
                                          const auto it = g.embeddings.find(obj.placeholder);
                                          if (it == g.embeddings.end())
                                              return;
                                          adam.step("emb:" + obj.placeholder, obj.embedding, it->second);
                                          denoiser.set_embedding(obj.placeholder, obj.embedding);
                                      });
    if (cfg.steps > 0)
        bundle.weights = denoiser.serialize_weights();
}

double evaluate_masked_loss(const Denoiser& denoiser, const TrainingSet& data, const NoiseSchedule& schedule,
                            std::uint64_t seed, int samples, bool complement) {
    check_training_set(data);
    if (samples < 1)
        throw ValidationError("evaluate_masked_loss: samples must be >= 1");
    NormalSampler rng(substream(seed, "eval"));
    backend::TapConfig taps;
    taps.cross_attention = false;
    double sum = 0.0;
    for (int s = 0; s < samples; ++s) {
        Draw d = draw(rng, data, schedule);
        d.object = static_cast<std::size_t>(s) % data.masks.size();
        const Latent xt = noised(data.x0, d.noise, d.t, schedule);
        const auto out = denoiser.predict_noise(xt, d.t, data.prompts[d.object], taps);
        Mask m = data.masks[d.object];
        if (complement)
            for (auto& v : m.data)
                v = v ? 0 : 1;
        sum += masked_diffusion_loss(d.noise, out.noise, m);
    }
    return sum / samples;
}

void apply_bundle(const ConceptBundle& bundle, Denoiser& denoiser) {
    if (bundle.backend_id != denoiser.identity())
        throw LoadError("concept bundle was learned on backend '" + bundle.backend_id + "', selected backend is '" +
                        denoiser.identity() + "'");
    if (!bundle.weights.empty())
        denoiser.load_weights(bundle.weights);
    for (const auto& o : bundle.objects)
        denoiser.set_embedding(o.placeholder, o.embedding);
}

void save_bundle(const ConceptBundle& bundle, const fs::path& dir) {
    fs::create_directories(dir);
    const std::size_t dim = bundle.objects.empty() ? 0 : bundle.objects.front().embedding.size();
    std::vector<std::uint8_t> emb(std::begin(kEmbeddingsMagic), std::end(kEmbeddingsMagic));
    auto put64 = [&](std::uint64_t v) {
        const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
        emb.insert(emb.end(), p, p + sizeof(v));
    };
    put64(bundle.objects.size());
    put64(dim);
    for (const auto& o : bundle.objects) {
        if (o.embedding.size() != dim)
            throw ValidationError("save_bundle: embeddings have different dimensions");
        const auto* p = reinterpret_cast<const std::uint8_t*>(o.embedding.data());
        emb.insert(emb.end(), p, p + dim * sizeof(double));
    }
    write_file(dir / "embeddings.bin", emb);
    const auto s1 = to_bytes(write_losses_csv(bundle.stage1.losses));
    const auto s2 = to_bytes(write_losses_csv(bundle.stage2.losses));
    write_file(dir / "stage1_loss.csv", s1);
    write_file(dir / "stage2_loss.csv", s2);

    nlohmann::json files{{"embeddings.bin", sha256_hex(emb)},
                         {"stage1_loss.csv", sha256_hex(s1)},
                         {"stage2_loss.csv", sha256_hex(s2)}};
    if (!bundle.weights.empty()) {
        write_file(dir / "weights.bin", bundle.weights);
        files["weights.bin"] = sha256_hex(bundle.weights);
    } else if (fs::exists(dir / "weights.bin")) {
        fs::remove(dir / "weights.bin");
    }

    nlohmann::json objects = nlohmann::json::array();
    for (std::size_t i = 0; i < bundle.objects.size(); ++i) {
        const auto& o = bundle.objects[i];
        objects.push_back({{"id", o.id}, {"placeholder", o.placeholder}, {"class_noun", o.class_noun}, {"row", i}});
    }
    const nlohmann::json manifest{
        {"format", kFormat},
        {"backend_id", bundle.backend_id},
        {"prompt_template", bundle.prompt_template},
        {"seed", bundle.seed},
        {"embedding_dim", dim},
        {"objects", objects},
        {"stage1", {{"steps", bundle.stage1.steps}, {"lr", bundle.stage1.lr}}},
        {"stage2",
         {{"steps", bundle.stage2.steps},
          {"lr", bundle.stage2.lr},
          {"selector", bundle.stage2_selector},
          {"update_embeddings", bundle.stage2_updated_embeddings}}},
        {"files", files}};
    write_text(dir / "manifest.json", manifest.dump(2));
}

ConceptBundle load_bundle(const fs::path& dir, const std::string& expected_backend) {
    nlohmann::json m;
    try {
        m = nlohmann::json::parse(read_text(dir / "manifest.json"));
    } catch (const nlohmann::json::exception& e) {
        throw LoadError(std::string("concept bundle manifest: ") + e.what());
    }
    try {
        if (m.at("format").get<std::string>() != kFormat)
            throw LoadError("concept bundle: unknown format");
        ConceptBundle b;
        b.backend_id = m.at("backend_id").get<std::string>();
        if (!expected_backend.empty() && b.backend_id != expected_backend)
            throw LoadError("concept bundle was learned on backend '" + b.backend_id + "', expected '" +
                            expected_backend + "'");
        const auto& files = m.at("files");
        auto checked = [&](const std::string& name) {
            const auto bytes = read_file(dir / name);
            if (sha256_hex(bytes) != files.at(name).get<std::string>())
                throw LoadError("concept bundle: hash mismatch for " + name);
            return bytes;
        };
        b.prompt_template = m.at("prompt_template").get<std::string>();
        b.seed = m.at("seed").get<std::uint64_t>();
        b.stage1.steps = m.at("stage1").at("steps").get<int>();
        b.stage1.lr = m.at("stage1").at("lr").get<double>();
        b.stage2.steps = m.at("stage2").at("steps").get<int>();
        b.stage2.lr = m.at("stage2").at("lr").get<double>();
        b.stage2_selector = m.at("stage2").at("selector").get<std::vector<std::string>>();
        b.stage2_updated_embeddings = m.at("stage2").at("update_embeddings").get<bool>();

        const auto emb = checked("embeddings.bin");
        if (emb.size() < 24 || std::memcmp(emb.data(), kEmbeddingsMagic, 8) != 0)
            throw LoadError("concept bundle: bad embeddings header");
        std::uint64_t rows = 0, cols = 0;
        std::memcpy(&rows, emb.data() + 8, 8);
        std::memcpy(&cols, emb.data() + 16, 8);
        if (emb.size() != 24 + rows * cols * sizeof(double))
            throw LoadError("concept bundle: embeddings size mismatch");
        const auto& objects = m.at("objects");
        if (objects.size() != rows)
            throw LoadError("concept bundle: object count differs from embedding rows");
        for (const auto& o : objects) {
            ConceptObject obj;
            obj.id = o.at("id").get<std::string>();
            obj.placeholder = o.at("placeholder").get<std::string>();
            obj.class_noun = o.at("class_noun").get<std::string>();
            const auto row = o.at("row").get<std::uint64_t>();
            if (row >= rows)
                throw LoadError("concept bundle: embedding row out of range");
            obj.embedding.resize(cols);
            std::memcpy(obj.embedding.data(), emb.data() + 24 + row * cols * sizeof(double), cols * sizeof(double));
            b.objects.push_back(std::move(obj));
        }
        if (files.contains("weights.bin"))
            b.weights = checked("weights.bin");
        const auto s1 = checked("stage1_loss.csv");
        const auto s2 = checked("stage2_loss.csv");
        b.stage1.losses = read_losses_csv({s1.begin(), s1.end()});
        b.stage2.losses = read_losses_csv({s2.begin(), s2.end()});
        return b;
    } catch (const nlohmann::json::exception& e) {
        throw LoadError(std::string("concept bundle manifest: ") + e.what());
    }
}

std::string bundle_hash(const fs::path& dir) { return sha256_file(dir / "manifest.json"); }

}  // namespace relayout::concepts
