// Copyright (C) 2026 The relayout Authors
// SPDX-License-Identifier: Apache-2.0
//
// Command-line front end.

#include <csignal>
#include <iostream>
#include <thread>

#include <CLI11.hpp>
#include <spdlog/spdlog.h>

#include "relayout/concepts.hpp"
#include "relayout/evaluation.hpp"
#include "relayout/pipeline.hpp"
#include "relayout/service.hpp"

namespace fs = std::filesystem;
using namespace relayout;
using nlohmann::json;

namespace {

constexpr int kOk = 0;
constexpr int kFailure = 1;
constexpr int kValidation = 2;
constexpr int kBackend = 3;

void print_findings(const std::vector<layout::Finding>& findings) {
    for (const auto& f : findings)
        std::cerr << (f.severity == layout::Severity::error ? "error" : "warning") << " [" << f.code << "]"
                  << (f.object_id.empty() ? "" : " " + f.object_id) << ": " << f.message << "\n";
}

struct EditArgs {
    std::string spec, image, layout, target, concepts, backend, out, init, debug_dir, telemetry, mode, base;
    std::uint64_t seed = 0;
    int steps = 0;
    double eta = -1, fraction = -1, lfin_stop = -1, lfin_lambda = -1;
    int inner = -1;
    bool no_apa = false, lfin_mask_aware = false;
};

pipeline::EditJobSpec build_spec(const EditArgs& a, CLI::App& cmd) {
    pipeline::EditJobSpec s = a.spec.empty() ? pipeline::EditJobSpec{} : pipeline::load_spec(a.spec);
    auto given = [&](const char* opt) { return cmd.count(opt) > 0; };
    if (given("--image"))
        s.source_image = a.image;
    if (given("--layout"))
        s.source_layout = a.layout;
    if (given("--target"))
        s.target_layout = a.target;
    if (given("--concepts"))
        s.concepts = a.concepts;
    if (given("--backend"))
        s.backend = a.backend;
    if (given("--out"))
        s.output = a.out;
    if (given("--seed"))
        s.seed = a.seed;
    if (given("--steps"))
        s.num_steps = a.steps;
    if (given("--init"))
        s.init = pipeline::parse_init_mode(a.init);
    if (given("--debug-dir"))
        s.debug_dir = a.debug_dir;
    if (given("--telemetry"))
        s.telemetry = a.telemetry;
    if (given("--mode"))
        s.mode = a.mode == "sync" ? editing::Mode::synchronous : editing::Mode::asynchronous;
    if (given("--base"))
        s.base = a.base == "joint" ? editing::BaseMode::joint : editing::BaseMode::unguided;
    if (given("--eta"))
        s.guidance.eta = a.eta;
    if (given("--guidance-fraction"))
        s.guidance.guidance_fraction = a.fraction;
    if (given("--inner-iterations"))
        s.guidance.inner_iterations = a.inner;
    if (given("--lfin-stop"))
        s.lfin.stop_fraction = a.lfin_stop;
    if (given("--lfin-lambda"))
        s.lfin.blend_lambda = a.lfin_lambda;
    if (a.lfin_mask_aware)
        s.lfin.mask_aware = true;
    if (a.no_apa)
        s.projection.enabled = false;
    s.lfin.seed = s.seed;
    return s;
}

int run_serve(const fs::path& data_dir, int port, const std::string& host, int workers, const std::string& recovery,
              CLI::App& cmd) {
    auto cfg = service::ServiceConfig::from_env();
    if (cmd.count("--data-dir"))
        cfg.data_dir = data_dir;
    if (cmd.count("--workers"))
        cfg.workers = workers;
    if (cmd.count("--recovery"))
        cfg.recovery = recovery == "fail" ? service::RecoveryPolicy::fail : service::RecoveryPolicy::requeue;

    // Block termination signals in every thread; one thread waits for them.
    sigset_t set;
    sigemptyset(&set);
    sigaddset(&set, SIGINT);
    sigaddset(&set, SIGTERM);
    pthread_sigmask(SIG_BLOCK, &set, nullptr);

    service::JobService svc(cfg);
    svc.start();
    service::HttpServer http(svc);
    const int bound = http.bind(host, port);
    spdlog::info("listening on http://{}:{} (data dir {}, {} worker(s), backend {})", host, bound,
                 cfg.data_dir.string(), cfg.workers, cfg.backend);
    std::thread waiter([&] {
        int sig = 0;
        sigwait(&set, &sig);
        spdlog::info("signal {} received; shutting down", sig);
        http.stop();
    });
    http.listen();
    svc.stop();
    if (waiter.joinable()) {
        // listen() may also return on its own; wake the waiter.
        pthread_kill(waiter.native_handle(), SIGTERM);
        waiter.join();
    }
    return kOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"relayout: move objects in an image to a new layout"};
    app.require_subcommand(1);
    bool verbose = false, quiet = false;
    app.add_flag("-v,--verbose", verbose, "Debug logging");
    app.add_flag("-q,--quiet", quiet, "Warnings and errors only");

    // learn-concepts
    auto* learn = app.add_subcommand("learn-concepts", "Learn per-object concepts from one image");
    std::string l_image, l_layout, l_out, l_backend = "toy";
    std::uint64_t l_seed = 0;
    pipeline::LearnConfig lc;
    learn->add_option("--image", l_image, "Source image (PNG)")->required();
    learn->add_option("--layout", l_layout, "Source layout JSON")->required();
    learn->add_option("--out", l_out, "Bundle directory")->required();
    learn->add_option("--backend", l_backend, "toy or adapter:<name>");
    learn->add_option("--seed", l_seed);
    learn->add_option("--steps", lc.num_steps, "Schedule length (0: backend default)");
    learn->add_option("--stage1-steps", lc.stage1.steps);
    learn->add_option("--stage2-steps", lc.stage2.steps);
    learn->add_option("--stage1-lr", lc.stage1.lr);
    learn->add_option("--stage2-lr", lc.stage2.lr);
    learn->add_option("--stage2-select", lc.stage2.selector, "Parameter glob patterns for stage 2");
    learn->add_flag("--update-embeddings", lc.stage2.update_embeddings, "Stage 2 also updates embeddings");

    // edit
    auto* edit = app.add_subcommand("edit", "Edit an image to a target layout");
    EditArgs ea;
    edit->add_option("--spec", ea.spec, "Job spec JSON; other options override it");
    edit->add_option("--image", ea.image);
    edit->add_option("--layout", ea.layout, "Source layout JSON");
    edit->add_option("--target", ea.target, "Target layout JSON");
    edit->add_option("--concepts", ea.concepts, "Concept bundle directory");
    edit->add_option("--backend", ea.backend, "toy or adapter:<name>");
    edit->add_option("--seed", ea.seed);
    edit->add_option("--out", ea.out, "Output PNG");
    edit->add_option("--init", ea.init)->check(CLI::IsMember({"random", "lfin", "inversion"}));
    edit->add_option("--debug-dir", ea.debug_dir);
    edit->add_option("--telemetry", ea.telemetry, "Per-step CSV");
    edit->add_option("--steps", ea.steps);
    edit->add_option("--mode", ea.mode)->check(CLI::IsMember({"async", "sync"}));
    edit->add_option("--base", ea.base)->check(CLI::IsMember({"unguided", "joint"}));
    edit->add_option("--eta", ea.eta);
    edit->add_option("--guidance-fraction", ea.fraction);
    edit->add_option("--inner-iterations", ea.inner);
    edit->add_option("--lfin-stop", ea.lfin_stop);
    edit->add_option("--lfin-lambda", ea.lfin_lambda);
    edit->add_flag("--lfin-mask-aware", ea.lfin_mask_aware);
    edit->add_flag("--no-apa", ea.no_apa, "Disable appearance projection");

    // validate
    auto* validate = app.add_subcommand("validate", "Check a job spec");
    std::string v_spec;
    validate->add_option("--spec", v_spec)->required();

    // eval
    auto* eval = app.add_subcommand("eval", "Score a directory of edited cases");
    std::string e_cases, e_out, e_embedder = "mock";
    eval->add_option("--cases", e_cases)->required();
    eval->add_option("--out", e_out)->required();
    eval->add_option("--embedder", e_embedder)->check(CLI::IsMember({"mock", "none"}));

    // reproduce
    auto* repro = app.add_subcommand("reproduce", "Re-run a job from its manifest and compare output hashes");
    std::string r_manifest, r_out;
    repro->add_option("--manifest", r_manifest)->required();
    repro->add_option("--out", r_out)->required();

    // serve
    auto* serve = app.add_subcommand("serve", "Run the job service");
    std::string s_host = "127.0.0.1", s_data, s_recovery = "requeue";
    int s_port = 8080, s_workers = 1;
    serve->add_option("--host", s_host);
    serve->add_option("--port", s_port);
    serve->add_option("--data-dir", s_data);
    serve->add_option("--workers", s_workers);
    serve->add_option("--recovery", s_recovery)->check(CLI::IsMember({"requeue", "fail"}));

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kValidation;
    }
    spdlog::set_level(verbose ? spdlog::level::debug : quiet ? spdlog::level::warn : spdlog::level::info);

    try {
        if (*learn) {
            const Image img = png::read(l_image);
            const auto lay = layout::load(l_layout);
            lc.backend = l_backend;
            lc.seed = l_seed;
            const auto bundle = pipeline::learn_concepts(img, lay, lc);
            concepts::save_bundle(bundle, l_out);
            spdlog::info("stage 1 final loss {:.6f}; bundle written to {}",
                         bundle.stage1.losses.empty() ? 0.0 : bundle.stage1.losses.back(), l_out);
            return kOk;
        }
        if (*edit) {
            const auto spec = build_spec(ea, *edit);
            if (spec.output.empty())
                throw ValidationError("--out is required");
            pipeline::ProgressSink sink;
            sink.on_step = [](const pipeline::ProgressEvent& ev) {
                spdlog::info("step {}/{} t={} loss={:.4f}{}", ev.index, ev.total, ev.t, ev.total_loss,
                             ev.guided ? " (guided)" : "");
            };
            const auto r = pipeline::edit_layout(spec, sink);
            std::cout << r.manifest.at("output").dump() << "\n";
            return kOk;
        }
        if (*validate) {
            const auto spec = pipeline::load_spec(v_spec);
            const auto findings = pipeline::validate_spec(spec);
            std::cout << layout::to_json(findings).dump(2) << "\n";
            return layout::has_errors(findings) ? kValidation : kOk;
        }
        if (*eval) {
            std::unique_ptr<evaluation::Embedder> emb;
            if (e_embedder == "mock")
                emb = std::make_unique<evaluation::MockEmbedder>();
            const auto report = evaluation::evaluate_cases(e_cases, emb.get());
            write_text(e_out, report.dump(2));
            std::cout << report.at("summary").dump(2) << "\n";
            return kOk;
        }
        if (*repro) {
            const auto manifest = json::parse(read_text(r_manifest));
            const bool same = pipeline::reproduce(manifest, r_out);
            std::cout << (same ? "reproduced: output hash matches" : "output hash differs") << "\n";
            return same ? kOk : kFailure;
        }
        if (*serve)
            return run_serve(s_data, s_port, s_host, s_workers, s_recovery, *serve);
    } catch (const pipeline::SpecValidationError& e) {
        print_findings(e.findings());
        spdlog::error("{}", e.what());
        return kValidation;
    } catch (const ValidationError& e) {
        spdlog::error("validation error: {}", e.what());
        return kValidation;
    } catch (const json::exception& e) {
        spdlog::error("invalid JSON: {}", e.what());
        return kValidation;
    } catch (const BackendError& e) {
        spdlog::error("backend error: {}", e.what());
        return kBackend;
    } catch (const LoadError& e) {
        spdlog::error("load error: {}", e.what());
        return kBackend;
    } catch (const DecodeError& e) {
        spdlog::error("decode error: {}", e.what());
        return kBackend;
    } catch (const std::exception& e) {
        spdlog::error("{}", e.what());
        return kFailure;
    }
    return kOk;
}
