// Copyright (C) 2026 The relayout Authors
// SPDX-License-Identifier: Apache-2.0

#include <httplib.h>

#include <spdlog/spdlog.h>

#include "relayout/image.hpp"
#include "relayout/service.hpp"

namespace relayout::service {

using nlohmann::json;

namespace {

void send_json(httplib::Response& res, int status, const json& body) {
    res.status = status;
    res.set_content(body.dump(), "application/json");
}

void send_error(httplib::Response& res, int status, const std::string& code, const std::string& message,
                const std::vector<layout::Finding>& findings = {}) {
    send_json(res, status, {{"code", code}, {"message", message}, {"findings", layout::to_json(findings)}});
}

json job_summary(const JobRecord& r) {
    json j = to_json(r);
    // Internal absolute paths stay on the server.
    j.erase("spec");
    j.erase("result");
    j["config"] = pipeline::to_json(r.spec);
    for (const char* k : {"source_image", "source_layout", "target_layout", "output", "telemetry", "debug_dir"})
        j["config"].erase(k);
    j["result_url"] = r.state == JobState::done ? json("/api/jobs/" + r.id + "/result") : json(nullptr);
    return j;
}

std::string sse_frame(const json& ev) {
    return "id: " + std::to_string(ev.at("seq").get<std::uint64_t>()) + "\nevent: " + ev.at("type").get<std::string>() +
           "\ndata: " + ev.dump() + "\n\n";
}

template <typename F>
void guarded(httplib::Response& res, F&& f) {
    try {
        f();
    } catch (const pipeline::SpecValidationError& e) {
        send_error(res, 422, "validation_failed", e.what(), e.findings());
    } catch (const NotFoundError& e) {
        send_error(res, 404, "not_found", e.what());
    } catch (const ConflictError& e) {
        send_error(res, 409, "conflict", e.what());
    } catch (const ValidationError& e) {
        send_error(res, 422, "validation_failed", e.what());
    } catch (const std::exception& e) {
        spdlog::error("request failed: {}", e.what());
        send_error(res, 500, "internal", e.what());
    }
}

}  // namespace

struct HttpServer::Impl {
    JobService& service;
    httplib::Server server;

    explicit Impl(JobService& s) : service(s) {}

    void routes() {
        server.set_payload_max_length(service.config().max_upload_bytes);
        server.set_default_headers({{"Access-Control-Allow-Origin", "*"},
                                    {"Access-Control-Allow-Headers", "Content-Type, Idempotency-Key, Last-Event-ID"},
                                    {"Access-Control-Allow-Methods", "GET, POST, OPTIONS"}});
        server.set_error_handler([](const httplib::Request&, httplib::Response& res) {
            if (!res.body.empty())
                return;
            if (res.status == 413)
                send_error(res, 413, "payload_too_large", "upload exceeds the configured limit");
            else if (res.status == 404)
                send_error(res, 404, "not_found", "no such endpoint");
            else
                send_error(res, res.status, "http_error", "request failed");
        });
        server.Options(R"(/api/.*)", [](const httplib::Request&, httplib::Response& res) { res.status = 204; });

        server.Get("/api/health", [this](const httplib::Request&, httplib::Response& res) {
            send_json(res, 200,
                      {{"status", "ok"},
                       {"workers", service.config().workers},
                       {"running", service.running_jobs()},
                       {"backend", service.config().backend}});
        });

        server.Post("/api/jobs", [this](const httplib::Request& req, httplib::Response& res) {
            guarded(res, [&] { submit(req, res); });
        });

        server.Get("/api/jobs", [this](const httplib::Request&, httplib::Response& res) {
            guarded(res, [&] {
                json arr = json::array();
                for (const auto& r : service.list())
                    arr.push_back(job_summary(r));
                send_json(res, 200, {{"jobs", arr}});
            });
        });

        server.Get(R"(/api/jobs/([0-9A-Z]{26}))", [this](const httplib::Request& req, httplib::Response& res) {
            guarded(res, [&] { send_json(res, 200, job_summary(service.get(req.matches[1]))); });
        });

        server.Post(R"(/api/jobs/([0-9A-Z]{26})/cancel)", [this](const httplib::Request& req, httplib::Response& res) {
            guarded(res, [&] {
                const std::string id = req.matches[1];
                const JobState s = service.cancel(id);
                send_json(res, 200,
                          {{"id", id}, {"state", to_string(s)}, {"cancel_requested", s == JobState::running}});
            });
        });

        server.Get(R"(/api/jobs/([0-9A-Z]{26})/result)", [this](const httplib::Request& req, httplib::Response& res) {
            guarded(res, [&] {
                const auto path = service.result_path(req.matches[1]);
                const auto bytes = read_file(path);
                res.set_content(std::string(bytes.begin(), bytes.end()), "image/png");
            });
        });

        server.Get(R"(/api/jobs/([0-9A-Z]{26})/manifest)",
                   [this](const httplib::Request& req, httplib::Response& res) {
                       guarded(res, [&] {
                           auto path = service.result_path(req.matches[1]);
                           path.replace_extension(".manifest.json");
                           res.set_content(read_text(path), "application/json");
                       });
                   });

        server.Get(R"(/api/jobs/([0-9A-Z]{26})/previews/(\d+))",
                   [this](const httplib::Request& req, httplib::Response& res) {
                       guarded(res, [&] {
                           const auto bytes =
                               read_file(service.preview_path(req.matches[1], std::stoi(req.matches[2])));
                           res.set_content(std::string(bytes.begin(), bytes.end()), "image/png");
                       });
                   });

        server.Get(R"(/api/jobs/([0-9A-Z]{26})/events)", [this](const httplib::Request& req, httplib::Response& res) {
            guarded(res, [&] { events(req, res); });
        });
    }

    void submit(const httplib::Request& req, httplib::Response& res) {
        if (!req.is_multipart_form_data()) {
            send_error(res, 400, "bad_request", "expected multipart/form-data");
            return;
        }
        SubmitRequest sr;
        auto text = [&](const char* name) -> std::string {
            return req.has_file(name) ? req.get_file_value(name).content : std::string();
        };
        if (req.has_file("image")) {
            const auto& c = req.get_file_value("image").content;
            sr.image.assign(c.begin(), c.end());
        }
        sr.source_layout = text("source_layout");
        sr.target_layout = text("target_layout");
        if (sr.source_layout.empty() || sr.target_layout.empty()) {
            send_error(res, 400, "bad_request", "source_layout and target_layout parts are required");
            return;
        }
        if (req.has_file("config")) {
            try {
                sr.config = json::parse(text("config"));
            } catch (const json::exception& e) {
                throw pipeline::SpecValidationError(
                    {{layout::Severity::error, "config_json", std::string("config: ") + e.what(), {}}});
            }
        }
        sr.idempotency_key = req.get_header_value("Idempotency-Key");
        if (sr.idempotency_key.empty())
            sr.idempotency_key = text("idempotency_key");
        for (const auto& [name, part] : req.files) {
            if (name == "image" || name == "source_layout" || name == "target_layout" || name == "config" ||
                name == "idempotency_key")
                continue;
            const std::string file = part.filename.empty() ? name : part.filename;
            sr.files[file] = std::vector<std::uint8_t>(part.content.begin(), part.content.end());
        }
        const auto r = service.submit(sr);
        send_json(res, r.created ? 202 : 200,
                  {{"id", r.id}, {"state", to_string(service.get(r.id).state)}, {"created", r.created}});
    }

    void events(const httplib::Request& req, httplib::Response& res) {
        const std::string id = req.matches[1];
        service.get(id);  // 404 before any streaming starts
        std::uint64_t after = 0;
        if (req.has_param("after"))
            after = std::stoull(req.get_param_value("after"));
        else if (req.has_header("Last-Event-ID"))
            after = std::stoull(req.get_header_value("Last-Event-ID"));

        const bool sse = req.get_header_value("Accept").find("text/event-stream") != std::string::npos;
        if (!sse) {
            // Polling fallback: optional long-poll up to `wait_ms`.
            const int wait_ms = req.has_param("wait_ms") ? std::clamp(std::stoi(req.get_param_value("wait_ms")), 0, 30000) : 0;
            bool finished = false;
            const auto evs = service.events(id, after, std::chrono::milliseconds(wait_ms), &finished);
            const std::uint64_t next = evs.empty() ? after : evs.back().at("seq").get<std::uint64_t>();
            send_json(res, 200,
                      {{"id", id},
                       {"state", to_string(service.get(id).state)},
                       {"events", evs},
                       {"next", next},
                       {"finished", finished}});
            return;
        }
        res.set_header("Cache-Control", "no-cache");
        res.set_chunked_content_provider(
            "text/event-stream", [this, id, after](std::size_t, httplib::DataSink& sink) mutable {
                bool finished = false;
                const auto evs = service.events(id, after, std::chrono::milliseconds(250), &finished);
                for (const auto& ev : evs) {
                    const std::string frame = sse_frame(ev);
                    if (!sink.write(frame.data(), frame.size()))
                        return false;
                    after = ev.at("seq").get<std::uint64_t>();
                }
                if (finished) {
                    sink.done();
                    return true;
                }
                if (evs.empty()) {
                    static const std::string ping = ": ping\n\n";
                    if (!sink.write(ping.data(), ping.size()))
                        return false;
                }
                return sink.is_writable();
            });
    }
};

HttpServer::HttpServer(JobService& service) : impl_(std::make_unique<Impl>(service)) { impl_->routes(); }

HttpServer::~HttpServer() { stop(); }

int HttpServer::bind(const std::string& host, int port) {
    const int bound = port == 0 ? impl_->server.bind_to_any_port(host) : (impl_->server.bind_to_port(host, port) ? port : -1);
    if (bound < 0)
        throw ConfigurationError("cannot bind " + host + ":" + std::to_string(port));
    return bound;
}

void HttpServer::listen() { impl_->server.listen_after_bind(); }

void HttpServer::stop() {
    if (impl_)
        impl_->server.stop();
}

}  // namespace relayout::service
