// Copyright (C) 2026 The relayout Authors
// SPDX-License-Identifier: Apache-2.0

#include "relayout/service.hpp"

#include <algorithm>
#include <array>
#include <cstdlib>
#include <ctime>
#include <random>
#include <regex>

#include <spdlog/spdlog.h>

#include "relayout/hash.hpp"
#include "relayout/image.hpp"

namespace relayout::service {

namespace fs = std::filesystem;
using nlohmann::json;

std::string to_string(JobState s) {
    switch (s) {
    case JobState::queued:
        return "QUEUED";
    case JobState::running:
        return "RUNNING";
    case JobState::done:
        return "DONE";
    case JobState::failed:
        return "FAILED";
    case JobState::cancelled:
        return "CANCELLED";
    }
    return "FAILED";
}

JobState parse_state(const std::string& s) {
    for (JobState st : {JobState::queued, JobState::running, JobState::done, JobState::failed, JobState::cancelled})
        if (to_string(st) == s)
            return st;
    throw ValidationError("unknown job state: " + s);
}

bool is_terminal(JobState s) { return s == JobState::done || s == JobState::failed || s == JobState::cancelled; }

bool legal_transition(JobState from, JobState to) {
    switch (from) {
    case JobState::queued:
        return to == JobState::running || to == JobState::cancelled;
    case JobState::running:
        return to == JobState::done || to == JobState::failed || to == JobState::cancelled;
    default:
        return false;
    }
}

std::string new_ulid() {
    static std::mutex mu;
    static std::uint64_t last_ms = 0;
    static std::array<std::uint8_t, 10> last_rand{};
    static std::mt19937_64 gen{std::random_device{}()};
    constexpr char kAlphabet[] = "0123456789ABCDEFGHJKMNPQRSTVWXYZ";

    std::lock_guard lock(mu);
    const auto now = static_cast<std::uint64_t>(
        std::chrono::duration_cast<std::chrono::milliseconds>(std::chrono::system_clock::now().time_since_epoch())
            .count());
    std::array<std::uint8_t, 10> rnd{};
    if (now <= last_ms) {
        // Same millisecond: increment the random part to stay monotonic.
        rnd = last_rand;
        for (int i = 9; i >= 0; --i)
            if (++rnd[static_cast<std::size_t>(i)] != 0)
                break;
    } else {
        for (auto& b : rnd)
            b = static_cast<std::uint8_t>(gen() & 0xff);
        last_ms = now;
    }
    last_rand = rnd;

    std::array<std::uint8_t, 16> bytes{};
    for (int i = 0; i < 6; ++i)
        bytes[static_cast<std::size_t>(i)] = static_cast<std::uint8_t>(last_ms >> (8 * (5 - i)));
    std::copy(rnd.begin(), rnd.end(), bytes.begin() + 6);
    // 128 bits -> 26 base32 digits, most significant first (2 leading pad bits).
    std::string out(26, '0');
    for (int d = 0; d < 26; ++d) {
        const int bit = 128 - 5 * (26 - d);
        int v = 0;
        for (int k = 0; k < 5; ++k) {
            const int b = bit + k;
            v <<= 1;
            if (b >= 0)
                v |= (bytes[static_cast<std::size_t>(b / 8)] >> (7 - b % 8)) & 1;
        }
        out[static_cast<std::size_t>(d)] = kAlphabet[v];
    }
    return out;
}

std::string utc_now() {
    const auto now = std::chrono::system_clock::now();
    const auto ms = std::chrono::duration_cast<std::chrono::milliseconds>(now.time_since_epoch()).count() % 1000;
    const std::time_t tt = std::chrono::system_clock::to_time_t(now);
    std::tm tm{};
    gmtime_r(&tt, &tm);
    char buf[40];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%S", &tm);
    char out[48];
    std::snprintf(out, sizeof out, "%s.%03dZ", buf, static_cast<int>(ms));
    return out;
}

json to_json(const JobRecord& r) {
    json losses = json::object();
    for (std::size_t i = 0; i < r.progress.object_ids.size() && i < r.progress.losses.size(); ++i)
        losses[r.progress.object_ids[i]] = r.progress.losses[i];
    return {{"id", r.id},
            {"state", to_string(r.state)},
            {"spec", pipeline::to_json(r.spec)},
            {"progress",
             {{"step", r.progress.step},
              {"total", r.progress.total},
              {"object_ids", r.progress.object_ids},
              {"losses", losses}}},
            {"created_at", r.created_at},
            {"started_at", r.started_at.empty() ? json(nullptr) : json(r.started_at)},
            {"finished_at", r.finished_at.empty() ? json(nullptr) : json(r.finished_at)},
            {"result", r.result.empty() ? json(nullptr) : json(r.result.generic_string())},
            {"result_sha256", r.result_sha256.empty() ? json(nullptr) : json(r.result_sha256)},
            {"error", r.error.empty() ? json(nullptr) : json(r.error)},
            {"idempotency_key", r.idempotency_key.empty() ? json(nullptr) : json(r.idempotency_key)},
            {"attempts", r.attempts}};
}

JobRecord record_from_json(const json& j) {
    auto str = [&](const char* k) { return j.contains(k) && j.at(k).is_string() ? j.at(k).get<std::string>() : ""; };
    JobRecord r;
    try {
        r.id = j.at("id").get<std::string>();
        r.state = parse_state(j.at("state").get<std::string>());
        r.spec = pipeline::spec_from_json(j.at("spec"));
        const auto& p = j.at("progress");
        r.progress.step = p.value("step", 0);
        r.progress.total = p.value("total", 0);
        r.progress.object_ids = p.value("object_ids", std::vector<std::string>{});
        for (const auto& id : r.progress.object_ids)
            if (p.contains("losses") && p.at("losses").contains(id))
                r.progress.losses.push_back(p.at("losses").at(id).get<double>());
        r.created_at = str("created_at");
        r.started_at = str("started_at");
        r.finished_at = str("finished_at");
        r.result = str("result");
        r.result_sha256 = str("result_sha256");
        r.error = str("error");
        r.idempotency_key = str("idempotency_key");
        r.attempts = j.value("attempts", 0);
    } catch (const json::exception& e) {
        throw LoadError(std::string("job record: ") + e.what());
    }
    return r;
}

JobStore::JobStore(fs::path root) : root_(std::move(root)) {
    fs::create_directories(root_ / "jobs");
    fs::create_directories(staging_dir());
}

fs::path JobStore::job_dir(const std::string& id) const { return root_ / "jobs" / id; }
fs::path JobStore::staging_dir() const { return root_ / "staging"; }

void JobStore::save(const JobRecord& r) const {
    const fs::path dir = job_dir(r.id);
    fs::create_directories(dir);
    const fs::path tmp = dir / "job.json.tmp";
    write_text(tmp, to_json(r).dump(2));
    fs::rename(tmp, dir / "job.json");
}

JobRecord JobStore::load(const std::string& id) const {
    try {
        return record_from_json(json::parse(read_text(job_dir(id) / "job.json")));
    } catch (const json::exception& e) {
        throw LoadError("job " + id + ": " + e.what());
    }
}

std::vector<JobRecord> JobStore::scan() const {
    std::vector<JobRecord> out;
    for (const auto& e : fs::directory_iterator(root_ / "jobs")) {
        if (!e.is_directory() || !fs::exists(e.path() / "job.json"))
            continue;
        try {
            out.push_back(load(e.path().filename().string()));
        } catch (const Error& err) {
            spdlog::error("skipping unreadable job {}: {}", e.path().filename().string(), err.what());
        }
    }
    std::sort(out.begin(), out.end(), [](const JobRecord& a, const JobRecord& b) { return a.id < b.id; });
    return out;
}

void JobStore::write_index(const std::vector<JobRecord>& records) const {
    json idx = json::array();
    for (const auto& r : records)
        idx.push_back({{"id", r.id}, {"state", to_string(r.state)}, {"created_at", r.created_at}});
    const fs::path tmp = root_ / "index.json.tmp";
    write_text(tmp, idx.dump(2));
    fs::rename(tmp, root_ / "index.json");
}

ServiceConfig ServiceConfig::from_env() {
    ServiceConfig c;
    if (const char* d = std::getenv("RELAYOUT_DATA_DIR"); d && *d)
        c.data_dir = d;
    if (const char* w = std::getenv("RELAYOUT_WORKERS"); w && *w) {
        try {
            c.workers = std::stoi(w);
        } catch (const std::exception&) {
            throw ConfigurationError(std::string("RELAYOUT_WORKERS is not an integer: ") + w);
        }
        if (c.workers < 1)
            throw ConfigurationError("RELAYOUT_WORKERS must be >= 1");
    }
    if (const char* b = std::getenv("RELAYOUT_BACKEND"); b && *b)
        c.backend = b;
    if (const char* r = std::getenv("RELAYOUT_RECOVERY"); r && *r) {
        const std::string v = r;
        if (v == "requeue")
            c.recovery = RecoveryPolicy::requeue;
        else if (v == "fail")
            c.recovery = RecoveryPolicy::fail;
        else
            throw ConfigurationError("RELAYOUT_RECOVERY must be requeue or fail");
    }
    return c;
}

JobService::JobService(ServiceConfig config) : config_(std::move(config)), store_(config_.data_dir) {
    if (config_.workers < 0)
        throw ConfigurationError("workers must be >= 0");
}

JobService::~JobService() { stop(); }

void JobService::start() {
    std::lock_guard lock(mu_);
    if (started_)
        return;
    for (auto& r : store_.scan()) {
        Entry e;
        e.record = std::move(r);
        if (e.record.state == JobState::running) {
            if (config_.recovery == RecoveryPolicy::requeue) {
                spdlog::warn("job {} was RUNNING at shutdown; re-queued", e.record.id);
                set_state(e, JobState::queued, true);
            } else {
                spdlog::warn("job {} was RUNNING at shutdown; marked FAILED", e.record.id);
                e.record.error = "interrupted by a service restart";
                set_state(e, JobState::failed, true);
            }
        }
        if (e.record.state == JobState::queued)
            queue_.push_back(e.record.id);
        if (!e.record.idempotency_key.empty())
            idempotency_[e.record.idempotency_key] = e.record.id;
        const std::string id = e.record.id;
        jobs_.emplace(id, std::move(e));
    }
    std::vector<JobRecord> all;
    for (const auto& [id, e] : jobs_)
        all.push_back(e.record);
    store_.write_index(all);
    stopping_ = false;
    for (int i = 0; i < config_.workers; ++i)
        threads_.emplace_back([this] { worker_loop(); });
    started_ = true;
}

void JobService::stop() {
    {
        std::lock_guard lock(mu_);
        if (!started_)
            return;
        stopping_ = true;
    }
    cv_.notify_all();
    for (auto& t : threads_)
        t.join();
    threads_.clear();
    std::lock_guard lock(mu_);
    std::vector<JobRecord> all;
    for (const auto& [id, e] : jobs_)
        all.push_back(e.record);
    store_.write_index(all);
    started_ = false;
}

JobService::Entry& JobService::entry(const std::string& id) {
    auto it = jobs_.find(id);
    if (it == jobs_.end())
        throw NotFoundError("no job " + id);
    return it->second;
}

const JobService::Entry& JobService::entry(const std::string& id) const {
    auto it = jobs_.find(id);
    if (it == jobs_.end())
        throw NotFoundError("no job " + id);
    return it->second;
}

void JobService::push_event(Entry& e, json payload) {
    payload["seq"] = e.next_seq++;
    payload["job"] = e.record.id;
    e.events.push_back(std::move(payload));
    cv_.notify_all();
}

void JobService::set_state(Entry& e, JobState to, bool recovery) {
    const JobState from = e.record.state;
    const bool allowed = legal_transition(from, to) ||
                         (recovery && from == JobState::running && (to == JobState::queued || to == JobState::failed));
    if (!allowed)
        throw ContractViolation("illegal job transition " + to_string(from) + " -> " + to_string(to));
    e.record.state = to;
    if (to == JobState::running)
        e.record.started_at = utc_now();
    if (is_terminal(to))
        e.record.finished_at = utc_now();
    if (recovery && to == JobState::queued) {
        ++e.record.attempts;
        e.record.progress = {};
        e.record.started_at.clear();
    }
    store_.save(e.record);
    json ev = {{"type", "state"}, {"state", to_string(to)}};
    if (!e.record.error.empty() && to == JobState::failed)
        ev["error"] = e.record.error;
    push_event(e, std::move(ev));
}

namespace {

bool safe_file_name(const std::string& name) {
    static const std::regex re("[A-Za-z0-9][A-Za-z0-9._-]*");
    return name.size() <= 128 && std::regex_match(name, re) && name != "job.json" && name.find("..") == std::string::npos;
}

layout::Finding finding(std::string code, std::string message) {
    return {layout::Severity::error, std::move(code), std::move(message), {}};
}

}  // namespace

SubmitResult JobService::submit(const SubmitRequest& req) {
    if (!req.idempotency_key.empty()) {
        std::lock_guard lock(mu_);
        if (auto it = idempotency_.find(req.idempotency_key); it != idempotency_.end())
            return {it->second, false};
    }

    std::vector<layout::Finding> findings;
    json src_json, tar_json;
    try {
        src_json = json::parse(req.source_layout);
    } catch (const json::exception& e) {
        findings.push_back(finding("layout_json", std::string("source layout: ") + e.what()));
    }
    try {
        tar_json = json::parse(req.target_layout);
    } catch (const json::exception& e) {
        findings.push_back(finding("layout_json", std::string("target layout: ") + e.what()));
    }
    if (req.image.empty())
        findings.push_back(finding("missing_file", "no source image uploaded"));
    for (const auto& [name, bytes] : req.files)
        if (!safe_file_name(name))
            findings.push_back(finding("bad_filename", "unsafe upload file name '" + name + "'"));
    if (!req.config.is_object())
        findings.push_back(finding("config_json", "config must be a JSON object"));
    else if (req.config.contains("concepts") && !req.config.at("concepts").is_null())
        findings.push_back(finding("unsupported", "concept bundles cannot be uploaded with a job"));
    if (layout::has_errors(findings))
        throw pipeline::SpecValidationError(findings);

    const std::string id = new_ulid();
    const fs::path staging = store_.staging_dir() / id;
    fs::create_directories(staging / "inputs");
    auto spec_at = [&](const fs::path& base) {
        json j = req.config;
        if (!j.contains("backend"))
            j["backend"] = config_.backend;
        j["source_image"] = "inputs/source.png";
        j["source_layout"] = "inputs/source_layout.json";
        j["target_layout"] = "inputs/target_layout.json";
        j["output"] = "result.png";
        j["telemetry"] = "telemetry.csv";
        j.erase("debug_dir");
        return pipeline::spec_from_json(j, base);
    };

    pipeline::EditJobSpec staged;
    try {
        write_file(staging / "inputs" / "source.png", req.image);
        write_text(staging / "inputs" / "source_layout.json", src_json.dump(2));
        write_text(staging / "inputs" / "target_layout.json", tar_json.dump(2));
        for (const auto& [name, bytes] : req.files)
            write_file(staging / "inputs" / name, bytes);
        staged = spec_at(staging);
        findings = pipeline::validate_spec(staged);
    } catch (const ValidationError& e) {
        findings.push_back(finding("config_json", e.what()));
    }
    if (layout::has_errors(findings)) {
        fs::remove_all(staging);
        throw pipeline::SpecValidationError(findings);
    }

    const fs::path dir = store_.job_dir(id);
    fs::rename(staging, dir);
    JobRecord r;
    r.id = id;
    r.spec = spec_at(dir);
    r.state = JobState::queued;
    r.created_at = utc_now();
    r.idempotency_key = req.idempotency_key;

    std::lock_guard lock(mu_);
    if (!req.idempotency_key.empty()) {
        // Another request with the same key may have won the race.
        if (auto it = idempotency_.find(req.idempotency_key); it != idempotency_.end()) {
            fs::remove_all(dir);
            return {it->second, false};
        }
        idempotency_[req.idempotency_key] = id;
    }
    store_.save(r);
    Entry e;
    e.record = r;
    auto& stored = jobs_.emplace(id, std::move(e)).first->second;
    push_event(stored, {{"type", "state"}, {"state", to_string(JobState::queued)}});
    queue_.push_back(id);
    cv_.notify_all();
    return {id, true};
}

JobRecord JobService::get(const std::string& id) const {
    std::lock_guard lock(mu_);
    return entry(id).record;
}

std::vector<JobRecord> JobService::list() const {
    std::lock_guard lock(mu_);
    std::vector<JobRecord> out;
    for (const auto& [id, e] : jobs_)
        out.push_back(e.record);
    return out;
}

JobState JobService::cancel(const std::string& id) {
    std::lock_guard lock(mu_);
    Entry& e = entry(id);
    switch (e.record.state) {
    case JobState::queued:
        e.cancel_requested = true;
        set_state(e, JobState::cancelled);
        queue_.erase(std::remove(queue_.begin(), queue_.end(), id), queue_.end());
        break;
    case JobState::running:
        e.cancel_requested = true;
        break;
    case JobState::cancelled:
        break;
    default:
        throw ConflictError("job " + id + " already finished as " + to_string(e.record.state));
    }
    return e.record.state;
}

fs::path JobService::result_path(const std::string& id) const {
    std::lock_guard lock(mu_);
    const Entry& e = entry(id);
    if (e.record.state != JobState::done)
        throw ConflictError("job " + id + " is " + to_string(e.record.state) + ", not DONE");
    return e.record.result;
}

fs::path JobService::preview_path(const std::string& id, int step) const {
    {
        std::lock_guard lock(mu_);
        entry(id);
    }
    const fs::path p = store_.job_dir(id) / "previews" / ("step_" + std::to_string(step) + ".png");
    if (!fs::exists(p))
        throw NotFoundError("no preview for step " + std::to_string(step));
    return p;
}

std::vector<json> JobService::events(const std::string& id, std::uint64_t after, std::chrono::milliseconds wait,
                                     bool* finished) const {
    std::unique_lock lock(mu_);
    const Entry* e = &entry(id);
    auto ready = [&] {
        return stopping_ || is_terminal(e->record.state) ||
               (!e->events.empty() && e->events.back().at("seq").get<std::uint64_t>() > after);
    };
    if (!ready())
        cv_.wait_for(lock, wait, ready);
    std::vector<json> out;
    for (const auto& ev : e->events)
        if (ev.at("seq").get<std::uint64_t>() > after)
            out.push_back(ev);
    if (finished)
        *finished = is_terminal(e->record.state);
    return out;
}

JobState JobService::wait_for(const std::string& id, std::chrono::milliseconds timeout) const {
    std::unique_lock lock(mu_);
    const Entry* e = &entry(id);
    cv_.wait_for(lock, timeout, [&] { return is_terminal(e->record.state); });
    return e->record.state;
}

int JobService::running_jobs() const {
    std::lock_guard lock(mu_);
    return running_;
}

void JobService::worker_loop() {
    for (;;) {
        std::string id;
        {
            std::unique_lock lock(mu_);
            cv_.wait(lock, [&] { return stopping_ || !queue_.empty(); });
            if (stopping_)
                return;
            id = queue_.front();
            queue_.pop_front();
            Entry& e = entry(id);
            if (e.record.state != JobState::queued)
                continue;
            set_state(e, JobState::running);
            ++running_;
        }
        run_job(id);
        std::lock_guard lock(mu_);
        --running_;
    }
}

void JobService::run_job(const std::string& id) {
    pipeline::EditJobSpec spec;
    {
        std::lock_guard lock(mu_);
        spec = entry(id).record.spec;
    }
    const fs::path dir = store_.job_dir(id);
    pipeline::ProgressSink sink;
    sink.preview_every = spec.backend == "toy" ? config_.preview_every : 0;
    sink.cancelled = [&] {
        std::lock_guard lock(mu_);
        return stopping_ || entry(id).cancel_requested;
    };
    sink.on_step = [&](const pipeline::ProgressEvent& ev) {
        json ev_json = {{"type", "progress"},
                        {"step", ev.index},
                        {"t", ev.t},
                        {"total", ev.total},
                        {"guided", ev.guided},
                        {"total_loss", ev.total_loss}};
        json losses = json::object();
        for (std::size_t i = 0; i < ev.object_ids.size() && i < ev.losses.size(); ++i)
            losses[ev.object_ids[i]] = ev.losses[i];
        ev_json["losses"] = losses;
        if (ev.preview) {
            fs::create_directories(dir / "previews");
            png::write(dir / "previews" / ("step_" + std::to_string(ev.index) + ".png"), *ev.preview);
            ev_json["preview"] = "/api/jobs/" + id + "/previews/" + std::to_string(ev.index);
        }
        std::lock_guard lock(mu_);
        Entry& e = entry(id);
        e.record.progress = {ev.index, ev.total, ev.object_ids, ev.losses};
        store_.save(e.record);
        push_event(e, std::move(ev_json));
    };

    try {
        const auto result = pipeline::edit_layout(spec, sink);
        const std::string sha = sha256_file(spec.output);
        const std::string expected = result.manifest.at("output").at("sha256").get<std::string>();
        std::lock_guard lock(mu_);
        Entry& e = entry(id);
        if (sha != expected) {
            e.record.error = "result hash does not match the run manifest";
            set_state(e, JobState::failed);
            return;
        }
        e.record.result = spec.output;
        e.record.result_sha256 = sha;
        set_state(e, JobState::done);
    } catch (const CancelledError&) {
        std::lock_guard lock(mu_);
        Entry& e = entry(id);
        if (e.cancel_requested) {
            set_state(e, JobState::cancelled);
        } else {
            // Service shutdown: hand the job back to the queue for the next start.
            spdlog::info("job {} interrupted by shutdown; re-queued", id);
            set_state(e, JobState::queued, true);
        }
    } catch (const std::exception& ex) {
        spdlog::error("job {} failed: {}", id, ex.what());
        std::lock_guard lock(mu_);
        Entry& e = entry(id);
        e.record.error = ex.what();
        set_state(e, JobState::failed);
    }
}

}  // namespace relayout::service
