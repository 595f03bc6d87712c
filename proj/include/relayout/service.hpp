// Copyright (C) 2026 The relayout Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "relayout/errors.hpp"
#include "relayout/layout.hpp"
#include "relayout/pipeline.hpp"

namespace relayout::service {

enum class JobState { queued, running, done, failed, cancelled };

std::string to_string(JobState s);
JobState parse_state(const std::string& s);
bool is_terminal(JobState s);
/// QUEUED -> RUNNING -> {DONE, FAILED}; QUEUED/RUNNING -> CANCELLED.
bool legal_transition(JobState from, JobState to);

/// 26-character Crockford base32 ULID; monotonic within one process.
std::string new_ulid();
/// ISO-8601 UTC with milliseconds.
std::string utc_now();

struct JobProgress {
    int step = 0;
    int total = 0;
    std::vector<std::string> object_ids;
    std::vector<double> losses;
};

struct JobRecord {
    std::string id;
    pipeline::EditJobSpec spec;
    JobState state = JobState::queued;
    JobProgress progress;
    std::string created_at;
    std::string started_at;
    std::string finished_at;
    std::filesystem::path result;
    std::string result_sha256;
    std::string error;
    std::string idempotency_key;
    /// Restart recoveries that re-queued this job.
    int attempts = 0;
};

nlohmann::json to_json(const JobRecord& r);
JobRecord record_from_json(const nlohmann::json& j);

/// One directory per job under <root>/jobs, plus an index rebuilt by scanning.
class JobStore {
public:
    explicit JobStore(std::filesystem::path root);

    std::filesystem::path job_dir(const std::string& id) const;
    std::filesystem::path staging_dir() const;
    void save(const JobRecord& r) const;
    JobRecord load(const std::string& id) const;
    /// All readable records, sorted by id (creation order).
    std::vector<JobRecord> scan() const;
    void write_index(const std::vector<JobRecord>& records) const;

private:
    std::filesystem::path root_;
};

enum class RecoveryPolicy { requeue, fail };

struct ServiceConfig {
    std::filesystem::path data_dir = "relayout-data";
    /// 0 accepts and persists jobs without running any.
    int workers = 1;
    std::string backend = "toy";
    RecoveryPolicy recovery = RecoveryPolicy::requeue;
    std::size_t max_upload_bytes = 64u << 20;
    int preview_every = 5;
    /// Reads RELAYOUT_DATA_DIR, RELAYOUT_WORKERS, RELAYOUT_BACKEND, RELAYOUT_RECOVERY.
    static ServiceConfig from_env();
};

/// Uploaded job: image, two layouts and the mask files they reference.
struct SubmitRequest {
    std::vector<std::uint8_t> image;
    std::string source_layout;
    std::string target_layout;
    /// File name -> PNG bytes.
    std::map<std::string, std::vector<std::uint8_t>> files;
    /// Optional job options (guidance, lfin, init, seed, ...), same keys as a job spec.
    nlohmann::json config = nlohmann::json::object();
    std::string idempotency_key;
};

struct SubmitResult {
    std::string id;
    bool created = false;
};

class NotFoundError : public Error {
public:
    using Error::Error;
};

class ConflictError : public Error {
public:
    using Error::Error;
};

/// Job queue, persistence and workers; no HTTP.
class JobService {
public:
    explicit JobService(ServiceConfig config);
    ~JobService();
    JobService(const JobService&) = delete;
    JobService& operator=(const JobService&) = delete;

    /// Recovers persisted jobs and starts the workers.
    void start();
    void stop();

    /// Throws pipeline::SpecValidationError on invalid payloads.
    SubmitResult submit(const SubmitRequest& request);
    JobRecord get(const std::string& id) const;
    std::vector<JobRecord> list() const;
    /// QUEUED jobs cancel at once; RUNNING ones at the next step boundary.
    JobState cancel(const std::string& id);
    /// Path of the result image; ConflictError unless DONE.
    std::filesystem::path result_path(const std::string& id) const;
    std::filesystem::path preview_path(const std::string& id, int step) const;

    /// Events with seq > after. Blocks up to `wait` when none are ready and
    /// the job is not finished. `finished` reports a terminal job whose events
    /// have all been returned.
    std::vector<nlohmann::json> events(const std::string& id, std::uint64_t after, std::chrono::milliseconds wait,
                                       bool* finished = nullptr) const;

    /// Blocks until the job reaches a terminal state or the timeout expires.
    JobState wait_for(const std::string& id, std::chrono::milliseconds timeout) const;
    int running_jobs() const;
    const ServiceConfig& config() const { return config_; }

private:
    struct Entry {
        JobRecord record;
        std::vector<nlohmann::json> events;
        std::uint64_t next_seq = 1;
        bool cancel_requested = false;
    };

    void worker_loop();
    void run_job(const std::string& id);
    void set_state(Entry& e, JobState to, bool recovery = false);
    void push_event(Entry& e, nlohmann::json payload);
    Entry& entry(const std::string& id);
    const Entry& entry(const std::string& id) const;

    ServiceConfig config_;
    JobStore store_;
    mutable std::mutex mu_;
    mutable std::condition_variable cv_;
    std::map<std::string, Entry> jobs_;
    std::map<std::string, std::string> idempotency_;
    std::deque<std::string> queue_;
    std::vector<std::thread> threads_;
    bool stopping_ = false;
    bool started_ = false;
    int running_ = 0;
};

/// HTTP front end: /api/jobs, /api/jobs/{id}, /api/jobs/{id}/events,
/// /api/jobs/{id}/result, /api/jobs/{id}/cancel, /api/health.
class HttpServer {
public:
    explicit HttpServer(JobService& service);
    ~HttpServer();
    /// Binds; port 0 picks a free port. Returns the bound port.
    int bind(const std::string& host, int port);
    /// Blocks until stop().
    void listen();
    void stop();

private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
};

}  // namespace relayout::service
