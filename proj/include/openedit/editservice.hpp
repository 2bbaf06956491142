// Copyright (C) 2026 The Open-Edit Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <atomic>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>

#include <nlohmann/json.hpp>

#include "openedit/pipeline.hpp"

namespace httplib {
class Server;
}

namespace openedit::service {

struct ServiceConfig {
    std::string host = "127.0.0.1";
    int port = 8080;  // 0 picks a free port
    std::filesystem::path vse_checkpoint;
    std::filesystem::path decoder_checkpoint;
    std::filesystem::path corpus_root;  // optional; enables /v1/corpus
    int max_concurrent_optimizations = 2;
    int max_opt_steps = 500;
    double opt_time_limit_seconds = 60.0;
    std::chrono::seconds session_ttl{600};
    std::size_t max_image_bytes = 1 << 20;
    int worker_threads = 8;
};

/// A JSON reply: status code plus body.
struct Reply {
    int status = 200;
    nlohmann::json body;
    std::string binary;  // raw payload (PNG) when content_type is not JSON
    std::string content_type = "application/json";
};

// {code, message, field?}
nlohmann::json error_body(const std::string& code, const std::string& message, const std::string& field = {});

/// Parsed /v1/edit or /v1/sweep body.
struct EditRequest {
    std::string image_png;  // decoded PNG bytes
    std::string image_id;   // "split/id" when the image came from the corpus
    grounding::EditInstruction instruction;
    bool use_opt = false;
    int opt_steps = 100;
    std::uint64_t seed = 0;
    std::optional<std::string> session_id;
    std::vector<double> grid;  // sweep only
};

/// Request handlers independent of the HTTP transport, so they can be unit
/// tested directly. Thread-safe.
class EditService {
public:
    explicit EditService(ServiceConfig config);
    // Takes already-loaded models (tests); a null pointer means "not loaded".
    EditService(ServiceConfig config, std::shared_ptr<const pipeline::LoadedModels> models);
    ~EditService();

    EditService(const EditService&) = delete;
    EditService& operator=(const EditService&) = delete;

    Reply health() const;
    Reply edit(const std::string& body);
    Reply sweep(const std::string& body);
    Reply corpus_image(const std::string& split, const std::string& id) const;
    Reply corpus_index(const std::string& split) const;

    // Parses and validates a request body; throws ValidationError (field set)
    // or reports size problems through `too_large`.
    EditRequest parse_request(const std::string& body, bool sweep) const;

    std::size_t session_count();
    std::uint64_t optimization_runs() const { return optimization_runs_.load(); }

    // HTTP transport. listen() blocks; start() runs it on a background thread
    // and returns the bound port once the socket is accepting.
    void listen();
    int start();
    void stop();

    const ServiceConfig& config() const { return config_; }

private:
    struct Session {
        std::string key;
        sampleopt::PerturbationSet perturbations;
        std::chrono::steady_clock::time_point last_used;
    };

    Reply run(const std::string& body, bool sweep);
    void purge_expired_locked();
    torch::Tensor load_image(const EditRequest& request) const;

    ServiceConfig config_;
    std::shared_ptr<const pipeline::LoadedModels> models_;
    std::string load_error_;
    std::mutex sessions_mutex_;
    std::map<std::string, Session> sessions_;
    std::atomic<int> active_optimizations_{0};
    std::atomic<std::uint64_t> optimization_runs_{0};
    std::unique_ptr<httplib::Server> server_;
    std::thread thread_;
    int bound_port_ = 0;
};

}  // namespace openedit::service
