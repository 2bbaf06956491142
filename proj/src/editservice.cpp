// Copyright (C) 2026 The Open-Edit Authors
// SPDX-License-Identifier: Apache-2.0

#include "openedit/editservice.hpp"

#include <fstream>
#include <regex>
#include <set>

#include <fmt/format.h>
#include <httplib.h>

#include "openedit/common.hpp"
#include "openedit/image.hpp"
#include "openedit/log.hpp"

namespace openedit::service {
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

class PayloadTooLarge : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ImageNotFound : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

Reply error_reply(int status, const std::string& code, const std::string& message, const std::string& field = {}) {
    return {status, error_body(code, message, field)};
}

double elapsed_ms(std::chrono::steady_clock::time_point since) {
    return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - since).count();
}

std::string png_base64(const torch::Tensor& image) { return base64_encode(encode_png(image)); }

json grounding_json(const grounding::GroundingMap& map) {
    auto values = map.normalized().to(torch::kFloat64).contiguous();
    json rows = json::array();
    for (std::int64_t i = 0; i < values.size(0); ++i) {
        json row = json::array();
        for (std::int64_t j = 0; j < values.size(1); ++j) {
            row.push_back(values[i][j].item<double>());
        }
        rows.push_back(row);
    }
    return rows;
}

bool valid_name(const std::string& s) {
    static const std::regex pattern("[A-Za-z0-9_-]{1,64}");
    return std::regex_match(s, pattern);
}

bool valid_split(const std::string& s) { return s == "train" || s == "val" || s == "test"; }

// Releases an optimization slot on scope exit.
class SlotGuard {
public:
    explicit SlotGuard(std::atomic<int>* counter) : counter_(counter) {}
    ~SlotGuard() {
        if (counter_ != nullptr) {
            counter_->fetch_sub(1);
        }
    }
    SlotGuard(const SlotGuard&) = delete;
    SlotGuard& operator=(const SlotGuard&) = delete;

private:
    std::atomic<int>* counter_;
};

}  // namespace

json error_body(const std::string& code, const std::string& message, const std::string& field) {
    json body{{"code", code}, {"message", message}};
    if (!field.empty()) {
        body["field"] = field;
    }
    return body;
}

EditService::EditService(ServiceConfig config) : config_(std::move(config)) {
    try {
        models_ = std::make_shared<const pipeline::LoadedModels>(
            pipeline::LoadedModels::load(config_.vse_checkpoint, config_.decoder_checkpoint));
    } catch (const std::exception& e) {
        load_error_ = e.what();
        log::error("model not loaded: {}", load_error_);
    }
}

EditService::EditService(ServiceConfig config, std::shared_ptr<const pipeline::LoadedModels> models)
    : config_(std::move(config)), models_(std::move(models)) {
    if (!models_) {
        load_error_ = "no models supplied";
    }
}

EditService::~EditService() { stop(); }

Reply EditService::health() const {
    if (!models_) {
        return error_reply(503, "model_unavailable", "model not loaded: " + load_error_);
    }
    return {200,
            {{"status", "ok"},
             {"vse_hash", models_->vse.parameter_hash()},
             {"decoder_hash", models_->decoder.parameter_hash()},
             {"vse_config", models_->vse.config().to_json()},
             {"decoder_config", models_->decoder.config().to_json()},
             {"limits",
              {{"max_opt_steps", config_.max_opt_steps},
               {"opt_time_limit_seconds", config_.opt_time_limit_seconds},
               {"max_concurrent_optimizations", config_.max_concurrent_optimizations},
               {"session_ttl_seconds", config_.session_ttl.count()},
               {"max_image_bytes", config_.max_image_bytes}}}}};
}

EditRequest EditService::parse_request(const std::string& body, bool sweep) const {
    json j;
    try {
        j = json::parse(body);
    } catch (const json::parse_error& e) {
        throw ValidationError(std::string("request body is not valid JSON: ") + e.what(), "body");
    }
    if (!j.is_object()) {
        throw ValidationError("request body must be a JSON object", "body");
    }
    static const std::set<std::string> allowed{"image",   "image_id", "kind",      "source_phrase", "target_phrase",
                                               "sign",    "alpha",    "use_opt",   "opt_steps",     "session_id",
                                               "seed",    "grid"};
    for (const auto& [key, value] : j.items()) {
        if (!allowed.contains(key) || (key == "grid" && !sweep)) {
            throw ValidationError("unknown field '" + key + "'", key);
        }
    }
    auto get_string = [&](const char* key) -> std::optional<std::string> {
        if (!j.contains(key) || j[key].is_null()) {
            return std::nullopt;
        }
        if (!j[key].is_string()) {
            throw ValidationError(std::string(key) + " must be a string", key);
        }
        return j[key].get<std::string>();
    };
    auto get_number = [&](const char* key) -> std::optional<double> {
        if (!j.contains(key) || j[key].is_null()) {
            return std::nullopt;
        }
        if (!j[key].is_number()) {
            throw ValidationError(std::string(key) + " must be a number", key);
        }
        return j[key].get<double>();
    };
    auto get_integer = [&](const char* key) -> std::optional<std::int64_t> {
        if (!j.contains(key) || j[key].is_null()) {
            return std::nullopt;
        }
        if (!j[key].is_number_integer()) {
            throw ValidationError(std::string(key) + " must be an integer", key);
        }
        return j[key].get<std::int64_t>();
    };

    EditRequest request;
    auto image = get_string("image");
    auto image_id = get_string("image_id");
    if (image.has_value() == image_id.has_value()) {
        throw ValidationError("exactly one of image (base64 PNG) or image_id is required", "image");
    }
    if (image) {
        // Base64 is 4/3 of the payload; reject before decoding obviously huge inputs.
        if (image->size() / 4 * 3 > config_.max_image_bytes + 3) {
            throw PayloadTooLarge(fmt::format("image exceeds {} bytes", config_.max_image_bytes));
        }
        std::vector<std::uint8_t> bytes;
        try {
            bytes = base64_decode(*image);
        } catch (const std::exception&) {
            throw ValidationError("image is not valid base64", "image");
        }
        if (bytes.size() > config_.max_image_bytes) {
            throw PayloadTooLarge(fmt::format("image exceeds {} bytes", config_.max_image_bytes));
        }
        request.image_png.assign(bytes.begin(), bytes.end());
    } else {
        const auto slash = image_id->find('/');
        if (slash == std::string::npos || !valid_split(image_id->substr(0, slash)) ||
            !valid_name(image_id->substr(slash + 1))) {
            throw ValidationError("image_id must look like 'val/val-00001'", "image_id");
        }
        request.image_id = *image_id;
    }

    auto kind_text = get_string("kind");
    if (!kind_text) {
        throw ValidationError("kind is required (change, remove or relative)", "kind");
    }
    auto kind = synth::parse_edit_kind(*kind_text);
    if (!kind) {
        throw ValidationError("kind must be change, remove or relative", "kind");
    }
    request.instruction.kind = *kind;
    request.instruction.source_phrase = get_string("source_phrase").value_or("");
    request.instruction.target_phrase = get_string("target_phrase").value_or("");
    request.instruction.sign = static_cast<int>(get_integer("sign").value_or(0));
    request.instruction.alpha = get_number("alpha").value_or(1.0);
    if (request.instruction.alpha < 0.0) {
        throw ValidationError("alpha must be >= 0", "alpha");
    }
    request.instruction.validate();

    if (j.contains("use_opt")) {
        if (!j["use_opt"].is_boolean()) {
            throw ValidationError("use_opt must be a boolean", "use_opt");
        }
        request.use_opt = j["use_opt"].get<bool>();
    }
    const auto steps = get_integer("opt_steps").value_or(100);
    if (steps < 0 || steps > config_.max_opt_steps) {
        throw ValidationError(fmt::format("opt_steps must be in [0, {}]", config_.max_opt_steps), "opt_steps");
    }
    request.opt_steps = static_cast<int>(steps);
    const auto seed = get_integer("seed").value_or(0);
    if (seed < 0) {
        throw ValidationError("seed must be >= 0", "seed");
    }
    request.seed = static_cast<std::uint64_t>(seed);
    if (auto session = get_string("session_id")) {
        if (!valid_name(*session)) {
            throw ValidationError("session_id must be 1-64 characters of [A-Za-z0-9_-]", "session_id");
        }
        request.session_id = *session;
    }
    if (sweep) {
        if (!j.contains("grid")) {
            request.grid = pipeline::default_alpha_grid();
        } else {
            if (!j["grid"].is_array() || j["grid"].empty()) {
                throw ValidationError("grid must be a non-empty array of numbers", "grid");
            }
            for (const auto& v : j["grid"]) {
                if (!v.is_number() || v.get<double>() < 0.0) {
                    throw ValidationError("grid values must be numbers >= 0", "grid");
                }
                request.grid.push_back(v.get<double>());
            }
        }
    }
    return request;
}

torch::Tensor EditService::load_image(const EditRequest& request) const {
    std::vector<std::uint8_t> bytes;
    if (!request.image_id.empty()) {
        const auto slash = request.image_id.find('/');
        const auto path =
            config_.corpus_root / request.image_id.substr(0, slash) / "images" / (request.image_id.substr(slash + 1) + ".png");
        if (config_.corpus_root.empty() || !fs::exists(path)) {
            throw ImageNotFound("unknown corpus image '" + request.image_id + "'");
        }
        bytes = read_file_bytes(path);
    } else {
        bytes.assign(request.image_png.begin(), request.image_png.end());
    }
    torch::Tensor image;
    try {
        image = decode_png(bytes);
    } catch (const std::exception& e) {
        throw ValidationError(std::string("image is not a readable PNG: ") + e.what(), "image");
    }
    check_image(image, models_->vse.config().canvas);
    return image;
}

void EditService::purge_expired_locked() {
    const auto now = std::chrono::steady_clock::now();
    std::erase_if(sessions_, [&](const auto& entry) { return now - entry.second.last_used > config_.session_ttl; });
}

std::size_t EditService::session_count() {
    std::lock_guard lock(sessions_mutex_);
    purge_expired_locked();
    return sessions_.size();
}

Reply EditService::edit(const std::string& body) { return run(body, false); }

Reply EditService::sweep(const std::string& body) { return run(body, true); }

Reply EditService::run(const std::string& body, bool sweep) {
    const auto started = std::chrono::steady_clock::now();
    if (!models_) {
        return error_reply(503, "model_unavailable", "model not loaded: " + load_error_);
    }
    EditRequest request;
    torch::Tensor image;
    try {
        request = parse_request(body, sweep);
        image = load_image(request);
    } catch (const PayloadTooLarge& e) {
        return error_reply(413, "payload_too_large", e.what(), "image");
    } catch (const ImageNotFound& e) {
        return error_reply(404, "not_found", e.what(), "image_id");
    } catch (const ValidationError& e) {
        return error_reply(400, "invalid_request", e.what(), e.field());
    }

    const auto& instr = request.instruction;
    {
        torch::NoGradGuard no_grad;
        if (models_->vse.encode_phrase(instr.source_phrase).all_oov) {
            return error_reply(422, "unknown_phrase",
                               "source phrase '" + instr.source_phrase + "' contains no known words", "source_phrase");
        }
        if (instr.kind == synth::EditKind::change && models_->vse.encode_phrase(instr.target_phrase).all_oov) {
            return error_reply(422, "unknown_phrase",
                               "target phrase '" + instr.target_phrase + "' contains no known words", "target_phrase");
        }
    }

    const auto png_hash = sha256_hex(request.image_png.data(), request.image_png.size());
    const auto session_key = fmt::format("{}|{}|{}|{}|{}|{}|{}|{}", request.image_id, png_hash, synth::to_string(instr.kind),
                                         instr.source_phrase, instr.target_phrase, instr.sign, request.opt_steps,
                                         request.seed);
    std::optional<sampleopt::PerturbationSet> cached;
    if (request.session_id && request.use_opt) {
        std::lock_guard lock(sessions_mutex_);
        purge_expired_locked();
        auto it = sessions_.find(*request.session_id);
        if (it != sessions_.end() && it->second.key == session_key) {
            it->second.last_used = std::chrono::steady_clock::now();
            cached = it->second.perturbations;
        }
    }

    std::optional<SlotGuard> slot;
    if (request.use_opt && !cached) {
        if (active_optimizations_.fetch_add(1) >= config_.max_concurrent_optimizations) {
            active_optimizations_.fetch_sub(1);
            return error_reply(429, "too_many_optimizations",
                               fmt::format("at most {} optimizations run concurrently; retry later",
                                           config_.max_concurrent_optimizations));
        }
        slot.emplace(&active_optimizations_);
    }

    pipeline::EditOptions options;
    options.use_opt = request.use_opt;
    options.opt.steps = request.opt_steps;
    options.opt.time_limit_seconds = config_.opt_time_limit_seconds;
    options.seed = request.seed;
    const auto* cached_ptr = cached ? &*cached : nullptr;

    json out;
    sampleopt::PerturbationSet used;
    bool optimized = false;
    double optimize_ms = 0.0;
    try {
        if (sweep) {
            auto result = pipeline::sweep_alpha(*models_, image, instr, request.grid, options, cached_ptr);
            json frames = json::array();
            for (const auto& f : result.frames) {
                frames.push_back({{"alpha", f.alpha}, {"image", png_base64(f.image)}});
            }
            out["frames"] = frames;
            out["reconstruction"] = png_base64(result.reconstruction);
            out["grounding"] = grounding_json(result.grounding);
            out["warnings"] = result.warnings;
            if (result.optimized) {
                out["loss_trace"] = result.loss_trace;
            }
            optimized = result.optimized;
            optimize_ms = result.optimize_ms;
            used = std::move(result.perturbations);
        } else {
            auto result = pipeline::edit(*models_, image, instr, options, cached_ptr);
            out["image_out"] = png_base64(result.image_out);
            out["reconstruction"] = png_base64(result.reconstruction);
            out["grounding"] = grounding_json(result.grounding);
            out["warnings"] = result.warnings;
            if (result.optimized) {
                out["loss_trace"] = result.loss_trace;
            }
            optimized = result.optimized;
            optimize_ms = result.optimize_ms;
            used = std::move(result.perturbations);
        }
    } catch (const ValidationError& e) {
        return error_reply(400, "invalid_request", e.what(), e.field());
    } catch (const std::exception& e) {
        log::error("edit failed: {}", e.what());
        return error_reply(500, "internal_error", e.what());
    }
    if (optimized) {
        optimization_runs_.fetch_add(1);
    }
    if (request.session_id && optimized) {
        std::lock_guard lock(sessions_mutex_);
        purge_expired_locked();
        sessions_[*request.session_id] = Session{session_key, std::move(used), std::chrono::steady_clock::now()};
    }
    out["optimized"] = optimized;
    out["session_reused"] = cached.has_value();
    out["timing_ms"] = {{"total", elapsed_ms(started)}, {"optimize", optimize_ms}};
    return {200, out};
}

Reply EditService::corpus_image(const std::string& split, const std::string& id) const {
    if (!valid_split(split) || !valid_name(id) || config_.corpus_root.empty()) {
        return error_reply(404, "not_found", "unknown corpus image '" + split + "/" + id + "'");
    }
    const auto path = config_.corpus_root / split / "images" / (id + ".png");
    if (!fs::exists(path)) {
        return error_reply(404, "not_found", "unknown corpus image '" + split + "/" + id + "'");
    }
    auto bytes = read_file_bytes(path);
    Reply reply;
    reply.binary.assign(bytes.begin(), bytes.end());
    reply.content_type = "image/png";
    return reply;
}

Reply EditService::corpus_index(const std::string& split) const {
    const auto path = config_.corpus_root / split / "meta.jsonl";
    if (!valid_split(split) || config_.corpus_root.empty() || !fs::exists(path)) {
        return error_reply(404, "not_found", "unknown corpus split '" + split + "'");
    }
    std::ifstream in(path);
    json items = json::array();
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) {
            continue;
        }
        auto record = json::parse(line);
        items.push_back({{"id", record.at("id")}, {"caption", record.at("caption")}});
    }
    return {200, {{"split", split}, {"items", items}}};
}

namespace {

void send(httplib::Response& res, const Reply& reply) {
    res.status = reply.status;
    if (reply.content_type == "application/json") {
        res.set_content(reply.body.dump(), "application/json");
    } else {
        res.set_content(reply.binary, reply.content_type);
    }
}

}  // namespace

void EditService::listen() {
    if (start() <= 0) {
        throw IoError(fmt::format("cannot bind {}:{}", config_.host, config_.port));
    }
    thread_.join();
}

int EditService::start() {
    if (server_) {
        return bound_port_;
    }
    server_ = std::make_unique<httplib::Server>();
    auto& server = *server_;
    const int workers = std::max(1, config_.worker_threads);
    server.new_task_queue = [workers] { return new httplib::ThreadPool(static_cast<size_t>(workers)); };
    // Base64 inflates images by 4/3; the JSON envelope adds a little more.
    server.set_payload_max_length(config_.max_image_bytes * 2 + 64 * 1024);
    server.set_default_headers({{"Access-Control-Allow-Origin", "*"}});
    server.Options(R"(/v1/.*)", [](const httplib::Request&, httplib::Response& res) {
        res.set_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS");
        res.set_header("Access-Control-Allow-Headers", "Content-Type");
        res.status = 204;
    });
    server.Get("/v1/health", [this](const httplib::Request&, httplib::Response& res) { send(res, health()); });
    server.Post("/v1/edit", [this](const httplib::Request& req, httplib::Response& res) { send(res, edit(req.body)); });
    server.Post("/v1/sweep",
                [this](const httplib::Request& req, httplib::Response& res) { send(res, sweep(req.body)); });
    server.Get(R"(/v1/corpus/([^/]+))", [this](const httplib::Request& req, httplib::Response& res) {
        send(res, corpus_index(req.matches[1]));
    });
    server.Get(R"(/v1/corpus/([^/]+)/([^/]+))", [this](const httplib::Request& req, httplib::Response& res) {
        send(res, corpus_image(req.matches[1], req.matches[2]));
    });
    server.set_error_handler([](const httplib::Request&, httplib::Response& res) {
        if (!res.body.empty()) {
            return;
        }
        std::string code = "error";
        if (res.status == 404) {
            code = "not_found";
        } else if (res.status == 413) {
            code = "payload_too_large";
        } else if (res.status == 400) {
            code = "invalid_request";
        }
        res.set_content(error_body(code, httplib::status_message(res.status)).dump(), "application/json");
    });
    server.set_exception_handler([](const httplib::Request&, httplib::Response& res, std::exception_ptr ep) {
        std::string message = "unknown error";
        try {
            std::rethrow_exception(ep);
        } catch (const std::exception& e) {
            message = e.what();
        } catch (...) {
        }
        res.status = 500;
        res.set_content(error_body("internal_error", message).dump(), "application/json");
    });

    if (config_.port == 0) {
        bound_port_ = server.bind_to_any_port(config_.host);
    } else {
        bound_port_ = server.bind_to_port(config_.host, config_.port) ? config_.port : -1;
    }
    if (bound_port_ <= 0) {
        server_.reset();
        return -1;
    }
    thread_ = std::thread([this] { server_->listen_after_bind(); });
    server.wait_until_ready();
    log::info("serving on http://{}:{}", config_.host, bound_port_);
    return bound_port_;
}

void EditService::stop() {
    if (server_) {
        server_->stop();
    }
    if (thread_.joinable()) {
        thread_.join();
    }
    server_.reset();
}

}  // namespace openedit::service
