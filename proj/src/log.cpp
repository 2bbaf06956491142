// Copyright (C) 2026 The Open-Edit Authors
// SPDX-License-Identifier: Apache-2.0

#include "openedit/log.hpp"

#include <atomic>
#include <chrono>
#include <cstdlib>
#include <mutex>
#include <string>

namespace openedit::log {
namespace {

Level from_env() {
    const char* value = std::getenv("OPEN_EDIT_LOG");
    if (value == nullptr) {
        return Level::info;
    }
    const std::string v = value;
    if (v == "debug") return Level::debug;
    if (v == "warn") return Level::warn;
    if (v == "error") return Level::error;
    if (v == "off") return Level::off;
    return Level::info;
}

std::atomic<Level>& current() {
    static std::atomic<Level> level{from_env()};
    return level;
}

constexpr std::string_view kNames[] = {"debug", "info", "warn", "error"};

}  // namespace

Level threshold() { return current().load(std::memory_order_relaxed); }

void set_threshold(Level level) { current().store(level, std::memory_order_relaxed); }

void write(Level level, std::string_view message) {
    static std::mutex mutex;
    const auto now = std::chrono::system_clock::now();
    const auto ms = std::chrono::duration_cast<std::chrono::milliseconds>(now.time_since_epoch()).count();
    std::lock_guard lock(mutex);
    fmt::print(stderr, "[{}.{:03d}] [{}] {}\n", ms / 1000, ms % 1000, kNames[static_cast<int>(level)], message);
    std::fflush(stderr);
}

}  // namespace openedit::log
