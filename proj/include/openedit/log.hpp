// Copyright (C) 2026 The Open-Edit Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdio>
#include <string_view>

#include <fmt/format.h>

namespace openedit::log {

enum class Level { debug = 0, info = 1, warn = 2, error = 3, off = 4 };

// Messages below the threshold are dropped. Defaults to info; the
// OPEN_EDIT_LOG environment variable (debug|info|warn|error|off) overrides.
Level threshold();
void set_threshold(Level level);

void write(Level level, std::string_view message);

template <typename... Args>
void info(fmt::format_string<Args...> format, Args&&... args) {
    if (threshold() <= Level::info) {
        write(Level::info, fmt::format(format, std::forward<Args>(args)...));
    }
}

template <typename... Args>
void warn(fmt::format_string<Args...> format, Args&&... args) {
    if (threshold() <= Level::warn) {
        write(Level::warn, fmt::format(format, std::forward<Args>(args)...));
    }
}

template <typename... Args>
void error(fmt::format_string<Args...> format, Args&&... args) {
    if (threshold() <= Level::error) {
        write(Level::error, fmt::format(format, std::forward<Args>(args)...));
    }
}

}  // namespace openedit::log
