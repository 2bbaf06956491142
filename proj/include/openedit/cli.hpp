// Copyright (C) 2026 The Open-Edit Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <filesystem>
#include <string>
#include <vector>

namespace openedit::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitRuntime = 2;

/// Default artifact locations under $OPEN_EDIT_HOME (or the working
/// directory when unset).
struct Layout {
    std::filesystem::path home;

    static Layout from_environment();
    std::filesystem::path corpus() const { return home / "corpus"; }
    std::filesystem::path run(const std::string& name) const { return home / "runs" / name; }
    std::filesystem::path vse_checkpoint() const { return run("vse") / "ckpt-best.bin"; }
    std::filesystem::path decoder_checkpoint(bool edges = true) const {
        return run(edges ? "decoder-edge" : "decoder-no-edge") / "ckpt-best.bin";
    }
};

// Parses argv (argv[0] is the program name), runs the subcommand and returns
// the process exit code. Logs go to stderr; results to stdout.
int run(int argc, const char* const* argv);
int run(const std::vector<std::string>& args);

}  // namespace openedit::cli
