// Copyright (C) 2026 The Open-Edit Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

namespace openedit {

/// Versioned single-file checkpoint: magic, format version, a JSON header
/// (free-form `meta` plus the tensor index) and raw little-endian float32
/// payloads in index order.
struct Archive {
    static constexpr std::uint32_t kFormatVersion = 1;

    nlohmann::json meta = nlohmann::json::object();
    std::vector<std::pair<std::string, torch::Tensor>> tensors;

    const torch::Tensor& at(const std::string& name) const;
};

void save_archive(const std::filesystem::path& path, const Archive& archive);
Archive load_archive(const std::filesystem::path& path);

// Parameters followed by buffers, with dotted module paths as names.
std::vector<std::pair<std::string, torch::Tensor>> named_state(const torch::nn::Module& module);

// Copies `archive` tensors into the module; names and shapes must match
// exactly (a prefix filters archive names, e.g. "generator.").
void load_state(torch::nn::Module& module, const Archive& archive, const std::string& prefix = {});

// SHA-256 over every named parameter and buffer (names, shapes, bytes).
std::string state_hash(const torch::nn::Module& module);

}  // namespace openedit
