// Copyright (C) 2026 The Open-Edit Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>
#include <utility>

#include <torch/torch.h>

namespace openedit {

/// Raised when caller-supplied data violates a documented contract.
/// `field` names the offending input when there is one (used by the
/// service error envelope and CLI usage messages).
class ValidationError : public std::invalid_argument {
public:
    explicit ValidationError(const std::string& message, std::string field = {})
        : std::invalid_argument(message), field_(std::move(field)) {}

    const std::string& field() const noexcept { return field_; }

private:
    std::string field_;
};

/// A training or optimization loss became non-finite.
class DivergenceError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// File or archive could not be read or written.
class IoError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Throws DivergenceError when `value` holds a NaN or infinity.
void require_finite(const torch::Tensor& value, const std::string& what);

// Single-threaded, deterministic torch configuration used by every entrypoint.
void configure_torch_runtime();

// SHA-256 hex digest of the bytes.
std::string sha256_hex(const void* data, std::size_t size);

}  // namespace openedit
