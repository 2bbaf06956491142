// Copyright (C) 2026 The Open-Edit Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <memory>

#include <torch/torch.h>

namespace openedit::edges {

/// Edge strength in [0,1], same spatial size as the source image: [H, W].
struct EdgeMap {
    torch::Tensor values;
};

enum class Padding { reflect, circular };

/// Anything that turns an image into an EdgeMap. The decoder only sees this
/// interface, so a learned detector can replace the gradient one.
class EdgeDetector {
public:
    virtual ~EdgeDetector() = default;
    virtual EdgeMap extract(const torch::Tensor& image) const = 0;
};

/// Luma conversion, 3x3 smoothed central-difference kernels (Sobel / 4),
/// gradient magnitude, fixed gain, clamp to [0,1].
class GradientEdgeDetector final : public EdgeDetector {
public:
    static constexpr double kGain = 2.0;

    explicit GradientEdgeDetector(Padding padding = Padding::reflect) : padding_(padding) {}

    EdgeMap extract(const torch::Tensor& image) const override;
    // Batched: [N,3,H,W] -> [N,1,H,W].
    torch::Tensor extract_batch(const torch::Tensor& images) const;

private:
    Padding padding_;
};

// Convenience wrapper around GradientEdgeDetector with reflection padding.
EdgeMap extract_edges(const torch::Tensor& image);
torch::Tensor extract_edges_batch(const torch::Tensor& images);

}  // namespace openedit::edges
