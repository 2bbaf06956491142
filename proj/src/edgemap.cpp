// Copyright (C) 2026 The Open-Edit Authors
// SPDX-License-Identifier: Apache-2.0

#include "openedit/edgemap.hpp"

#include "openedit/common.hpp"

namespace openedit::edges {

namespace F = torch::nn::functional;

torch::Tensor GradientEdgeDetector::extract_batch(const torch::Tensor& images) const {
    if (!images.defined() || images.dim() != 4 || images.size(1) != 3) {
        throw ValidationError("edge detector expects [N,3,H,W] images", "image");
    }
    if (images.size(2) < 2 || images.size(3) < 2) {
        throw ValidationError("edge detector needs at least 2x2 pixels", "image");
    }
    auto opts = images.options();
    auto luma_weights = torch::tensor({0.299, 0.587, 0.114}, opts).view({1, 3, 1, 1});
    auto gray = (images * luma_weights).sum(1, /*keepdim=*/true);

    auto kx = torch::tensor({-1.0, 0.0, 1.0, -2.0, 0.0, 2.0, -1.0, 0.0, 1.0}, opts).view({1, 1, 3, 3}) / 4.0;
    auto ky = kx.transpose(2, 3).contiguous();
    auto options = F::PadFuncOptions({1, 1, 1, 1});
    if (padding_ == Padding::reflect) {
        options.mode(torch::kReflect);
    } else {
        options.mode(torch::kCircular);
    }
    auto padded = F::pad(gray, options);
    auto gx = F::conv2d(padded, kx);
    auto gy = F::conv2d(padded, ky);
    return (torch::sqrt(gx * gx + gy * gy) * kGain).clamp(0.0, 1.0);
}

EdgeMap GradientEdgeDetector::extract(const torch::Tensor& image) const {
    if (!image.defined() || image.dim() != 3 || image.size(0) != 3) {
        throw ValidationError("edge detector expects a [3,H,W] image", "image");
    }
    return {extract_batch(image.unsqueeze(0)).squeeze(0).squeeze(0)};
}

EdgeMap extract_edges(const torch::Tensor& image) { return GradientEdgeDetector().extract(image); }

torch::Tensor extract_edges_batch(const torch::Tensor& images) {
    return GradientEdgeDetector().extract_batch(images);
}

}  // namespace openedit::edges
