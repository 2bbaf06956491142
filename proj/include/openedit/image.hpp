// Copyright (C) 2026 The Open-Edit Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <torch/torch.h>

namespace openedit {

/// RGB image stored channel-first as a float32 tensor of shape [3, H, W]
/// with values in [0, 1].
struct Image {
    torch::Tensor pixels;

    int height() const { return static_cast<int>(pixels.size(1)); }
    int width() const { return static_cast<int>(pixels.size(2)); }
};

// Validates shape [3,H,W] and (optionally) an exact square size.
void check_image(const torch::Tensor& pixels, int expected_size = -1);

// Quantizes to 8 bits (round-to-nearest) and back.
torch::Tensor quantize_u8(const torch::Tensor& pixels);

std::vector<std::uint8_t> encode_png(const torch::Tensor& pixels);
torch::Tensor decode_png(std::span<const std::uint8_t> bytes);

void write_png(const std::filesystem::path& path, const torch::Tensor& pixels);
torch::Tensor read_png(const std::filesystem::path& path);

// Writes a single-channel [H,W] map in [0,1] as a grayscale-looking RGB PNG.
void write_gray_png(const std::filesystem::path& path, const torch::Tensor& values);

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path);
void write_file_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);

std::string base64_encode(std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> base64_decode(const std::string& text);

/// Hue statistics over a pixel subset.
struct HueStats {
    double hue_degrees = 0.0;  // chroma-weighted circular mean hue
    double mean_chroma = 0.0;
    bool defined = false;      // false if the region is achromatic or empty
};

// `mask` is a bool/uint8 [H,W] tensor selecting pixels.
HueStats masked_hue(const torch::Tensor& pixels, const torch::Tensor& mask);

// Per-pixel hue in degrees and chroma (max - min) for a [3,H,W] image.
std::pair<torch::Tensor, torch::Tensor> hue_and_chroma(const torch::Tensor& pixels);

double circular_hue_distance(double a_degrees, double b_degrees);

}  // namespace openedit
