// Copyright (C) 2026 The Open-Edit Authors
// SPDX-License-Identifier: Apache-2.0

#include "openedit/image.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>

#include <boost/beast/core/detail/base64.hpp>
#include <png.h>

#include "openedit/common.hpp"

namespace openedit {

void check_image(const torch::Tensor& pixels, int expected_size) {
    if (!pixels.defined() || pixels.dim() != 3 || pixels.size(0) != 3) {
        throw ValidationError("image must be a [3,H,W] tensor", "image");
    }
    if (expected_size > 0 && (pixels.size(1) != expected_size || pixels.size(2) != expected_size)) {
        throw ValidationError("image must be " + std::to_string(expected_size) + "x" +
                                  std::to_string(expected_size) + ", got " +
                                  std::to_string(pixels.size(1)) + "x" + std::to_string(pixels.size(2)),
                              "image");
    }
}

torch::Tensor quantize_u8(const torch::Tensor& pixels) {
    return (pixels.clamp(0.0, 1.0) * 255.0).round() / 255.0;
}

namespace {

struct PngWriteBuffer {
    std::vector<std::uint8_t>* out;
};

void png_write_to_vector(png_structp png, png_bytep data, png_size_t length) {
    auto* buffer = static_cast<PngWriteBuffer*>(png_get_io_ptr(png));
    buffer->out->insert(buffer->out->end(), data, data + length);
}

void png_flush_noop(png_structp) {}

struct PngReadBuffer {
    std::span<const std::uint8_t> bytes;
    std::size_t offset = 0;
};

void png_read_from_span(png_structp png, png_bytep data, png_size_t length) {
    auto* buffer = static_cast<PngReadBuffer*>(png_get_io_ptr(png));
    if (buffer->offset + length > buffer->bytes.size()) {
        png_error(png, "truncated PNG stream");
    }
    std::memcpy(data, buffer->bytes.data() + buffer->offset, length);
    buffer->offset += length;
}

[[noreturn]] void png_throw(png_structp, png_const_charp message) {
    throw IoError(std::string("png: ") + message);
}

void png_warn(png_structp, png_const_charp) {}

}  // namespace

std::vector<std::uint8_t> encode_png(const torch::Tensor& pixels) {
    check_image(pixels);
    const int height = static_cast<int>(pixels.size(1));
    const int width = static_cast<int>(pixels.size(2));
    auto bytes = (pixels.detach().to(torch::kFloat32).clamp(0.0, 1.0) * 255.0)
                     .round()
                     .to(torch::kUInt8)
                     .permute({1, 2, 0})
                     .contiguous();

    std::vector<std::uint8_t> out;
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, png_throw, png_warn);
    png_infop info = png_create_info_struct(png);
    try {
        PngWriteBuffer buffer{&out};
        png_set_write_fn(png, &buffer, png_write_to_vector, png_flush_noop);
        png_set_compression_level(png, 6);
        png_set_IHDR(png, info, width, height, 8, PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
                     PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
        png_write_info(png, info);
        const auto* base = bytes.data_ptr<std::uint8_t>();
        for (int y = 0; y < height; ++y) {
            png_write_row(png, const_cast<png_bytep>(base + static_cast<std::size_t>(y) * width * 3));
        }
        png_write_end(png, nullptr);
    } catch (...) {
        png_destroy_write_struct(&png, &info);
        throw;
    }
    png_destroy_write_struct(&png, &info);
    return out;
}

torch::Tensor decode_png(std::span<const std::uint8_t> bytes) {
    if (bytes.size() < 8 || png_sig_cmp(bytes.data(), 0, 8) != 0) {
        throw ValidationError("data is not a PNG image", "image");
    }
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, png_throw, png_warn);
    png_infop info = png_create_info_struct(png);
    torch::Tensor result;
    try {
        PngReadBuffer buffer{bytes, 0};
        png_set_read_fn(png, &buffer, png_read_from_span);
        png_read_info(png, info);
        png_set_strip_16(png);
        png_set_palette_to_rgb(png);
        png_set_expand_gray_1_2_4_to_8(png);
        png_set_gray_to_rgb(png);
        png_set_strip_alpha(png);
        png_read_update_info(png, info);
        const int width = static_cast<int>(png_get_image_width(png, info));
        const int height = static_cast<int>(png_get_image_height(png, info));
        if (png_get_rowbytes(png, info) != static_cast<std::size_t>(width) * 3) {
            throw IoError("png: unsupported pixel layout");
        }
        auto hwc = torch::empty({height, width, 3}, torch::kUInt8);
        auto* base = hwc.data_ptr<std::uint8_t>();
        for (int y = 0; y < height; ++y) {
            png_read_row(png, base + static_cast<std::size_t>(y) * width * 3, nullptr);
        }
        png_read_end(png, nullptr);
        result = hwc.permute({2, 0, 1}).to(torch::kFloat32).div(255.0).contiguous();
    } catch (...) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw;
    }
    png_destroy_read_struct(&png, &info, nullptr);
    return result;
}

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("cannot open " + path.string());
    }
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
    if (path.has_parent_path()) {
        std::filesystem::create_directories(path.parent_path());
    }
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw IoError("cannot write " + path.string());
    }
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) {
        throw IoError("short write to " + path.string());
    }
}

void write_png(const std::filesystem::path& path, const torch::Tensor& pixels) {
    write_file_bytes(path, encode_png(pixels));
}

torch::Tensor read_png(const std::filesystem::path& path) {
    return decode_png(read_file_bytes(path));
}

void write_gray_png(const std::filesystem::path& path, const torch::Tensor& values) {
    write_png(path, values.detach().unsqueeze(0).expand({3, values.size(0), values.size(1)}));
}

std::string base64_encode(std::span<const std::uint8_t> bytes) {
    namespace b64 = boost::beast::detail::base64;
    std::string out(b64::encoded_size(bytes.size()), '\0');
    out.resize(b64::encode(out.data(), bytes.data(), bytes.size()));
    return out;
}

std::vector<std::uint8_t> base64_decode(const std::string& text) {
    namespace b64 = boost::beast::detail::base64;
    // The decoder stops at '=', so padding is checked and stripped here.
    if (text.size() % 4 != 0) {
        throw ValidationError("invalid base64 payload", "image");
    }
    std::size_t size = text.size();
    for (int i = 0; i < 2 && size > 0 && text[size - 1] == '='; ++i) {
        --size;
    }
    std::vector<std::uint8_t> out(b64::decoded_size(text.size()));
    auto [written, read] = b64::decode(out.data(), text.data(), size);
    if (read != size) {
        throw ValidationError("invalid base64 payload", "image");
    }
    out.resize(written);
    return out;
}

std::pair<torch::Tensor, torch::Tensor> hue_and_chroma(const torch::Tensor& pixels) {
    auto p = pixels.to(torch::kFloat64);
    auto r = p[0], g = p[1], b = p[2];
    auto maxc = torch::max(torch::max(r, g), b);
    auto minc = torch::min(torch::min(r, g), b);
    auto chroma = maxc - minc;
    auto safe = torch::where(chroma > 0, chroma, torch::ones_like(chroma));
    auto hr = torch::fmod((g - b) / safe + 6.0, 6.0);
    auto hg = (b - r) / safe + 2.0;
    auto hb = (r - g) / safe + 4.0;
    auto hue = torch::where(maxc == r, hr, torch::where(maxc == g, hg, hb)) * 60.0;
    hue = torch::where(chroma > 0, hue, torch::zeros_like(hue));
    return {hue, chroma};
}

HueStats masked_hue(const torch::Tensor& pixels, const torch::Tensor& mask) {
    auto [hue, chroma] = hue_and_chroma(pixels);
    auto weights = chroma * mask.to(torch::kFloat64);
    const double total = weights.sum().item<double>();
    const double count = mask.to(torch::kFloat64).sum().item<double>();
    HueStats stats;
    if (count <= 0.0) {
        return stats;
    }
    stats.mean_chroma = total / count;
    if (total <= 1e-9 || stats.mean_chroma < 0.02) {
        return stats;
    }
    auto radians = hue * (std::numbers::pi / 180.0);
    const double c = (weights * torch::cos(radians)).sum().item<double>();
    const double s = (weights * torch::sin(radians)).sum().item<double>();
    double degrees = std::atan2(s, c) * 180.0 / std::numbers::pi;
    if (degrees < 0.0) {
        degrees += 360.0;
    }
    stats.hue_degrees = degrees;
    stats.defined = true;
    return stats;
}

double circular_hue_distance(double a_degrees, double b_degrees) {
    double d = std::fmod(std::abs(a_degrees - b_degrees), 360.0);
    return d > 180.0 ? 360.0 - d : d;
}

}  // namespace openedit
