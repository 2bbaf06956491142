// Copyright (C) 2026 The Open-Edit Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

namespace openedit::synth {

enum class ShapeKind { circle, square, triangle };
enum class Color { red, green, blue, yellow, purple, orange };
enum class Background { white, light_gray, dark_gray };

inline constexpr std::array kAllShapes{ShapeKind::circle, ShapeKind::square, ShapeKind::triangle};
inline constexpr std::array kAllColors{Color::red,    Color::green,  Color::blue,
                                       Color::yellow, Color::purple, Color::orange};
inline constexpr std::array kAllBackgrounds{Background::white, Background::light_gray,
                                            Background::dark_gray};

std::string_view to_string(ShapeKind kind);
std::string_view to_string(Color color);
std::string_view to_string(Background background);
std::optional<ShapeKind> parse_shape(std::string_view word);
std::optional<Color> parse_color(std::string_view word);
std::optional<Background> parse_background(std::string_view word);

std::array<float, 3> rgb(Color color);
std::array<float, 3> rgb(Background background);
// Hue of the palette color in degrees.
double hue_degrees(Color color);

/// One shape, positioned in fractional canvas coordinates. `size` is the
/// circumradius as a fraction of the canvas side.
struct ShapeSpec {
    ShapeKind kind = ShapeKind::circle;
    Color color = Color::red;
    double cx = 0.5;
    double cy = 0.5;
    double size = 0.15;
};

struct BoundingBox {
    int x0 = 0, y0 = 0, x1 = 0, y1 = 0;  // half-open pixel box [x0,x1) x [y0,y1)
};

struct SceneSpec {
    int canvas_size = 64;
    Background background = Background::white;
    std::vector<ShapeSpec> shapes;
    std::uint64_t rng_seed = 0;
};

struct SceneRecord {
    std::string id;
    torch::Tensor image;               // [3,H,W] float in [0,1]
    std::vector<std::string> caption;  // tokens
    std::vector<torch::Tensor> masks;  // one [H,W] bool per shape
    SceneSpec spec;

    std::string caption_text() const;
};

enum class EditKind { change, remove, relative };
std::string_view to_string(EditKind kind);
std::optional<EditKind> parse_edit_kind(std::string_view word);

struct EditCase {
    std::size_t scene_index = 0;  // index into the corpus split the case was derived from
    std::string scene_id;
    std::string source_phrase;
    std::string target_phrase;  // empty for remove / relative
    int sign = 0;               // +1/-1 for relative, 0 otherwise
    EditKind kind = EditKind::change;
    torch::Tensor gt_mask;      // [H,W] bool
};

// Checks every SceneSpec invariant; throws ValidationError naming the
// violated constraint.
void validate(const SceneSpec& spec);

// Fractional bounding box of a shape (x0, y0, x1, y1).
std::array<double, 4> fractional_bounds(const ShapeSpec& shape);
BoundingBox pixel_bounds(const ShapeSpec& shape, int canvas_size);

// Signed distance in pixels from the pixel-space point to the shape
// boundary (negative inside).
double signed_distance(const ShapeSpec& shape, int canvas_size, double px, double py);

// Draws a random valid spec from `seed`.
SceneSpec sample_spec(std::uint64_t seed, int canvas_size = 64);

// Renders a spec. Pure function of the spec.
SceneRecord generate_scene(const SceneSpec& spec);

std::vector<std::string> make_caption(const std::vector<ShapeSpec>& shapes);
std::vector<std::string> tokenize(std::string_view text);
std::string join_tokens(const std::vector<std::string>& tokens);

struct ParsedShape {
    Color color;
    ShapeKind kind;
    bool operator==(const ParsedShape&) const = default;
};
// Parses "a {color} {shape} [and a {color} {shape}]"; throws ValidationError.
std::vector<ParsedShape> parse_caption(const std::vector<std::string>& tokens);
// Parses "{color} {shape}".
std::optional<ParsedShape> parse_phrase(std::string_view phrase);
std::string phrase(Color color, ShapeKind kind);

// Row-major run-length encoding; runs alternate 0/1 starting with a
// (possibly empty) run of zeros.
std::vector<std::int64_t> encode_rle(const torch::Tensor& mask);
torch::Tensor decode_rle(const std::vector<std::int64_t>& counts, int height, int width);

struct DatasetConfig {
    std::filesystem::path root;
    int train = 1024;
    int val = 128;
    int test = 128;
    int canvas_size = 64;
    std::uint64_t base_seed = 0;
};

struct SplitSeeds {
    std::string split;
    std::vector<std::uint64_t> seeds;
};

std::vector<SplitSeeds> split_seeds(const DatasetConfig& config);

// Writes images + meta.jsonl for train/val/test. Throws IoError with the
// offending path, ValidationError on duplicate seeds.
void generate_dataset(const DatasetConfig& config);

nlohmann::json to_json(const SceneRecord& record);
SceneRecord from_json(const nlohmann::json& record, const torch::Tensor& image);

// Loads a split written by generate_dataset.
std::vector<SceneRecord> load_split(const std::filesystem::path& root, const std::string& split);

std::vector<EditCase> derive_edit_cases(const std::vector<SceneRecord>& corpus,
                                        const std::vector<EditKind>& kinds);

}  // namespace openedit::synth
