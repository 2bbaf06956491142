// Copyright (C) 2026 The Open-Edit Authors
// SPDX-License-Identifier: Apache-2.0

#include "openedit/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>
#include <set>
#include <sstream>

#include <fmt/format.h>

#include "openedit/common.hpp"
#include "openedit/image.hpp"

namespace openedit::synth {

namespace {

constexpr double kSqrt3 = 1.7320508075688772;
constexpr double kSquareHalfSide = 0.8;  // square half-side relative to circumradius

template <typename Enum, std::size_t N>
std::optional<Enum> parse_enum(std::string_view word, const std::array<Enum, N>& values) {
    for (auto value : values) {
        if (to_string(value) == word) {
            return value;
        }
    }
    return std::nullopt;
}

}  // namespace

std::string_view to_string(ShapeKind kind) {
    switch (kind) {
        case ShapeKind::circle: return "circle";
        case ShapeKind::square: return "square";
        case ShapeKind::triangle: return "triangle";
    }
    return "?";
}

std::string_view to_string(Color color) {
    switch (color) {
        case Color::red: return "red";
        case Color::green: return "green";
        case Color::blue: return "blue";
        case Color::yellow: return "yellow";
        case Color::purple: return "purple";
        case Color::orange: return "orange";
    }
    return "?";
}

std::string_view to_string(Background background) {
    switch (background) {
        case Background::white: return "white";
        case Background::light_gray: return "light-gray";
        case Background::dark_gray: return "dark-gray";
    }
    return "?";
}

std::string_view to_string(EditKind kind) {
    switch (kind) {
        case EditKind::change: return "change";
        case EditKind::remove: return "remove";
        case EditKind::relative: return "relative";
    }
    return "?";
}

std::optional<ShapeKind> parse_shape(std::string_view word) { return parse_enum(word, kAllShapes); }
std::optional<Color> parse_color(std::string_view word) { return parse_enum(word, kAllColors); }
std::optional<Background> parse_background(std::string_view word) {
    return parse_enum(word, kAllBackgrounds);
}
std::optional<EditKind> parse_edit_kind(std::string_view word) {
    return parse_enum(word, std::array{EditKind::change, EditKind::remove, EditKind::relative});
}

std::array<float, 3> rgb(Color color) {
    switch (color) {
        case Color::red: return {0.90f, 0.10f, 0.10f};
        case Color::green: return {0.10f, 0.70f, 0.15f};
        case Color::blue: return {0.10f, 0.25f, 0.90f};
        case Color::yellow: return {0.90f, 0.90f, 0.10f};
        case Color::purple: return {0.60f, 0.10f, 0.80f};
        case Color::orange: return {0.95f, 0.50f, 0.05f};
    }
    return {0.f, 0.f, 0.f};
}

std::array<float, 3> rgb(Background background) {
    switch (background) {
        case Background::white: return {1.0f, 1.0f, 1.0f};
        case Background::light_gray: return {0.78f, 0.78f, 0.78f};
        case Background::dark_gray: return {0.25f, 0.25f, 0.25f};
    }
    return {0.f, 0.f, 0.f};
}

double hue_degrees(Color color) {
    const auto c = rgb(color);
    auto pixel = torch::tensor({c[0], c[1], c[2]}).view({3, 1, 1});
    return masked_hue(pixel, torch::ones({1, 1}, torch::kBool)).hue_degrees;
}

std::string SceneRecord::caption_text() const { return join_tokens(caption); }

std::array<double, 4> fractional_bounds(const ShapeSpec& shape) {
    const double r = shape.size;
    switch (shape.kind) {
        case ShapeKind::circle: return {shape.cx - r, shape.cy - r, shape.cx + r, shape.cy + r};
        case ShapeKind::square: {
            const double h = r * kSquareHalfSide;
            return {shape.cx - h, shape.cy - h, shape.cx + h, shape.cy + h};
        }
        case ShapeKind::triangle: {
            const double hw = r * kSqrt3 / 2.0;
            return {shape.cx - hw, shape.cy - r, shape.cx + hw, shape.cy + r / 2.0};
        }
    }
    return {0, 0, 0, 0};
}

BoundingBox pixel_bounds(const ShapeSpec& shape, int canvas_size) {
    // Anti-aliasing reaches half a pixel past the analytic boundary.
    const auto f = fractional_bounds(shape);
    const double n = canvas_size;
    auto clampi = [&](double v) { return std::clamp(static_cast<int>(v), 0, canvas_size); };
    return {clampi(std::floor(f[0] * n - 0.5)), clampi(std::floor(f[1] * n - 0.5)),
            clampi(std::ceil(f[2] * n + 0.5)), clampi(std::ceil(f[3] * n + 0.5))};
}

double signed_distance(const ShapeSpec& shape, int canvas_size, double px, double py) {
    const double n = canvas_size;
    const double dx = px - shape.cx * n;
    const double dy = py - shape.cy * n;
    const double r = shape.size * n;
    switch (shape.kind) {
        case ShapeKind::circle: return std::hypot(dx, dy) - r;
        case ShapeKind::square: return std::max(std::abs(dx), std::abs(dy)) - r * kSquareHalfSide;
        case ShapeKind::triangle: {
            // Apex up; inradius r/2; outward edge normals at 90, 210, 330 degrees.
            const double bottom = dy;
            const double left = -kSqrt3 / 2.0 * dx - 0.5 * dy;
            const double right = kSqrt3 / 2.0 * dx - 0.5 * dy;
            return std::max({bottom, left, right}) - r / 2.0;
        }
    }
    return 0.0;
}

void validate(const SceneSpec& spec) {
    if (spec.canvas_size < 8) {
        throw ValidationError("canvas_size must be at least 8", "canvas_size");
    }
    if (spec.shapes.empty() || spec.shapes.size() > 2) {
        throw ValidationError(
            fmt::format("shape_count must be in [1,2], got {}", spec.shapes.size()), "shape_count");
    }
    for (std::size_t i = 0; i < spec.shapes.size(); ++i) {
        const auto& s = spec.shapes[i];
        if (!(s.size > 0.0) || !std::isfinite(s.cx) || !std::isfinite(s.cy)) {
            throw ValidationError(fmt::format("shape {} has a non-positive size or bad position", i),
                                  "shapes");
        }
        if (s.size * spec.canvas_size < 2.0) {
            throw ValidationError(fmt::format("shape {} is smaller than 2 pixels", i), "shapes");
        }
        const auto b = fractional_bounds(s);
        if (b[0] < 0.0 || b[1] < 0.0 || b[2] > 1.0 || b[3] > 1.0) {
            throw ValidationError(fmt::format("shape {} does not lie fully inside the canvas", i),
                                  "shapes");
        }
    }
    if (spec.shapes.size() == 2) {
        const auto& a = spec.shapes[0];
        const auto& b = spec.shapes[1];
        if (a.kind == b.kind && a.color == b.color) {
            throw ValidationError("the two shapes share both kind and color", "shapes");
        }
        const auto ba = pixel_bounds(a, spec.canvas_size);
        const auto bb = pixel_bounds(b, spec.canvas_size);
        const bool disjoint = ba.x1 <= bb.x0 || bb.x1 <= ba.x0 || ba.y1 <= bb.y0 || bb.y1 <= ba.y0;
        if (!disjoint) {
            throw ValidationError(
                fmt::format("shape bounding boxes overlap on a {}px canvas", spec.canvas_size),
                "shapes");
        }
    }
}

SceneSpec sample_spec(std::uint64_t seed, int canvas_size) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    auto pick = [&](auto n) { return static_cast<std::size_t>(rng() % n); };

    SceneSpec spec;
    spec.canvas_size = canvas_size;
    spec.rng_seed = seed;
    spec.background = kAllBackgrounds[pick(kAllBackgrounds.size())];
    const int count = unit(rng) < 0.3 ? 1 : 2;

    const double margin = 1.0 / canvas_size;
    auto random_shape = [&]() {
        ShapeSpec s;
        s.kind = kAllShapes[pick(kAllShapes.size())];
        s.color = kAllColors[pick(kAllColors.size())];
        s.size = 0.12 + 0.08 * unit(rng);
        // Place the bounding box uniformly inside the canvas.
        const auto b = fractional_bounds({s.kind, s.color, 0.0, 0.0, s.size});
        const double lo_x = margin - b[0], hi_x = 1.0 - margin - b[2];
        const double lo_y = margin - b[1], hi_y = 1.0 - margin - b[3];
        s.cx = lo_x + (hi_x - lo_x) * unit(rng);
        s.cy = lo_y + (hi_y - lo_y) * unit(rng);
        return s;
    };

    spec.shapes.push_back(random_shape());
    if (count == 2) {
        for (int attempt = 0; attempt < 1000; ++attempt) {
            auto candidate = random_shape();
            SceneSpec trial = spec;
            trial.shapes.push_back(candidate);
            try {
                validate(trial);
                spec = std::move(trial);
                break;
            } catch (const ValidationError&) {
            }
        }
    }
    validate(spec);
    return spec;
}

SceneRecord generate_scene(const SceneSpec& spec) {
    validate(spec);
    const int n = spec.canvas_size;
    const auto bg = rgb(spec.background);

    auto image = torch::empty({3, n, n}, torch::kFloat32);
    auto acc = image.accessor<float, 3>();
    for (int c = 0; c < 3; ++c) {
        for (int y = 0; y < n; ++y) {
            for (int x = 0; x < n; ++x) {
                acc[c][y][x] = bg[c];
            }
        }
    }

    SceneRecord record;
    record.spec = spec;
    record.id = fmt::format("seed-{}", spec.rng_seed);
    for (const auto& shape : spec.shapes) {
        auto mask = torch::zeros({n, n}, torch::kBool);
        auto macc = mask.accessor<bool, 2>();
        const auto col = rgb(shape.color);
        const auto box = pixel_bounds(shape, n);
        for (int y = box.y0; y < box.y1; ++y) {
            for (int x = box.x0; x < box.x1; ++x) {
                const double sd = signed_distance(shape, n, x + 0.5, y + 0.5);
                const double coverage = std::clamp(0.5 - sd, 0.0, 1.0);
                if (coverage <= 0.0) {
                    continue;
                }
                for (int c = 0; c < 3; ++c) {
                    acc[c][y][x] = static_cast<float>(bg[c] * (1.0 - coverage) + col[c] * coverage);
                }
                macc[y][x] = sd <= 0.0;
            }
        }
        record.masks.push_back(mask);
    }
    record.image = image;
    record.caption = make_caption(spec.shapes);
    return record;
}

std::string phrase(Color color, ShapeKind kind) {
    return fmt::format("{} {}", to_string(color), to_string(kind));
}

std::vector<std::string> make_caption(const std::vector<ShapeSpec>& shapes) {
    std::vector<std::string> tokens;
    for (std::size_t i = 0; i < shapes.size(); ++i) {
        if (i > 0) {
            tokens.emplace_back("and");
        }
        tokens.emplace_back("a");
        tokens.emplace_back(to_string(shapes[i].color));
        tokens.emplace_back(to_string(shapes[i].kind));
    }
    return tokens;
}

std::vector<std::string> tokenize(std::string_view text) {
    std::vector<std::string> tokens;
    std::istringstream in{std::string(text)};
    std::string word;
    while (in >> word) {
        std::transform(word.begin(), word.end(), word.begin(),
                       [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
        tokens.push_back(word);
    }
    return tokens;
}

std::string join_tokens(const std::vector<std::string>& tokens) {
    std::string out;
    for (const auto& t : tokens) {
        if (!out.empty()) {
            out += ' ';
        }
        out += t;
    }
    return out;
}

std::vector<ParsedShape> parse_caption(const std::vector<std::string>& tokens) {
    std::vector<ParsedShape> shapes;
    std::size_t i = 0;
    while (true) {
        if (i + 3 > tokens.size() || tokens[i] != "a") {
            throw ValidationError("caption does not match 'a {color} {shape} [and ...]'", "caption");
        }
        auto color = parse_color(tokens[i + 1]);
        auto kind = parse_shape(tokens[i + 2]);
        if (!color || !kind) {
            throw ValidationError("unknown color or shape word in caption", "caption");
        }
        shapes.push_back({*color, *kind});
        i += 3;
        if (i == tokens.size()) {
            break;
        }
        if (tokens[i] != "and" || shapes.size() == 2) {
            throw ValidationError("caption has trailing tokens", "caption");
        }
        ++i;
    }
    return shapes;
}

std::optional<ParsedShape> parse_phrase(std::string_view text) {
    auto tokens = tokenize(text);
    if (tokens.size() != 2) {
        return std::nullopt;
    }
    auto color = parse_color(tokens[0]);
    auto kind = parse_shape(tokens[1]);
    if (!color || !kind) {
        return std::nullopt;
    }
    return ParsedShape{*color, *kind};
}

std::vector<std::int64_t> encode_rle(const torch::Tensor& mask) {
    auto flat = mask.to(torch::kBool).contiguous().view(-1);
    const auto* data = flat.data_ptr<bool>();
    std::vector<std::int64_t> counts;
    bool current = false;
    std::int64_t run = 0;
    for (std::int64_t i = 0; i < flat.numel(); ++i) {
        if (data[i] != current) {
            counts.push_back(run);
            run = 0;
            current = data[i];
        }
        ++run;
    }
    counts.push_back(run);
    return counts;
}

torch::Tensor decode_rle(const std::vector<std::int64_t>& counts, int height, int width) {
    auto mask = torch::zeros({static_cast<std::int64_t>(height) * width}, torch::kBool);
    auto* data = mask.data_ptr<bool>();
    std::int64_t pos = 0;
    bool value = false;
    for (auto run : counts) {
        if (run < 0 || pos + run > mask.numel()) {
            throw ValidationError("run-length mask does not fit the canvas", "mask_rle");
        }
        std::fill(data + pos, data + pos + run, value);
        pos += run;
        value = !value;
    }
    if (pos != mask.numel()) {
        throw ValidationError("run-length mask does not cover the canvas", "mask_rle");
    }
    return mask.view({height, width});
}

std::vector<SplitSeeds> split_seeds(const DatasetConfig& config) {
    constexpr std::uint64_t kSplitStride = 1'000'000;
    std::vector<SplitSeeds> splits;
    const std::array<std::pair<const char*, int>, 3> counts{
        {{"train", config.train}, {"val", config.val}, {"test", config.test}}};
    std::uint64_t offset = 0;
    for (const auto& [name, count] : counts) {
        if (count < 0) {
            throw ValidationError(fmt::format("{} count must be non-negative", name), name);
        }
        SplitSeeds split{name, {}};
        for (int i = 0; i < count; ++i) {
            split.seeds.push_back(config.base_seed + offset + static_cast<std::uint64_t>(i));
        }
        splits.push_back(std::move(split));
        offset += kSplitStride;
    }
    std::set<std::uint64_t> seen;
    for (const auto& split : splits) {
        for (auto seed : split.seeds) {
            if (!seen.insert(seed).second) {
                throw ValidationError(
                    fmt::format("seed {} appears in more than one split", seed), split.split);
            }
        }
    }
    return splits;
}

nlohmann::json to_json(const SceneRecord& record) {
    nlohmann::json shapes = nlohmann::json::array();
    for (std::size_t i = 0; i < record.spec.shapes.size(); ++i) {
        const auto& s = record.spec.shapes[i];
        const auto box = pixel_bounds(s, record.spec.canvas_size);
        shapes.push_back({{"kind", to_string(s.kind)},
                          {"color", to_string(s.color)},
                          {"cx", s.cx},
                          {"cy", s.cy},
                          {"size", s.size},
                          {"bbox", {box.x0, box.y0, box.x1, box.y1}},
                          {"mask_area", record.masks[i].sum().item<std::int64_t>()},
                          {"mask_rle", encode_rle(record.masks[i])}});
    }
    return {{"id", record.id},
            {"caption", record.caption_text()},
            {"shapes", shapes},
            {"seed", record.spec.rng_seed},
            {"background", to_string(record.spec.background)},
            {"canvas_size", record.spec.canvas_size}};
}

SceneRecord from_json(const nlohmann::json& j, const torch::Tensor& image) {
    SceneRecord record;
    record.id = j.at("id").get<std::string>();
    record.caption = tokenize(j.at("caption").get<std::string>());
    record.image = image;
    record.spec.canvas_size = j.at("canvas_size").get<int>();
    record.spec.rng_seed = j.at("seed").get<std::uint64_t>();
    auto background = parse_background(j.at("background").get<std::string>());
    if (!background) {
        throw ValidationError("unknown background in record " + record.id, "background");
    }
    record.spec.background = *background;
    const int n = record.spec.canvas_size;
    for (const auto& s : j.at("shapes")) {
        auto kind = parse_shape(s.at("kind").get<std::string>());
        auto color = parse_color(s.at("color").get<std::string>());
        if (!kind || !color) {
            throw ValidationError("unknown shape or color in record " + record.id, "shapes");
        }
        record.spec.shapes.push_back(
            {*kind, *color, s.at("cx").get<double>(), s.at("cy").get<double>(), s.at("size").get<double>()});
        record.masks.push_back(decode_rle(s.at("mask_rle").get<std::vector<std::int64_t>>(), n, n));
    }
    return record;
}

void generate_dataset(const DatasetConfig& config) {
    const auto splits = split_seeds(config);
    for (const auto& split : splits) {
        const auto dir = config.root / split.split;
        std::error_code ec;
        std::filesystem::create_directories(dir / "images", ec);
        if (ec) {
            throw IoError("cannot create " + (dir / "images").string() + ": " + ec.message());
        }
        const auto meta_path = dir / "meta.jsonl";
        std::ofstream meta(meta_path, std::ios::trunc);
        if (!meta) {
            throw IoError("cannot write " + meta_path.string());
        }
        for (std::size_t i = 0; i < split.seeds.size(); ++i) {
            auto record = generate_scene(sample_spec(split.seeds[i], config.canvas_size));
            record.id = fmt::format("{}-{:05d}", split.split, i);
            write_png(dir / "images" / (record.id + ".png"), record.image);
            meta << to_json(record).dump() << '\n';
        }
        if (!meta) {
            throw IoError("short write to " + meta_path.string());
        }
    }
}

std::vector<SceneRecord> load_split(const std::filesystem::path& root, const std::string& split) {
    const auto meta_path = root / split / "meta.jsonl";
    std::ifstream meta(meta_path);
    if (!meta) {
        throw IoError("corpus split not found: " + meta_path.string());
    }
    std::vector<SceneRecord> records;
    std::string line;
    while (std::getline(meta, line)) {
        if (line.empty()) {
            continue;
        }
        auto j = nlohmann::json::parse(line);
        auto image = read_png(root / split / "images" / (j.at("id").get<std::string>() + ".png"));
        records.push_back(from_json(j, image));
    }
    return records;
}

std::vector<EditCase> derive_edit_cases(const std::vector<SceneRecord>& corpus,
                                        const std::vector<EditKind>& kinds) {
    auto wants = [&](EditKind k) { return std::find(kinds.begin(), kinds.end(), k) != kinds.end(); };
    std::vector<EditCase> cases;
    for (std::size_t s = 0; s < corpus.size(); ++s) {
        const auto& scene = corpus[s];
        std::set<Color> present;
        for (const auto& shape : scene.spec.shapes) {
            present.insert(shape.color);
        }
        for (std::size_t i = 0; i < scene.spec.shapes.size(); ++i) {
            const auto& shape = scene.spec.shapes[i];
            const auto source = phrase(shape.color, shape.kind);
            const auto ambiguous = std::count_if(
                scene.spec.shapes.begin(), scene.spec.shapes.end(), [&](const ShapeSpec& other) {
                    return other.color == shape.color && other.kind == shape.kind;
                });
            if (ambiguous > 1) {
                continue;
            }
            auto base = EditCase{s, scene.id, source, "", 0, EditKind::change, scene.masks[i]};
            if (wants(EditKind::change)) {
                for (auto color : kAllColors) {
                    if (present.contains(color)) {
                        continue;
                    }
                    auto c = base;
                    c.target_phrase = phrase(color, shape.kind);
                    cases.push_back(std::move(c));
                }
            }
            if (wants(EditKind::remove)) {
                auto c = base;
                c.kind = EditKind::remove;
                cases.push_back(std::move(c));
            }
            if (wants(EditKind::relative)) {
                for (int sign : {+1, -1}) {
                    auto c = base;
                    c.kind = EditKind::relative;
                    c.sign = sign;
                    cases.push_back(std::move(c));
                }
            }
        }
    }
    return cases;
}

}  // namespace openedit::synth
