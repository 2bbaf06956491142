// Copyright (C) 2026 The Open-Edit Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "openedit/decoder.hpp"
#include "openedit/grounding.hpp"
#include "openedit/sampleopt.hpp"
#include "openedit/synthdata.hpp"
#include "openedit/vse.hpp"

namespace openedit::pipeline {

struct RunConfig {
    std::filesystem::path corpus_root;
    std::filesystem::path run_dir;  // runs/<name>
    int batch_size = 32;
    int steps = 0;
    std::uint64_t seed = 0;
    int eval_every = 250;
    int eval_images = 64;  // validation images scored per evaluation

    // Embedding stage.
    vse::VseConfig vse;
    double vse_learning_rate = 2e-4;
    double vse_weight_decay = 0.0;
    // Steps before this fraction of the run train with the rectification off;
    // hardest-negative training from a rectified init tends to stay collapsed.
    double vse_rectify_after = 2.0 / 3.0;

    // Decoder stage.
    decoder::DecoderConfig decoder;
    decoder::LossWeights loss_weights;
    double generator_learning_rate = 1e-4;
    double discriminator_learning_rate = 4e-4;
    int sample_every = 500;

    nlohmann::json to_json() const;
    static RunConfig from_json(const nlohmann::json& j);
};

/// Default step budgets used by the CLI.
inline constexpr int kDefaultVseSteps = 3000;
inline constexpr int kDefaultDecoderSteps = 3000;

struct TrainSummary {
    std::filesystem::path best_checkpoint;
    std::filesystem::path last_checkpoint;
    int best_step = 0;
    double best_metric = 0.0;  // val R@1 (embedding) or val L2 (decoder)
    double initial_metric = 0.0;
    std::string frozen_hash_before;  // decoder stage only
    std::string frozen_hash_after;
    int rollbacks = 0;
};

// Per-step logging hook (step, metrics); stderr logging happens regardless.
using MetricsCallback = std::function<void(const nlohmann::json&)>;

TrainSummary train_vse(const RunConfig& config, const MetricsCallback& on_metrics = {});
TrainSummary train_decoder(const RunConfig& config, const std::filesystem::path& vse_checkpoint,
                           const MetricsCallback& on_metrics = {});

// Caption -> image R@1 where any image with the same (color, shape) content
// as the query's own image counts as a hit.
double caption_to_image_recall(const vse::VseModel& model, const std::vector<synth::SceneRecord>& scenes);

// sqrt(mean((a - b)^2)) over all pixels and channels.
double reconstruction_l2(const torch::Tensor& a, const torch::Tensor& b);

/// Frozen encoder + decoder loaded from checkpoints.
struct LoadedModels {
    vse::VseModel vse;
    decoder::DecoderModel decoder;

    static LoadedModels load(const std::filesystem::path& vse_checkpoint,
                             const std::filesystem::path& decoder_checkpoint);
    sampleopt::FrozenModels frozen() const { return {vse, decoder}; }
};

struct EditOptions {
    bool use_opt = false;
    sampleopt::OptConfig opt;
    std::uint64_t seed = 0;
};

struct EditResult {
    torch::Tensor image_out;
    torch::Tensor reconstruction;
    grounding::GroundingMap grounding;
    std::vector<double> loss_trace;
    std::vector<std::string> warnings;
    bool all_oov = false;
    bool optimized = false;
    bool diverged = false;
    double optimize_ms = 0.0;
    sampleopt::PerturbationSet perturbations;  // used for decoding (zeros without opt)
};

// encode -> apply instruction -> (optional optimization) -> decode. With
// `cached` set, those perturbations are used and no optimization runs.
EditResult edit(const LoadedModels& models, const torch::Tensor& image,
                const grounding::EditInstruction& instruction, const EditOptions& options,
                const sampleopt::PerturbationSet* cached = nullptr);

struct SweepFrame {
    double alpha = 0.0;
    torch::Tensor image;
};

struct SweepResult {
    std::vector<SweepFrame> frames;  // ascending alpha
    torch::Tensor reconstruction;
    grounding::GroundingMap grounding;
    std::vector<double> loss_trace;
    std::vector<std::string> warnings;
    bool all_oov = false;
    bool optimized = false;
    double optimize_ms = 0.0;
    sampleopt::PerturbationSet perturbations;
};

std::vector<double> default_alpha_grid();
std::vector<double> parse_alpha_grid(const std::string& text);

// One frame per alpha (sorted, duplicates removed). With use_opt, the
// perturbations are optimized once at the largest alpha and shared.
SweepResult sweep_alpha(const LoadedModels& models, const torch::Tensor& image,
                        const grounding::EditInstruction& instruction, std::vector<double> grid,
                        const EditOptions& options, const sampleopt::PerturbationSet* cached = nullptr);

struct EditScore {
    std::string case_id;
    double hue_to_target = 180.0;  // circular distance of the edited masked hue from the target hue
    double hue_shift = 0.0;        // circular distance between reference and edited masked hue
    double inside_change = 0.0;    // mean |dRGB| inside the mask, edited vs reference
    double outside_change = 0.0;   // same outside the mask
    bool success = false;
};

inline constexpr double kHueSuccessDegrees = 30.0;
inline constexpr double kOutsideChangeRatio = 0.25;

// Compares an edited image against the unedited (alpha = 0) output.
EditScore score_edit(const torch::Tensor& reference, const torch::Tensor& edited, const torch::Tensor& mask,
                     synth::Color target);

double spearman(const std::vector<double>& x, const std::vector<double>& y);

struct EvalCell {
    std::string name;
    bool present = false;
    std::vector<std::string> image_ids;
    std::vector<double> l2;
    std::vector<double> perceptual;
    double mean_l2 = 0.0;
    double mean_perceptual = 0.0;
};

struct EvalReport {
    std::string split;
    std::vector<EvalCell> cells;
    std::vector<EditScore> edits;
    double edit_success_rate = 0.0;
    double mean_inside_change = 0.0;
    double mean_outside_change = 0.0;

    nlohmann::json to_json() const;
    std::string to_markdown() const;
    // Recomputes every aggregate from the rows.
    void recompute_aggregates();
};

struct EvalOptions {
    std::filesystem::path corpus_root;
    std::string split = "val";
    std::filesystem::path vse_checkpoint;
    // Cell name ("no-edge", "edge", "edge-opt") -> decoder checkpoint.
    std::map<std::string, std::filesystem::path> cells;
    std::vector<std::string> cell_order{"no-edge", "edge", "edge-opt"};
    int max_images = 32;
    int max_edit_cases = 60;
    double edit_alpha = 1.0;
    bool edit_use_opt = false;
    std::string edit_cell = "edge";
    sampleopt::OptConfig opt;
    std::uint64_t seed = 0;
};

EvalReport evaluate(const EvalOptions& options);

// Evenly spaced subset of change cases, at most one per (scene, source) pair
// when possible.
std::vector<synth::EditCase> select_change_cases(const std::vector<synth::SceneRecord>& scenes, int limit);

grounding::EditInstruction instruction_for(const synth::EditCase& edit_case, double alpha);

}  // namespace openedit::pipeline
