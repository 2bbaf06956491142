// Copyright (C) 2026 The Open-Edit Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "openedit/decoder.hpp"
#include "openedit/edgemap.hpp"
#include "openedit/grounding.hpp"
#include "openedit/vse.hpp"

namespace openedit::sampleopt {

using decoder::PerturbationSet;

struct OptConfig {
    int steps = 100;
    double learning_rate = 1e-2;
    double perceptual_weight = 1.0;  // lambda inside the rec / cyc losses
    double reg_weight = 1e-3;        // multiplies sum_i ||P_i||^2
    double rec_weight = 1.0;
    double cyc_weight = 1.0;
    double time_limit_seconds = 0.0;  // wall-clock cap on the loop; 0 = none

    void validate() const;
    nlohmann::json to_json() const;
};

/// Frozen encoder/decoder pair used at test time. Neither is modified.
struct FrozenModels {
    const vse::VseModel& vse;
    const decoder::DecoderModel& decoder;
};

/// Everything about one (image, instruction) pair that stays fixed while
/// the perturbations are optimized.
struct EditContext {
    torch::Tensor image;  // I, [3,H,W]
    vse::FeatureMap features;
    edges::EdgeMap edge_map;
    grounding::EditInstruction instruction;
    vse::TextEmbedding source;
    vse::TextEmbedding target;  // change only
    bool all_oov = false;

    static EditContext build(const torch::Tensor& image, const grounding::EditInstruction& instruction,
                             const FrozenModels& models);
    bool has_cycle() const { return instruction.kind == synth::EditKind::change; }
};

struct CycleImages {
    torch::Tensor reconstruction;  // I_r = G'(V)
    torch::Tensor manipulated;     // I_m = G'(V_m)
    torch::Tensor cycled;          // I_c; undefined in reconstruction-only mode
    bool reconstruction_only = false;
};

// I -> I_m -> I_c through the perturbed decoder. The return trip edits the
// re-encoded manipulated image. Remove/relative instructions have no inverse
// and yield reconstruction-only results.
CycleImages cycle_images(const EditContext& context, const FrozenModels& models,
                         const PerturbationSet& perturbations);

struct SampleLosses {
    torch::Tensor reconstruction;   // ||I_r - I||_1 + lambda * perceptual(I_r, I)
    torch::Tensor cycle;            // same for I_c; zero without a cycle
    torch::Tensor regularization;   // sum_i ||P_i||_2^2
    torch::Tensor total;
};

// ||.||_1 is the mean absolute pixel difference.
SampleLosses sample_losses(const torch::Tensor& image, const torch::Tensor& reconstruction,
                           const torch::Tensor& cycled, const PerturbationSet& perturbations,
                           const OptConfig& config, const decoder::PerceptualMetric& perceptual);

struct OptResult {
    PerturbationSet perturbations;  // lowest-loss set seen
    std::vector<double> trace;      // total loss before each step
    double initial_total = 0.0;
    double final_total = 0.0;       // loss of the returned perturbations
    bool diverged = false;
    bool timed_out = false;
    bool reconstruction_only = false;
};

// Adam on the perturbations only. Aborts (diverged = true) when the loss
// turns non-finite or exceeds 10x its initial value.
OptResult optimize_perturbations(const EditContext& context, const FrozenModels& models,
                                 const OptConfig& config, const PerturbationSet* initial = nullptr);

}  // namespace openedit::sampleopt
