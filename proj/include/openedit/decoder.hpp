// Copyright (C) 2026 The Open-Edit Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "openedit/edgemap.hpp"
#include "openedit/vse.hpp"

namespace openedit::decoder {

struct DecoderConfig {
    int feature_dim = 128;
    int grid = 8;
    // Output channels of each residual block; the block count is n.
    std::vector<int> block_channels{64, 32, 16, 16};
    int spade_hidden = 16;
    bool use_edges = true;
    int disc_channels = 32;
    int disc_scales = 2;

    int blocks() const { return static_cast<int>(block_channels.size()); }
    int canvas() const { return grid << (blocks() - 1); }

    nlohmann::json to_json() const;
    static DecoderConfig from_json(const nlohmann::json& j);
};

/// Additive tensors inserted after generator blocks G1..G(n-1); entry i has
/// shape [C_i, h_i, w_i] (or [N, C_i, h_i, w_i] for batched use).
struct PerturbationSet {
    std::vector<torch::Tensor> tensors;

    static PerturbationSet zeros(const std::vector<std::vector<std::int64_t>>& shapes,
                                 torch::Dtype dtype = torch::kFloat32);
    double squared_norm() const;
};

/// Batch-statistic normalization whose per-location scale and bias are
/// predicted from the edge map by small convolutional heads.
class SpadeNormImpl : public torch::nn::Module {
public:
    static constexpr double kEpsilon = 1e-5;
    static constexpr double kMomentum = 0.1;

    SpadeNormImpl(int channels, int hidden);

    // x: [N,C,h,w]; edges: [N,1,H,W] (resized to h x w by nearest neighbour).
    torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& edges);

    // Heads that emit exactly gamma = 1, beta = 0 (the initial state).
    void reset_heads_to_identity();
    torch::nn::Conv2d& gamma_head() { return gamma_; }
    torch::nn::Conv2d& beta_head() { return beta_; }

private:
    torch::nn::Conv2d shared_{nullptr};
    torch::nn::Conv2d gamma_{nullptr};
    torch::nn::Conv2d beta_{nullptr};
    torch::Tensor running_mean_;
    torch::Tensor running_var_;
};
TORCH_MODULE(SpadeNorm);

// Applies one normalization site; see SpadeNormImpl.
torch::Tensor spade_normalize(const torch::Tensor& features, const torch::Tensor& edge_map,
                              SpadeNorm& site);

class SpadeResBlockImpl : public torch::nn::Module {
public:
    SpadeResBlockImpl(int in_channels, int out_channels, int hidden);
    torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& edges);

private:
    SpadeNorm norm0_{nullptr}, norm1_{nullptr}, norm_skip_{nullptr};
    torch::nn::Conv2d conv0_{nullptr}, conv1_{nullptr}, conv_skip_{nullptr};
    bool learned_skip_ = false;
};
TORCH_MODULE(SpadeResBlock);

/// G = G_n(...G_2(G_1(V) + P_1)...) with x2 nearest upsampling at the start
/// of every block after the first, then an RGB projection squashed by a
/// sigmoid.
class GeneratorImpl : public torch::nn::Module {
public:
    explicit GeneratorImpl(const DecoderConfig& config);

    // features: [N,D,S,S]; edges: [N,1,H,W]. Perturbation entries may be
    // [C,h,w] (broadcast over the batch) or [N,C,h,w].
    torch::Tensor forward(const torch::Tensor& features, const torch::Tensor& edges,
                          const PerturbationSet* perturbations = nullptr);

    // Shapes [C,h,w] of the n-1 insertion points.
    std::vector<std::vector<std::int64_t>> perturbation_shapes() const;

private:
    DecoderConfig config_;
    std::vector<SpadeResBlock> blocks_;
    torch::nn::Conv2d to_rgb_{nullptr};
};
TORCH_MODULE(Generator);

struct DiscriminatorOutput {
    std::vector<torch::Tensor> features;  // shallow to deep
    torch::Tensor logits;
};

class PatchDiscriminatorImpl : public torch::nn::Module {
public:
    explicit PatchDiscriminatorImpl(int channels);
    DiscriminatorOutput forward(const torch::Tensor& images);

private:
    std::vector<torch::nn::Conv2d> layers_;
};
TORCH_MODULE(PatchDiscriminator);

// Patch discriminators at full, 1/2, ... resolution.
class MultiScaleDiscriminatorImpl : public torch::nn::Module {
public:
    MultiScaleDiscriminatorImpl(int channels, int scales);
    std::vector<DiscriminatorOutput> forward(const torch::Tensor& images);

private:
    std::vector<PatchDiscriminator> scales_;
};
TORCH_MODULE(MultiScaleDiscriminator);

struct LossWeights {
    double perceptual = 10.0;        // lambda_VGG
    double feature_matching = 10.0;  // lambda_FM
};

/// Layer-averaged L1 distance between the frozen image encoder's three stage
/// activations: sum_k mean|F_k(a) - F_k(b)|.
class PerceptualMetric {
public:
    explicit PerceptualMetric(const vse::VseModel& encoder) : encoder_(&encoder) {}

    std::vector<torch::Tensor> features(const torch::Tensor& images) const;
    // Batched [N,3,H,W] (mean over the batch) or single [3,H,W]; differentiable.
    torch::Tensor distance(const torch::Tensor& a, const torch::Tensor& b) const;
    // Against precomputed features of `b`.
    torch::Tensor distance_to(const torch::Tensor& a, const std::vector<torch::Tensor>& b_features) const;

private:
    const vse::VseModel* encoder_;
};

struct GeneratorLoss {
    torch::Tensor total;
    torch::Tensor adversarial;
    torch::Tensor perceptual;
    torch::Tensor feature_matching;
};

// Hinge generator objective with perceptual and feature-matching terms.
// Logit/feature lists are indexed by discriminator scale. Throws
// DivergenceError on a non-finite term.
GeneratorLoss generator_loss(const std::vector<torch::Tensor>& fake_logits,
                             const std::vector<std::vector<torch::Tensor>>& fake_features,
                             const std::vector<std::vector<torch::Tensor>>& real_features,
                             const torch::Tensor& fake_images, const torch::Tensor& real_images,
                             const LossWeights& weights, const PerceptualMetric& perceptual);

// -E[min(0, -1 + D(real))] - E[min(0, -1 - D(fake))], averaged over scales.
torch::Tensor discriminator_loss(const std::vector<torch::Tensor>& real_logits,
                                 const std::vector<torch::Tensor>& fake_logits);

/// Generator + discriminator pair with checkpoint metadata.
class DecoderModel {
public:
    explicit DecoderModel(DecoderConfig config);

    const DecoderConfig& config() const { return config_; }
    Generator generator() const { return generator_; }
    MultiScaleDiscriminator discriminator() const { return discriminator_; }

    // Single-image decode, evaluation statistics. Returns [3,H,W].
    torch::Tensor decode(const vse::FeatureMap& features, const edges::EdgeMap& edge_map,
                         const PerturbationSet* perturbations = nullptr) const;

    void freeze();
    void train_mode();
    void to(torch::Dtype dtype);

    std::string generator_hash() const;
    std::string parameter_hash() const;

    // `vse_hash` records which frozen encoder the decoder was trained on.
    void save(const std::filesystem::path& path, const std::string& vse_hash) const;
    static DecoderModel load(const std::filesystem::path& path, std::string* vse_hash = nullptr);

private:
    DecoderConfig config_;
    Generator generator_{nullptr};
    MultiScaleDiscriminator discriminator_{nullptr};
};

}  // namespace openedit::decoder
