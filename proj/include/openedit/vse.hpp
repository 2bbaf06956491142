// Copyright (C) 2026 The Open-Edit Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <filesystem>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

namespace openedit::vse {

struct VseConfig {
    int embed_dim = 128;  // D
    int grid = 8;         // S
    int canvas = 64;
    std::array<int, 3> stage_channels{32, 64, 128};
    int word_dim = 64;
    int hidden_dim = 128;
    double margin = 0.2;
    // Rectify both projections so the joint space is the nonnegative orthant.
    // Non-matching concepts then sit near orthogonal instead of anti-aligned,
    // which keeps <v,t1>(t2 - t1) on the scale of real attribute differences.
    bool nonnegative = true;

    nlohmann::json to_json() const;
    static VseConfig from_json(const nlohmann::json& j);
};

inline constexpr std::string_view kOovToken = "<unk>";

/// Token <-> id table. Id 0 is always the out-of-vocabulary token.
class Vocabulary {
public:
    Vocabulary();
    explicit Vocabulary(std::vector<std::string> tokens);

    static Vocabulary build(const std::vector<std::vector<std::string>>& sentences);

    std::int64_t id(const std::string& token) const;
    bool contains(const std::string& token) const { return index_.contains(token); }
    std::size_t size() const { return tokens_.size(); }
    const std::vector<std::string>& tokens() const { return tokens_; }
    std::string hash() const;

private:
    std::vector<std::string> tokens_;
    std::unordered_map<std::string, std::int64_t> index_;
};

/// Visual embedding V of one image: [D, S, S].
struct FeatureMap {
    torch::Tensor values;

    std::int64_t channels() const { return values.size(0); }
    std::int64_t grid() const { return values.size(1); }
    // Spatial mean followed by L2 normalization, shape [D].
    torch::Tensor pooled() const;
};

/// Unit-norm phrase/caption embedding t, shape [D].
struct TextEmbedding {
    torch::Tensor values;
    std::string source_phrase;
    bool all_oov = false;  // every token mapped to the OOV id
};

struct ImageEncoderOutput {
    torch::Tensor features;            // [N, D, S, S]
    std::vector<torch::Tensor> stages;  // the three stage activations, shallow to deep
};

// Three stride-2 stages (two 3x3 convs each) then a 1x1 projection to D
// (rectified when VseConfig::nonnegative).
class ImageEncoderImpl : public torch::nn::Module {
public:
    explicit ImageEncoderImpl(const VseConfig& config);
    ImageEncoderOutput forward(const torch::Tensor& images);
    void set_rectified(bool on) { nonnegative_ = on; }

private:
    std::vector<torch::nn::Sequential> stages_;
    torch::nn::Conv2d projection_{nullptr};
    bool nonnegative_ = false;
};
TORCH_MODULE(ImageEncoder);

// Token embedding -> LSTM -> last valid hidden state -> linear -> L2 normalize.
class TextEncoderImpl : public torch::nn::Module {
public:
    TextEncoderImpl(const VseConfig& config, std::int64_t vocab_size);
    // ids: [N, T] int64 (right-padded); lengths: [N] int64, all >= 1.
    torch::Tensor forward(const torch::Tensor& ids, const torch::Tensor& lengths);
    void set_rectified(bool on) { nonnegative_ = on; }

private:
    torch::nn::Embedding embedding_{nullptr};
    torch::nn::LSTM lstm_{nullptr};
    torch::nn::Linear projection_{nullptr};
    bool nonnegative_ = false;
};
TORCH_MODULE(TextEncoder);

/// Both encoders plus vocabulary and configuration.
class VseModel {
public:
    VseModel(VseConfig config, Vocabulary vocabulary);

    const VseConfig& config() const { return config_; }
    const Vocabulary& vocabulary() const { return vocabulary_; }

    // [3,H,W] image -> FeatureMap. Throws ValidationError on wrong size.
    FeatureMap encode_image(const torch::Tensor& image) const;
    // Batched, autograd-enabled variant: [N,3,H,W] -> encoder output.
    ImageEncoderOutput encode_images(const torch::Tensor& images) const;

    TextEmbedding encode_text(const std::vector<std::string>& tokens) const;
    TextEmbedding encode_phrase(std::string_view phrase) const;
    // Batched, autograd-enabled: one unit vector per row, [N, D].
    torch::Tensor encode_texts(const std::vector<std::vector<std::string>>& sentences) const;

    ImageEncoder image_encoder() const { return image_encoder_; }
    TextEncoder text_encoder() const { return text_encoder_; }

    // Evaluation mode with gradients disabled on every parameter.
    void freeze();
    void train_mode();
    // Training-time switch for the output rectification; a no-op unless
    // config().nonnegative. Inference always runs rectified.
    void set_rectified(bool on);
    // Converts every parameter (used by double-precision gradient checks).
    void to(torch::Dtype dtype);

    std::string parameter_hash() const;

    void save(const std::filesystem::path& path) const;
    static VseModel load(const std::filesystem::path& path);

private:
    VseConfig config_;
    Vocabulary vocabulary_;
    ImageEncoder image_encoder_{nullptr};
    TextEncoder text_encoder_{nullptr};
};

// [N, D, S, S] -> [N, D] spatial mean, L2 normalized.
torch::Tensor pool(const torch::Tensor& features);

// Hardest-negative triplet ranking loss averaged over the batch. `images`
// and `texts` are [B, D] unit vectors with row i of each forming a positive
// pair. `excluded`, if defined, is a [B, B] bool matrix marking off-diagonal
// pairs that must not be treated as negatives (duplicate captions).
torch::Tensor triplet_loss(const torch::Tensor& images, const torch::Tensor& texts, double margin,
                           const torch::Tensor& excluded = {});
// Same loss given the [B, B] similarity matrix scores[i][j] = <image_i, text_j>.
torch::Tensor triplet_loss_from_scores(const torch::Tensor& scores, double margin,
                                       const torch::Tensor& excluded = {});

// Indices of the top-k gallery rows by dot product with `query`, descending,
// ties broken by ascending index. k is clamped to the gallery size.
std::vector<std::int64_t> retrieve(const torch::Tensor& query, const torch::Tensor& gallery,
                                   std::int64_t k);

}  // namespace openedit::vse
