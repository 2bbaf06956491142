// Copyright (C) 2026 The Open-Edit Authors
// SPDX-License-Identifier: Apache-2.0

#include "openedit/vse.hpp"

#include <algorithm>
#include <numeric>

#include <fmt/format.h>
#include <fmt/ranges.h>

#include "openedit/archive.hpp"
#include "openedit/common.hpp"
#include "openedit/synthdata.hpp"

namespace openedit::vse {

namespace F = torch::nn::functional;

nlohmann::json VseConfig::to_json() const {
    return {{"embed_dim", embed_dim},   {"grid", grid},         {"canvas", canvas},
            {"stage_channels", stage_channels}, {"word_dim", word_dim},
            {"hidden_dim", hidden_dim}, {"margin", margin}, {"nonnegative", nonnegative}};
}

VseConfig VseConfig::from_json(const nlohmann::json& j) {
    VseConfig c;
    c.embed_dim = j.value("embed_dim", c.embed_dim);
    c.grid = j.value("grid", c.grid);
    c.canvas = j.value("canvas", c.canvas);
    c.stage_channels = j.value("stage_channels", c.stage_channels);
    c.word_dim = j.value("word_dim", c.word_dim);
    c.hidden_dim = j.value("hidden_dim", c.hidden_dim);
    c.margin = j.value("margin", c.margin);
    c.nonnegative = j.value("nonnegative", c.nonnegative);
    if (c.canvas != c.grid * 8) {
        throw ValidationError(
            fmt::format("canvas {} must equal 8 x grid {} (three stride-2 stages)", c.canvas, c.grid),
            "grid");
    }
    return c;
}

Vocabulary::Vocabulary() : Vocabulary(std::vector<std::string>{std::string(kOovToken)}) {}

Vocabulary::Vocabulary(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
    if (tokens_.empty() || tokens_.front() != kOovToken) {
        throw ValidationError("vocabulary must start with the OOV token", "vocab");
    }
    for (std::size_t i = 0; i < tokens_.size(); ++i) {
        if (!index_.emplace(tokens_[i], static_cast<std::int64_t>(i)).second) {
            throw ValidationError("duplicate vocabulary token " + tokens_[i], "vocab");
        }
    }
}

Vocabulary Vocabulary::build(const std::vector<std::vector<std::string>>& sentences) {
    std::vector<std::string> words;
    for (const auto& sentence : sentences) {
        words.insert(words.end(), sentence.begin(), sentence.end());
    }
    // Every palette word is always present so phrases over unseen
    // combinations stay in-vocabulary.
    for (auto c : synth::kAllColors) {
        words.emplace_back(synth::to_string(c));
    }
    for (auto k : synth::kAllShapes) {
        words.emplace_back(synth::to_string(k));
    }
    std::sort(words.begin(), words.end());
    words.erase(std::unique(words.begin(), words.end()), words.end());
    std::vector<std::string> tokens{std::string(kOovToken)};
    tokens.insert(tokens.end(), words.begin(), words.end());
    return Vocabulary(std::move(tokens));
}

std::int64_t Vocabulary::id(const std::string& token) const {
    auto it = index_.find(token);
    return it == index_.end() ? 0 : it->second;
}

std::string Vocabulary::hash() const {
    std::string joined;
    for (const auto& t : tokens_) {
        joined += t;
        joined += '\n';
    }
    return sha256_hex(joined.data(), joined.size());
}

torch::Tensor FeatureMap::pooled() const { return pool(values.unsqueeze(0)).squeeze(0); }

torch::Tensor pool(const torch::Tensor& features) {
    return F::normalize(features.mean({2, 3}), F::NormalizeFuncOptions().dim(1));
}

ImageEncoderImpl::ImageEncoderImpl(const VseConfig& config) : nonnegative_(config.nonnegative) {
    int in = 3;
    for (std::size_t i = 0; i < config.stage_channels.size(); ++i) {
        const int out = config.stage_channels[i];
        torch::nn::Sequential stage(
            torch::nn::Conv2d(torch::nn::Conv2dOptions(in, out, 3).stride(2).padding(1)),
            torch::nn::ReLU(),
            torch::nn::Conv2d(torch::nn::Conv2dOptions(out, out, 3).padding(1)),
            torch::nn::ReLU());
        stages_.push_back(register_module(fmt::format("stage{}", i + 1), stage));
        in = out;
    }
    projection_ = register_module(
        "projection", torch::nn::Conv2d(torch::nn::Conv2dOptions(in, config.embed_dim, 1)));
}

ImageEncoderOutput ImageEncoderImpl::forward(const torch::Tensor& images) {
    ImageEncoderOutput out;
    auto x = images;
    for (auto& stage : stages_) {
        x = stage->forward(x);
        out.stages.push_back(x);
    }
    out.features = projection_->forward(x);
    if (nonnegative_) {
        out.features = torch::relu(out.features);
    }
    return out;
}

TextEncoderImpl::TextEncoderImpl(const VseConfig& config, std::int64_t vocab_size)
    : nonnegative_(config.nonnegative) {
    embedding_ = register_module("embedding", torch::nn::Embedding(vocab_size, config.word_dim));
    lstm_ = register_module(
        "lstm", torch::nn::LSTM(torch::nn::LSTMOptions(config.word_dim, config.hidden_dim).batch_first(true)));
    projection_ = register_module("projection", torch::nn::Linear(config.hidden_dim, config.embed_dim));
}

torch::Tensor TextEncoderImpl::forward(const torch::Tensor& ids, const torch::Tensor& lengths) {
    auto embedded = embedding_->forward(ids);
    auto hidden = std::get<0>(lstm_->forward(embedded));
    auto rows = torch::arange(ids.size(0), torch::kLong);
    auto last = hidden.index({rows, lengths - 1});
    auto projected = projection_->forward(last);
    if (nonnegative_) {
        projected = torch::relu(projected);
    }
    return F::normalize(projected, F::NormalizeFuncOptions().dim(1));
}

VseModel::VseModel(VseConfig config, Vocabulary vocabulary)
    : config_(std::move(config)), vocabulary_(std::move(vocabulary)) {
    image_encoder_ = ImageEncoder(config_);
    text_encoder_ = TextEncoder(config_, static_cast<std::int64_t>(vocabulary_.size()));
}

ImageEncoderOutput VseModel::encode_images(const torch::Tensor& images) const {
    if (images.dim() != 4 || images.size(1) != 3 || images.size(2) != config_.canvas ||
        images.size(3) != config_.canvas) {
        throw ValidationError(fmt::format("image batch must be [N,3,{0},{0}]", config_.canvas), "image");
    }
    return image_encoder_.ptr()->forward(images);
}

FeatureMap VseModel::encode_image(const torch::Tensor& image) const {
    if (image.dim() != 3 || image.size(0) != 3 || image.size(1) != config_.canvas ||
        image.size(2) != config_.canvas) {
        throw ValidationError(fmt::format("expected a 3x{0}x{0} image, got {1}", config_.canvas,
                                          fmt::join(image.sizes(), "x")),
                              "image");
    }
    auto param = *image_encoder_->parameters().begin();
    return {encode_images(image.unsqueeze(0).to(param.dtype())).features.squeeze(0)};
}

torch::Tensor VseModel::encode_texts(const std::vector<std::vector<std::string>>& sentences) const {
    if (sentences.empty()) {
        throw ValidationError("no sentences to encode", "text");
    }
    std::int64_t max_len = 0;
    for (const auto& s : sentences) {
        if (s.empty()) {
            throw ValidationError("cannot encode an empty token sequence", "text");
        }
        max_len = std::max<std::int64_t>(max_len, static_cast<std::int64_t>(s.size()));
    }
    const auto n = static_cast<std::int64_t>(sentences.size());
    auto ids = torch::zeros({n, max_len}, torch::kLong);
    auto lengths = torch::empty({n}, torch::kLong);
    auto ids_acc = ids.accessor<std::int64_t, 2>();
    for (std::int64_t i = 0; i < n; ++i) {
        const auto& s = sentences[static_cast<std::size_t>(i)];
        for (std::size_t t = 0; t < s.size(); ++t) {
            ids_acc[i][static_cast<std::int64_t>(t)] = vocabulary_.id(s[t]);
        }
        lengths[i] = static_cast<std::int64_t>(s.size());
    }
    return text_encoder_.ptr()->forward(ids, lengths);
}

TextEmbedding VseModel::encode_text(const std::vector<std::string>& tokens) const {
    if (tokens.empty()) {
        throw ValidationError("cannot encode an empty token sequence", "text");
    }
    TextEmbedding embedding;
    embedding.values = encode_texts({tokens}).squeeze(0);
    embedding.source_phrase = synth::join_tokens(tokens);
    embedding.all_oov = std::none_of(tokens.begin(), tokens.end(),
                                     [&](const std::string& t) { return vocabulary_.contains(t); });
    return embedding;
}

TextEmbedding VseModel::encode_phrase(std::string_view phrase) const {
    return encode_text(synth::tokenize(phrase));
}

void VseModel::freeze() {
    image_encoder_->eval();
    text_encoder_->eval();
    for (auto& p : image_encoder_->parameters()) {
        p.set_requires_grad(false);
    }
    for (auto& p : text_encoder_->parameters()) {
        p.set_requires_grad(false);
    }
}

void VseModel::set_rectified(bool on) {
    image_encoder_->set_rectified(on && config_.nonnegative);
    text_encoder_->set_rectified(on && config_.nonnegative);
}

void VseModel::train_mode() {
    image_encoder_->train();
    text_encoder_->train();
    for (auto& p : image_encoder_->parameters()) {
        p.set_requires_grad(true);
    }
    for (auto& p : text_encoder_->parameters()) {
        p.set_requires_grad(true);
    }
}

void VseModel::to(torch::Dtype dtype) {
    image_encoder_->to(dtype);
    text_encoder_->to(dtype);
}

std::string VseModel::parameter_hash() const {
    const auto joined = state_hash(*image_encoder_) + state_hash(*text_encoder_);
    return sha256_hex(joined.data(), joined.size());
}

void VseModel::save(const std::filesystem::path& path) const {
    Archive archive;
    archive.meta = {{"kind", "vse"},
                    {"config", config_.to_json()},
                    {"vocab", vocabulary_.tokens()},
                    {"vocab_hash", vocabulary_.hash()}};
    for (auto& [name, tensor] : named_state(*image_encoder_)) {
        archive.tensors.emplace_back("image." + name, tensor);
    }
    for (auto& [name, tensor] : named_state(*text_encoder_)) {
        archive.tensors.emplace_back("text." + name, tensor);
    }
    save_archive(path, archive);
}

VseModel VseModel::load(const std::filesystem::path& path) {
    auto archive = load_archive(path);
    if (archive.meta.value("kind", "") != "vse") {
        throw IoError(path.string() + " is not a VSE checkpoint");
    }
    auto config = VseConfig::from_json(archive.meta.at("config"));
    Vocabulary vocab(archive.meta.at("vocab").get<std::vector<std::string>>());
    if (vocab.hash() != archive.meta.at("vocab_hash").get<std::string>()) {
        throw IoError("vocabulary hash mismatch in " + path.string());
    }
    VseModel model(config, vocab);
    load_state(*model.image_encoder_, archive, "image.");
    load_state(*model.text_encoder_, archive, "text.");
    const auto& projection = archive.at("image.projection.weight");
    if (projection.size(0) != config.embed_dim) {
        throw IoError("checkpoint embedding dim does not match its config");
    }
    return model;
}

torch::Tensor triplet_loss_from_scores(const torch::Tensor& scores, double margin,
                                       const torch::Tensor& excluded) {
    if (scores.dim() != 2 || scores.size(0) != scores.size(1)) {
        throw ValidationError("similarity matrix must be square", "scores");
    }
    const auto b = scores.size(0);
    if (b < 2) {
        throw ValidationError("triplet loss needs a batch of at least 2 (no negatives exist)", "batch");
    }
    auto diagonal = scores.diagonal();
    // Row i: image i against every caption; column j: every image against caption j.
    auto cost_caption = (margin + scores - diagonal.view({b, 1})).clamp_min(0.0);
    auto cost_image = (margin + scores - diagonal.view({1, b})).clamp_min(0.0);
    auto ignore = torch::eye(b, torch::TensorOptions().dtype(torch::kBool));
    if (excluded.defined()) {
        ignore = ignore.logical_or(excluded.to(torch::kBool));
    }
    cost_caption = cost_caption.masked_fill(ignore, 0.0);
    cost_image = cost_image.masked_fill(ignore, 0.0);
    auto per_pair = std::get<0>(cost_caption.max(1)) + std::get<0>(cost_image.max(0));
    return per_pair.mean();
}

torch::Tensor triplet_loss(const torch::Tensor& images, const torch::Tensor& texts, double margin,
                           const torch::Tensor& excluded) {
    if (images.dim() != 2 || texts.sizes() != images.sizes()) {
        throw ValidationError("images and texts must both be [B, D]", "batch");
    }
    return triplet_loss_from_scores(images.matmul(texts.t()), margin, excluded);
}

std::vector<std::int64_t> retrieve(const torch::Tensor& query, const torch::Tensor& gallery,
                                   std::int64_t k) {
    if (gallery.dim() != 2 || gallery.size(0) == 0) {
        throw ValidationError("gallery must be a nonempty [N, D] matrix", "gallery");
    }
    auto scores = gallery.matmul(query.to(gallery.dtype())).to(torch::kFloat64).contiguous();
    const auto* s = scores.data_ptr<double>();
    std::vector<std::int64_t> order(static_cast<std::size_t>(gallery.size(0)));
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::int64_t a, std::int64_t b) { return s[a] > s[b]; });
    order.resize(static_cast<std::size_t>(std::clamp<std::int64_t>(k, 0, gallery.size(0))));
    return order;
}

}  // namespace openedit::vse
