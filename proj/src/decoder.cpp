// Copyright (C) 2026 The Open-Edit Authors
// SPDX-License-Identifier: Apache-2.0

#include "openedit/decoder.hpp"

#include <fmt/format.h>
#include <fmt/ranges.h>

#include "openedit/archive.hpp"
#include "openedit/common.hpp"

namespace openedit::decoder {

namespace F = torch::nn::functional;

nlohmann::json DecoderConfig::to_json() const {
    return {{"feature_dim", feature_dim},     {"grid", grid},
            {"block_channels", block_channels}, {"spade_hidden", spade_hidden},
            {"use_edges", use_edges},         {"disc_channels", disc_channels},
            {"disc_scales", disc_scales}};
}

DecoderConfig DecoderConfig::from_json(const nlohmann::json& j) {
    DecoderConfig c;
    c.feature_dim = j.value("feature_dim", c.feature_dim);
    c.grid = j.value("grid", c.grid);
    c.block_channels = j.value("block_channels", c.block_channels);
    c.spade_hidden = j.value("spade_hidden", c.spade_hidden);
    c.use_edges = j.value("use_edges", c.use_edges);
    c.disc_channels = j.value("disc_channels", c.disc_channels);
    c.disc_scales = j.value("disc_scales", c.disc_scales);
    if (c.block_channels.size() < 2) {
        throw ValidationError("decoder needs at least two blocks", "block_channels");
    }
    return c;
}

PerturbationSet PerturbationSet::zeros(const std::vector<std::vector<std::int64_t>>& shapes,
                                       torch::Dtype dtype) {
    PerturbationSet set;
    for (const auto& shape : shapes) {
        set.tensors.push_back(torch::zeros(shape, dtype));
    }
    return set;
}

double PerturbationSet::squared_norm() const {
    double total = 0.0;
    for (const auto& t : tensors) {
        total += t.detach().to(torch::kFloat64).pow(2).sum().item<double>();
    }
    return total;
}

SpadeNormImpl::SpadeNormImpl(int channels, int hidden) {
    shared_ = register_module("shared", torch::nn::Conv2d(torch::nn::Conv2dOptions(1, hidden, 3).padding(1)));
    gamma_ = register_module("gamma", torch::nn::Conv2d(torch::nn::Conv2dOptions(hidden, channels, 3).padding(1)));
    beta_ = register_module("beta", torch::nn::Conv2d(torch::nn::Conv2dOptions(hidden, channels, 3).padding(1)));
    running_mean_ = register_buffer("running_mean", torch::zeros({channels}));
    running_var_ = register_buffer("running_var", torch::ones({channels}));
    reset_heads_to_identity();
}

void SpadeNormImpl::reset_heads_to_identity() {
    torch::NoGradGuard no_grad;
    gamma_->weight.zero_();
    gamma_->bias.fill_(1.0);
    beta_->weight.zero_();
    beta_->bias.zero_();
}

torch::Tensor SpadeNormImpl::forward(const torch::Tensor& x, const torch::Tensor& edges) {
    torch::Tensor mean, var;
    if (is_training()) {
        mean = x.mean({0, 2, 3});
        var = (x - mean.view({1, -1, 1, 1})).pow(2).mean({0, 2, 3});
        torch::NoGradGuard no_grad;
        running_mean_.mul_(1.0 - kMomentum).add_(mean.detach() * kMomentum);
        running_var_.mul_(1.0 - kMomentum).add_(var.detach() * kMomentum);
    } else {
        mean = running_mean_;
        var = running_var_;
    }
    auto sigma = torch::sqrt(var.clamp_min(1e-24));
    sigma = torch::where(sigma < kEpsilon, sigma + kEpsilon, sigma);
    auto normalized = (x - mean.view({1, -1, 1, 1})) / sigma.view({1, -1, 1, 1});

    auto resized = F::interpolate(
        edges.to(x.dtype()),
        F::InterpolateFuncOptions().size(std::vector<std::int64_t>{x.size(2), x.size(3)}).mode(torch::kNearest));
    auto hidden = torch::relu(shared_->forward(resized));
    return gamma_->forward(hidden) * normalized + beta_->forward(hidden);
}

torch::Tensor spade_normalize(const torch::Tensor& features, const torch::Tensor& edge_map,
                              SpadeNorm& site) {
    if (features.dim() != 4 || edge_map.dim() != 4 || edge_map.size(1) != 1 ||
        edge_map.size(0) != features.size(0)) {
        throw ValidationError("spade_normalize expects [N,C,h,w] features and [N,1,H,W] edges", "features");
    }
    return site->forward(features, edge_map);
}

SpadeResBlockImpl::SpadeResBlockImpl(int in_channels, int out_channels, int hidden)
    : learned_skip_(in_channels != out_channels) {
    norm0_ = register_module("norm0", SpadeNorm(in_channels, hidden));
    conv0_ = register_module("conv0", torch::nn::Conv2d(torch::nn::Conv2dOptions(in_channels, out_channels, 3).padding(1)));
    norm1_ = register_module("norm1", SpadeNorm(out_channels, hidden));
    conv1_ = register_module("conv1", torch::nn::Conv2d(torch::nn::Conv2dOptions(out_channels, out_channels, 3).padding(1)));
    if (learned_skip_) {
        norm_skip_ = register_module("norm_skip", SpadeNorm(in_channels, hidden));
        conv_skip_ = register_module(
            "conv_skip", torch::nn::Conv2d(torch::nn::Conv2dOptions(in_channels, out_channels, 1).bias(false)));
    }
}

torch::Tensor SpadeResBlockImpl::forward(const torch::Tensor& x, const torch::Tensor& edges) {
    auto act = [](const torch::Tensor& t) { return F::leaky_relu(t, F::LeakyReLUFuncOptions().negative_slope(0.2)); };
    auto dx = conv0_->forward(act(norm0_->forward(x, edges)));
    dx = conv1_->forward(act(norm1_->forward(dx, edges)));
    auto skip = learned_skip_ ? conv_skip_->forward(norm_skip_->forward(x, edges)) : x;
    return skip + dx;
}

GeneratorImpl::GeneratorImpl(const DecoderConfig& config) : config_(config) {
    int in = config.feature_dim;
    for (int i = 0; i < config.blocks(); ++i) {
        const int out = config.block_channels[static_cast<std::size_t>(i)];
        blocks_.push_back(register_module(fmt::format("block{}", i + 1), SpadeResBlock(in, out, config.spade_hidden)));
        in = out;
    }
    to_rgb_ = register_module("to_rgb", torch::nn::Conv2d(torch::nn::Conv2dOptions(in, 3, 3).padding(1)));
}

std::vector<std::vector<std::int64_t>> GeneratorImpl::perturbation_shapes() const {
    std::vector<std::vector<std::int64_t>> shapes;
    for (int i = 0; i + 1 < config_.blocks(); ++i) {
        const std::int64_t side = static_cast<std::int64_t>(config_.grid) << i;
        shapes.push_back({config_.block_channels[static_cast<std::size_t>(i)], side, side});
    }
    return shapes;
}

torch::Tensor GeneratorImpl::forward(const torch::Tensor& features, const torch::Tensor& edges,
                                     const PerturbationSet* perturbations) {
    if (features.dim() != 4 || features.size(1) != config_.feature_dim || features.size(2) != config_.grid ||
        features.size(3) != config_.grid) {
        throw ValidationError(fmt::format("decoder expects features [N,{0},{1},{1}]", config_.feature_dim, config_.grid),
                              "features");
    }
    const auto shapes = perturbation_shapes();
    if (perturbations != nullptr && perturbations->tensors.size() != shapes.size()) {
        throw ValidationError(fmt::format("expected {} perturbation tensors, got {}", shapes.size(),
                                          perturbations->tensors.size()),
                              "perturbations");
    }
    auto conditioning = config_.use_edges ? edges.to(features.dtype()) : torch::zeros_like(edges, features.options());

    auto x = features;
    for (int i = 0; i < config_.blocks(); ++i) {
        if (i > 0) {
            x = F::interpolate(x, F::InterpolateFuncOptions().scale_factor(std::vector<double>{2.0, 2.0}).mode(torch::kNearest));
        }
        x = blocks_[static_cast<std::size_t>(i)]->forward(x, conditioning);
        if (perturbations != nullptr && i + 1 < config_.blocks()) {
            const auto& p = perturbations->tensors[static_cast<std::size_t>(i)];
            const auto& expected = shapes[static_cast<std::size_t>(i)];
            const bool batched = p.dim() == 4;
            auto tail = batched ? p.sizes().slice(1) : p.sizes();
            if ((p.dim() != 3 && p.dim() != 4) || tail.vec() != expected ||
                (batched && p.size(0) != x.size(0))) {
                throw ValidationError(fmt::format("perturbation for block {} must be [{}], got [{}]", i + 1,
                                                  fmt::join(expected, ","), fmt::join(p.sizes(), ",")),
                                      "perturbations");
            }
            x = x + (batched ? p : p.unsqueeze(0));
        }
    }
    x = F::leaky_relu(x, F::LeakyReLUFuncOptions().negative_slope(0.2));
    return torch::sigmoid(to_rgb_->forward(x));
}

PatchDiscriminatorImpl::PatchDiscriminatorImpl(int channels) {
    const std::vector<std::array<int, 3>> spec{
        {3, channels, 2}, {channels, channels * 2, 2}, {channels * 2, channels * 4, 1}, {channels * 4, 1, 1}};
    for (std::size_t i = 0; i < spec.size(); ++i) {
        const auto [in, out, stride] = spec[i];
        layers_.push_back(register_module(
            fmt::format("conv{}", i), torch::nn::Conv2d(torch::nn::Conv2dOptions(in, out, 4).stride(stride).padding(1))));
    }
}

DiscriminatorOutput PatchDiscriminatorImpl::forward(const torch::Tensor& images) {
    DiscriminatorOutput out;
    auto x = images;
    for (std::size_t i = 0; i + 1 < layers_.size(); ++i) {
        x = F::leaky_relu(layers_[i]->forward(x), F::LeakyReLUFuncOptions().negative_slope(0.2));
        out.features.push_back(x);
    }
    out.logits = layers_.back()->forward(x);
    return out;
}

MultiScaleDiscriminatorImpl::MultiScaleDiscriminatorImpl(int channels, int scales) {
    for (int i = 0; i < scales; ++i) {
        scales_.push_back(register_module(fmt::format("scale{}", i), PatchDiscriminator(channels)));
    }
}

std::vector<DiscriminatorOutput> MultiScaleDiscriminatorImpl::forward(const torch::Tensor& images) {
    std::vector<DiscriminatorOutput> outputs;
    auto x = images;
    for (std::size_t i = 0; i < scales_.size(); ++i) {
        if (i > 0) {
            x = F::avg_pool2d(x, F::AvgPool2dFuncOptions(3).stride(2).padding(1).count_include_pad(false));
        }
        outputs.push_back(scales_[i]->forward(x));
    }
    return outputs;
}

std::vector<torch::Tensor> PerceptualMetric::features(const torch::Tensor& images) const {
    auto batch = images.dim() == 3 ? images.unsqueeze(0) : images;
    return encoder_->encode_images(batch).stages;
}

torch::Tensor PerceptualMetric::distance_to(const torch::Tensor& a,
                                            const std::vector<torch::Tensor>& b_features) const {
    auto a_features = features(a);
    if (a_features.size() != b_features.size()) {
        throw ValidationError("perceptual feature lists differ in length", "features");
    }
    auto total = torch::zeros({}, a.options());
    for (std::size_t k = 0; k < a_features.size(); ++k) {
        total = total + (a_features[k] - b_features[k]).abs().mean();
    }
    return total;
}

torch::Tensor PerceptualMetric::distance(const torch::Tensor& a, const torch::Tensor& b) const {
    if (a.sizes() != b.sizes()) {
        throw ValidationError("perceptual distance needs same-shape images", "image");
    }
    return distance_to(a, features(b));
}

GeneratorLoss generator_loss(const std::vector<torch::Tensor>& fake_logits,
                             const std::vector<std::vector<torch::Tensor>>& fake_features,
                             const std::vector<std::vector<torch::Tensor>>& real_features,
                             const torch::Tensor& fake_images, const torch::Tensor& real_images,
                             const LossWeights& weights, const PerceptualMetric& perceptual) {
    if (fake_logits.empty() || fake_features.size() != real_features.size() ||
        fake_features.size() != fake_logits.size()) {
        throw ValidationError("discriminator outputs must cover the same scales", "features");
    }
    if (weights.perceptual < 0.0 || weights.feature_matching < 0.0) {
        throw ValidationError("loss weights must be non-negative", "weights");
    }
    const auto scales = static_cast<double>(fake_logits.size());
    GeneratorLoss loss;
    loss.adversarial = torch::zeros({}, fake_images.options());
    loss.feature_matching = torch::zeros({}, fake_images.options());
    for (std::size_t s = 0; s < fake_logits.size(); ++s) {
        loss.adversarial = loss.adversarial - fake_logits[s].mean() / scales;
        if (fake_features[s].size() != real_features[s].size()) {
            throw ValidationError("feature lists differ in length", "features");
        }
        for (std::size_t k = 0; k < fake_features[s].size(); ++k) {
            loss.feature_matching =
                loss.feature_matching + (fake_features[s][k] - real_features[s][k].detach()).abs().mean() / scales;
        }
    }
    loss.perceptual = perceptual.distance(fake_images, real_images);
    require_finite(loss.adversarial, "adversarial loss");
    require_finite(loss.perceptual, "perceptual loss");
    require_finite(loss.feature_matching, "feature-matching loss");
    loss.total = loss.adversarial + weights.perceptual * loss.perceptual +
                 weights.feature_matching * loss.feature_matching;
    return loss;
}

torch::Tensor discriminator_loss(const std::vector<torch::Tensor>& real_logits,
                                 const std::vector<torch::Tensor>& fake_logits) {
    if (real_logits.empty() || real_logits.size() != fake_logits.size()) {
        throw ValidationError("real and fake logits must cover the same scales", "logits");
    }
    auto total = torch::zeros({}, real_logits.front().options());
    for (std::size_t s = 0; s < real_logits.size(); ++s) {
        auto real_term = -torch::clamp_max(real_logits[s] - 1.0, 0.0).mean();
        auto fake_term = -torch::clamp_max(-fake_logits[s] - 1.0, 0.0).mean();
        total = total + (real_term + fake_term) / static_cast<double>(real_logits.size());
    }
    require_finite(total, "discriminator loss");
    return total;
}

DecoderModel::DecoderModel(DecoderConfig config) : config_(std::move(config)) {
    generator_ = Generator(config_);
    discriminator_ = MultiScaleDiscriminator(config_.disc_channels, config_.disc_scales);
}

torch::Tensor DecoderModel::decode(const vse::FeatureMap& features, const edges::EdgeMap& edge_map,
                                   const PerturbationSet* perturbations) const {
    if (edge_map.values.dim() != 2) {
        throw ValidationError("edge map must be [H,W]", "edges");
    }
    return generator_.ptr()
        ->forward(features.values.unsqueeze(0), edge_map.values.unsqueeze(0).unsqueeze(0), perturbations)
        .squeeze(0);
}

void DecoderModel::freeze() {
    generator_->eval();
    discriminator_->eval();
    for (auto& p : generator_->parameters()) {
        p.set_requires_grad(false);
    }
    for (auto& p : discriminator_->parameters()) {
        p.set_requires_grad(false);
    }
}

void DecoderModel::train_mode() {
    generator_->train();
    discriminator_->train();
    for (auto& p : generator_->parameters()) {
        p.set_requires_grad(true);
    }
    for (auto& p : discriminator_->parameters()) {
        p.set_requires_grad(true);
    }
}

void DecoderModel::to(torch::Dtype dtype) {
    generator_->to(dtype);
    discriminator_->to(dtype);
}

std::string DecoderModel::generator_hash() const { return state_hash(*generator_); }

std::string DecoderModel::parameter_hash() const {
    const auto joined = state_hash(*generator_) + state_hash(*discriminator_);
    return sha256_hex(joined.data(), joined.size());
}

void DecoderModel::save(const std::filesystem::path& path, const std::string& vse_hash) const {
    Archive archive;
    archive.meta = {{"kind", "decoder"}, {"config", config_.to_json()}, {"vse_hash", vse_hash}};
    for (auto& [name, tensor] : named_state(*generator_)) {
        archive.tensors.emplace_back("generator." + name, tensor);
    }
    for (auto& [name, tensor] : named_state(*discriminator_)) {
        archive.tensors.emplace_back("discriminator." + name, tensor);
    }
    save_archive(path, archive);
}

DecoderModel DecoderModel::load(const std::filesystem::path& path, std::string* vse_hash) {
    auto archive = load_archive(path);
    if (archive.meta.value("kind", "") != "decoder") {
        throw IoError(path.string() + " is not a decoder checkpoint");
    }
    DecoderModel model(DecoderConfig::from_json(archive.meta.at("config")));
    load_state(*model.generator_, archive, "generator.");
    load_state(*model.discriminator_, archive, "discriminator.");
    if (vse_hash != nullptr) {
        *vse_hash = archive.meta.value("vse_hash", "");
    }
    return model;
}

}  // namespace openedit::decoder
