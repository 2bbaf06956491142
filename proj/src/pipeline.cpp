// Copyright (C) 2026 The Open-Edit Authors
// SPDX-License-Identifier: Apache-2.0

#include "openedit/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include <fmt/format.h>

#include "openedit/archive.hpp"
#include "openedit/common.hpp"
#include "openedit/edgemap.hpp"
#include "openedit/image.hpp"
#include "openedit/log.hpp"

namespace openedit::pipeline {
namespace fs = std::filesystem;

nlohmann::json RunConfig::to_json() const {
    return {{"corpus_root", corpus_root.string()},
            {"run_dir", run_dir.string()},
            {"batch_size", batch_size},
            {"steps", steps},
            {"seed", seed},
            {"eval_every", eval_every},
            {"eval_images", eval_images},
            {"vse", vse.to_json()},
            {"vse_learning_rate", vse_learning_rate},
            {"vse_weight_decay", vse_weight_decay},
            {"vse_rectify_after", vse_rectify_after},
            {"decoder", decoder.to_json()},
            {"loss_weights", {{"perceptual", loss_weights.perceptual}, {"feature_matching", loss_weights.feature_matching}}},
            {"generator_learning_rate", generator_learning_rate},
            {"discriminator_learning_rate", discriminator_learning_rate},
            {"sample_every", sample_every}};
}

RunConfig RunConfig::from_json(const nlohmann::json& j) {
    RunConfig c;
    c.corpus_root = j.value("corpus_root", c.corpus_root.string());
    c.run_dir = j.value("run_dir", c.run_dir.string());
    c.batch_size = j.value("batch_size", c.batch_size);
    c.steps = j.value("steps", c.steps);
    c.seed = j.value("seed", c.seed);
    c.eval_every = j.value("eval_every", c.eval_every);
    c.eval_images = j.value("eval_images", c.eval_images);
    if (j.contains("vse")) {
        c.vse = vse::VseConfig::from_json(j.at("vse"));
    }
    c.vse_learning_rate = j.value("vse_learning_rate", c.vse_learning_rate);
    c.vse_weight_decay = j.value("vse_weight_decay", c.vse_weight_decay);
    c.vse_rectify_after = j.value("vse_rectify_after", c.vse_rectify_after);
    if (j.contains("decoder")) {
        c.decoder = decoder::DecoderConfig::from_json(j.at("decoder"));
    }
    if (j.contains("loss_weights")) {
        const auto& w = j.at("loss_weights");
        c.loss_weights.perceptual = w.value("perceptual", c.loss_weights.perceptual);
        c.loss_weights.feature_matching = w.value("feature_matching", c.loss_weights.feature_matching);
    }
    c.generator_learning_rate = j.value("generator_learning_rate", c.generator_learning_rate);
    c.discriminator_learning_rate = j.value("discriminator_learning_rate", c.discriminator_learning_rate);
    c.sample_every = j.value("sample_every", c.sample_every);
    return c;
}

namespace {

void check_run_config(const RunConfig& config) {
    if (config.batch_size < 2) {
        throw ValidationError("batch_size must be >= 2", "batch_size");
    }
    if (config.steps < 0) {
        throw ValidationError("steps must be >= 0", "steps");
    }
    if (config.eval_every < 1) {
        throw ValidationError("eval_every must be >= 1", "eval_every");
    }
    if (!(config.vse_rectify_after >= 0.0 && config.vse_rectify_after <= 1.0)) {
        throw ValidationError("vse_rectify_after must lie in [0, 1]", "vse_rectify_after");
    }
    if (config.run_dir.empty()) {
        throw ValidationError("run directory is required", "out");
    }
}

// Order-insensitive description of what a scene contains.
std::string content_key(const synth::SceneRecord& scene) {
    std::vector<std::string> parts;
    for (const auto& s : scene.spec.shapes) {
        parts.push_back(synth::phrase(s.color, s.kind));
    }
    std::sort(parts.begin(), parts.end());
    std::string key;
    for (const auto& p : parts) {
        key += p + ";";
    }
    return key;
}

torch::Tensor stack_images(const std::vector<synth::SceneRecord>& scenes, std::size_t limit) {
    std::vector<torch::Tensor> images;
    for (std::size_t i = 0; i < std::min(limit, scenes.size()); ++i) {
        images.push_back(scenes[i].image);
    }
    return torch::stack(images);
}

class MetricsLog {
public:
    MetricsLog(const fs::path& path, const MetricsCallback& callback) : out_(path, std::ios::trunc), callback_(callback) {
        if (!out_) {
            throw IoError("cannot write " + path.string());
        }
    }
    void write(const nlohmann::json& record) {
        out_ << record.dump() << "\n";
        out_.flush();
        if (callback_) {
            callback_(record);
        }
    }

private:
    std::ofstream out_;
    const MetricsCallback& callback_;
};

void prepare_run_dir(const RunConfig& config, const std::string& stage) {
    std::error_code ec;
    fs::create_directories(config.run_dir / "samples", ec);
    if (ec) {
        throw IoError("cannot create run directory " + config.run_dir.string() + ": " + ec.message());
    }
    auto j = config.to_json();
    j["stage"] = stage;
    std::ofstream out(config.run_dir / "config.json");
    if (!out) {
        throw IoError("cannot write " + (config.run_dir / "config.json").string());
    }
    out << j.dump(2) << "\n";
}

// Epoch-shuffled batches with random horizontal flips.
class BatchSampler {
public:
    BatchSampler(std::size_t size, std::uint64_t seed) : order_(size), rng_(seed) {
        std::iota(order_.begin(), order_.end(), 0);
        reshuffle();
    }
    std::vector<std::size_t> next(int batch) {
        std::vector<std::size_t> out;
        while (static_cast<int>(out.size()) < batch) {
            if (cursor_ == order_.size()) {
                reshuffle();
            }
            out.push_back(order_[cursor_++]);
        }
        return out;
    }
    bool coin() { return std::bernoulli_distribution(0.5)(rng_); }

private:
    void reshuffle() {
        std::shuffle(order_.begin(), order_.end(), rng_);
        cursor_ = 0;
    }
    std::vector<std::size_t> order_;
    std::size_t cursor_ = 0;
    std::mt19937_64 rng_;
};

torch::Tensor gather_batch(const std::vector<synth::SceneRecord>& scenes, const std::vector<std::size_t>& idx,
                           BatchSampler& sampler) {
    std::vector<torch::Tensor> images;
    for (auto i : idx) {
        auto img = scenes[i].image;
        images.push_back(sampler.coin() ? img.flip({2}) : img);
    }
    return torch::stack(images);
}

}  // namespace

double caption_to_image_recall(const vse::VseModel& model, const std::vector<synth::SceneRecord>& scenes) {
    if (scenes.empty()) {
        throw ValidationError("recall needs at least one scene", "scenes");
    }
    torch::NoGradGuard no_grad;
    std::vector<std::vector<std::string>> captions;
    std::vector<std::string> keys;
    for (const auto& s : scenes) {
        captions.push_back(s.caption);
        keys.push_back(content_key(s));
    }
    std::vector<torch::Tensor> pooled;
    constexpr std::size_t kChunk = 64;
    for (std::size_t i = 0; i < scenes.size(); i += kChunk) {
        std::vector<torch::Tensor> chunk;
        for (std::size_t k = i; k < std::min(scenes.size(), i + kChunk); ++k) {
            chunk.push_back(scenes[k].image);
        }
        pooled.push_back(vse::pool(model.encode_images(torch::stack(chunk)).features));
    }
    auto gallery = torch::cat(pooled);
    auto texts = model.encode_texts(captions);
    int hits = 0;
    for (std::size_t i = 0; i < scenes.size(); ++i) {
        auto top = vse::retrieve(texts[static_cast<std::int64_t>(i)], gallery, 1);
        hits += keys[static_cast<std::size_t>(top.front())] == keys[i] ? 1 : 0;
    }
    return static_cast<double>(hits) / static_cast<double>(scenes.size());
}

double reconstruction_l2(const torch::Tensor& a, const torch::Tensor& b) {
    if (a.sizes() != b.sizes()) {
        throw ValidationError("L2 needs same-shape images", "image");
    }
    return std::sqrt((a.to(torch::kFloat64) - b.to(torch::kFloat64)).pow(2).mean().item<double>());
}

TrainSummary train_vse(const RunConfig& config, const MetricsCallback& on_metrics) {
    check_run_config(config);
    auto train = synth::load_split(config.corpus_root, "train");
    auto val = synth::load_split(config.corpus_root, "val");
    if (train.size() < 2 || val.empty()) {
        throw ValidationError("corpus needs >= 2 training and >= 1 validation scenes", "corpus");
    }
    if (train.front().image.size(1) != config.vse.canvas) {
        throw ValidationError(fmt::format("corpus canvas {} does not match embedding canvas {}",
                                          train.front().image.size(1), config.vse.canvas),
                              "canvas");
    }
    prepare_run_dir(config, "vse");
    MetricsLog log(config.run_dir / "metrics.jsonl", on_metrics);

    torch::manual_seed(config.seed);
    std::vector<std::vector<std::string>> sentences;
    std::vector<std::string> keys;
    for (const auto& s : train) {
        sentences.push_back(s.caption);
        keys.push_back(content_key(s));
    }
    vse::VseModel model(config.vse, vse::Vocabulary::build(sentences));
    model.train_mode();
    std::vector<torch::Tensor> params = model.image_encoder()->parameters();
    for (auto& p : model.text_encoder()->parameters()) {
        params.push_back(p);
    }
    torch::optim::Adam optimizer(
        params, torch::optim::AdamOptions(config.vse_learning_rate).weight_decay(config.vse_weight_decay));
    BatchSampler sampler(train.size(), config.seed);
    const int batch = std::min<int>(config.batch_size, static_cast<int>(train.size()));

    TrainSummary summary;
    summary.best_checkpoint = config.run_dir / "ckpt-best.bin";
    summary.last_checkpoint = config.run_dir / "ckpt-last.bin";
    const int rectify_from = static_cast<int>(std::ceil(config.vse_rectify_after * config.steps));
    auto validate = [&](int step, double loss) {
        model.set_rectified(true);
        const double r1 = caption_to_image_recall(model, val);
        model.set_rectified(step + 1 >= rectify_from);
        nlohmann::json record{{"step", step}, {"val_r1", r1}};
        if (step > 0) {
            record["loss"] = loss;
        }
        log.write(record);
        log::info("vse step {} val R@1 {:.4f}", step, r1);
        if (step == 0) {
            summary.initial_metric = r1;
        }
        if (step == 0 || r1 > summary.best_metric) {
            summary.best_metric = r1;
            summary.best_step = step;
            model.save(summary.best_checkpoint);
        }
    };
    validate(0, 0.0);

    double running = 0.0;
    for (int step = 1; step <= config.steps; ++step) {
        model.set_rectified(step >= rectify_from);
        auto idx = sampler.next(batch);
        auto images = gather_batch(train, idx, sampler);
        std::vector<std::vector<std::string>> captions;
        auto excluded = torch::zeros({batch, batch}, torch::kBool);
        auto acc = excluded.accessor<bool, 2>();
        for (int i = 0; i < batch; ++i) {
            captions.push_back(train[idx[i]].caption);
            for (int j = 0; j < batch; ++j) {
                acc[i][j] = i != j && keys[idx[i]] == keys[idx[j]];
            }
        }
        optimizer.zero_grad();
        auto image_vecs = vse::pool(model.encode_images(images).features);
        auto text_vecs = model.encode_texts(captions);
        auto loss = vse::triplet_loss(image_vecs, text_vecs, config.vse.margin, excluded);
        const double value = loss.item<double>();
        if (!std::isfinite(value)) {
            throw DivergenceError(fmt::format("embedding loss became non-finite at step {}", step));
        }
        loss.backward();
        optimizer.step();
        running += value;
        if (step % config.eval_every == 0 || step == config.steps) {
            const int span = step % config.eval_every == 0 ? config.eval_every : step % config.eval_every;
            validate(step, running / span);
            running = 0.0;
        }
    }
    model.set_rectified(true);
    model.save(summary.last_checkpoint);
    return summary;
}

namespace {

double decoder_val_l2(decoder::DecoderModel& model, const vse::VseModel& encoder, const torch::Tensor& images) {
    torch::NoGradGuard no_grad;
    model.generator()->eval();
    auto features = encoder.encode_images(images).features;
    auto out = model.generator()->forward(features, edges::extract_edges_batch(images));
    double total = 0.0;
    for (std::int64_t i = 0; i < images.size(0); ++i) {
        total += reconstruction_l2(out[i], images[i]);
    }
    model.generator()->train();
    return total / static_cast<double>(images.size(0));
}

void save_sample_grid(const fs::path& path, decoder::DecoderModel& model, const vse::VseModel& encoder,
                      const torch::Tensor& images) {
    torch::NoGradGuard no_grad;
    model.generator()->eval();
    auto out = model.generator()->forward(encoder.encode_images(images).features, edges::extract_edges_batch(images));
    model.generator()->train();
    // One row per image: source | edges | reconstruction.
    auto edge_rgb = edges::extract_edges_batch(images).expand({-1, 3, -1, -1});
    auto rows = torch::cat({images, edge_rgb, out}, 3);                   // [N,3,H,3W]
    write_png(path, rows.permute({1, 0, 2, 3}).reshape({3, -1, rows.size(3)}));
}

}  // namespace

TrainSummary train_decoder(const RunConfig& input_config, const fs::path& vse_checkpoint,
                           const MetricsCallback& on_metrics) {
    RunConfig config = input_config;
    check_run_config(config);
    auto encoder = vse::VseModel::load(vse_checkpoint);
    encoder.freeze();
    config.decoder.feature_dim = encoder.config().embed_dim;
    config.decoder.grid = encoder.config().grid;
    if (config.decoder.canvas() != encoder.config().canvas) {
        throw ValidationError(fmt::format("decoder output {}px does not match embedding canvas {}px",
                                          config.decoder.canvas(), encoder.config().canvas),
                              "block_channels");
    }
    auto train = synth::load_split(config.corpus_root, "train");
    auto val = synth::load_split(config.corpus_root, "val");
    if (train.size() < 2 || val.empty()) {
        throw ValidationError("corpus needs >= 2 training and >= 1 validation scenes", "corpus");
    }
    prepare_run_dir(config, "decoder");
    MetricsLog log(config.run_dir / "metrics.jsonl", on_metrics);

    TrainSummary summary;
    summary.frozen_hash_before = encoder.parameter_hash();
    summary.best_checkpoint = config.run_dir / "ckpt-best.bin";
    summary.last_checkpoint = config.run_dir / "ckpt-last.bin";

    torch::manual_seed(config.seed);
    decoder::DecoderModel model(config.decoder);
    model.train_mode();
    auto g_params = model.generator()->parameters();
    auto d_params = model.discriminator()->parameters();
    auto make_g_opt = [&] {
        return torch::optim::Adam(g_params,
                                  torch::optim::AdamOptions(config.generator_learning_rate).betas({0.0, 0.9}));
    };
    auto make_d_opt = [&] {
        return torch::optim::Adam(d_params,
                                  torch::optim::AdamOptions(config.discriminator_learning_rate).betas({0.0, 0.9}));
    };
    auto g_opt = make_g_opt();
    auto d_opt = make_d_opt();
    const decoder::PerceptualMetric perceptual(encoder);
    BatchSampler sampler(train.size(), config.seed);
    const int batch = std::min<int>(config.batch_size, static_cast<int>(train.size()));
    const auto val_images = stack_images(val, static_cast<std::size_t>(std::max(1, config.eval_images)));
    const auto sample_images = stack_images(val, 4);

    auto validate = [&](int step, const nlohmann::json& losses) {
        const double l2 = decoder_val_l2(model, encoder, val_images);
        nlohmann::json record = losses;
        record["step"] = step;
        record["val_l2"] = l2;
        log.write(record);
        log::info("decoder step {} val L2 {:.4f}", step, l2);
        if (step == 0) {
            summary.initial_metric = l2;
        }
        if (step == 0 || l2 < summary.best_metric) {
            summary.best_metric = l2;
            summary.best_step = step;
            model.save(summary.best_checkpoint, summary.frozen_hash_before);
        }
    };
    validate(0, nlohmann::json::object());

    constexpr int kCollapseWindow = 100;
    constexpr double kCollapseDiscLoss = 1e-3;
    constexpr double kCollapseAdversarial = 10.0;
    constexpr int kMaxRollbacks = 3;
    int collapse_run = 0;
    auto rollback = [&](const std::string& reason, int step) {
        log::warn("decoder training diverged at step {} ({}); restoring step {} checkpoint", step, reason,
                     summary.best_step);
        if (++summary.rollbacks > kMaxRollbacks) {
            throw DivergenceError(fmt::format("decoder training diverged {} times (last at step {})",
                                              summary.rollbacks, step));
        }
        auto archive = load_archive(summary.best_checkpoint);
        {
            torch::NoGradGuard no_grad;
            load_state(*model.generator(), archive, "generator.");
            load_state(*model.discriminator(), archive, "discriminator.");
        }
        g_opt = make_g_opt();
        d_opt = make_d_opt();
        collapse_run = 0;
        log.write({{"step", step}, {"event", "rollback"}, {"reason", reason}, {"restored_step", summary.best_step}});
    };

    std::map<std::string, double> sums;
    int since_eval = 0;
    for (int step = 1; step <= config.steps; ++step) {
        auto idx = sampler.next(batch);
        auto real = gather_batch(train, idx, sampler);
        torch::Tensor features;
        {
            torch::NoGradGuard no_grad;
            features = encoder.encode_images(real).features;
        }
        // Rolling back cannot repair a broken frozen encoder.
        if (!torch::isfinite(features).all().item<bool>()) {
            throw DivergenceError(fmt::format("embedding checkpoint {} produces non-finite features at step {}",
                                              vse_checkpoint.string(), step));
        }
        auto edge_maps = edges::extract_edges_batch(real);
        try {
            // Discriminator update.
            torch::Tensor d_loss;
            {
                torch::Tensor fake;
                {
                    torch::NoGradGuard no_grad;
                    fake = model.generator()->forward(features, edge_maps);
                }
                auto real_out = model.discriminator()->forward(real);
                auto fake_out = model.discriminator()->forward(fake);
                std::vector<torch::Tensor> real_logits, fake_logits;
                for (std::size_t s = 0; s < real_out.size(); ++s) {
                    real_logits.push_back(real_out[s].logits);
                    fake_logits.push_back(fake_out[s].logits);
                }
                d_opt.zero_grad();
                d_loss = decoder::discriminator_loss(real_logits, fake_logits);
                require_finite(d_loss, "discriminator loss");
                d_loss.backward();
                d_opt.step();
            }
            // Generator update.
            auto fake = model.generator()->forward(features, edge_maps);
            auto fake_out = model.discriminator()->forward(fake);
            std::vector<std::vector<torch::Tensor>> real_features;
            {
                torch::NoGradGuard no_grad;
                for (auto& o : model.discriminator()->forward(real)) {
                    real_features.push_back(o.features);
                }
            }
            std::vector<torch::Tensor> fake_logits;
            std::vector<std::vector<torch::Tensor>> fake_features;
            for (auto& o : fake_out) {
                fake_logits.push_back(o.logits);
                fake_features.push_back(o.features);
            }
            g_opt.zero_grad();
            auto g = decoder::generator_loss(fake_logits, fake_features, real_features, fake, real,
                                             config.loss_weights, perceptual);
            g.total.backward();
            g_opt.step();

            const double d_value = d_loss.item<double>();
            const double adv = g.adversarial.item<double>();
            sums["d_loss"] += d_value;
            sums["g_loss"] += g.total.item<double>();
            sums["g_adversarial"] += adv;
            sums["g_perceptual"] += g.perceptual.item<double>();
            sums["g_feature_matching"] += g.feature_matching.item<double>();
            ++since_eval;
            collapse_run = d_value < kCollapseDiscLoss && adv > kCollapseAdversarial ? collapse_run + 1 : 0;
            if (collapse_run >= kCollapseWindow) {
                rollback("discriminator loss at zero with exploding adversarial loss", step);
            }
        } catch (const DivergenceError& e) {
            rollback(e.what(), step);
        }

        if (config.sample_every > 0 && step % config.sample_every == 0) {
            save_sample_grid(config.run_dir / "samples" / fmt::format("step-{:06d}.png", step), model, encoder,
                             sample_images);
        }
        if (step % config.eval_every == 0 || step == config.steps) {
            nlohmann::json losses = nlohmann::json::object();
            for (auto& [k, v] : sums) {
                losses[k] = since_eval > 0 ? v / since_eval : 0.0;
            }
            validate(step, losses);
            sums.clear();
            since_eval = 0;
        }
    }
    model.save(summary.last_checkpoint, summary.frozen_hash_before);
    save_sample_grid(config.run_dir / "samples" / "final.png", model, encoder, sample_images);
    summary.frozen_hash_after = encoder.parameter_hash();
    if (summary.frozen_hash_after != summary.frozen_hash_before) {
        throw std::logic_error("embedding parameters changed during decoder training");
    }
    return summary;
}

LoadedModels LoadedModels::load(const fs::path& vse_checkpoint, const fs::path& decoder_checkpoint) {
    auto encoder = vse::VseModel::load(vse_checkpoint);
    std::string trained_against;
    auto dec = decoder::DecoderModel::load(decoder_checkpoint, &trained_against);
    encoder.freeze();
    dec.freeze();
    if (!trained_against.empty() && trained_against != encoder.parameter_hash()) {
        throw ValidationError("decoder checkpoint " + decoder_checkpoint.string() +
                                  " was trained against a different embedding checkpoint",
                              "checkpoint");
    }
    if (dec.config().canvas() != encoder.config().canvas || dec.config().feature_dim != encoder.config().embed_dim) {
        throw ValidationError("decoder and embedding checkpoints have incompatible shapes", "checkpoint");
    }
    return LoadedModels{std::move(encoder), std::move(dec)};
}

namespace {

void check_cached(const LoadedModels& models, const sampleopt::PerturbationSet& cached) {
    auto shapes = models.decoder.generator()->perturbation_shapes();
    if (cached.tensors.size() != shapes.size()) {
        throw ValidationError("cached perturbations do not match the decoder", "session_id");
    }
    for (std::size_t i = 0; i < shapes.size(); ++i) {
        if (cached.tensors[i].sizes().vec() != shapes[i]) {
            throw ValidationError("cached perturbations do not match the decoder", "session_id");
        }
    }
}

const char* kOovWarning = "phrase '{}' has no known words; using the out-of-vocabulary embedding";

std::vector<std::string> oov_warnings(const sampleopt::EditContext& context) {
    std::vector<std::string> warnings;
    if (context.source.all_oov) {
        warnings.push_back(fmt::format(fmt::runtime(kOovWarning), context.instruction.source_phrase));
    }
    if (context.instruction.kind == synth::EditKind::change && context.target.all_oov) {
        warnings.push_back(fmt::format(fmt::runtime(kOovWarning), context.instruction.target_phrase));
    }
    return warnings;
}

struct Prepared {
    sampleopt::EditContext context;
    sampleopt::PerturbationSet perturbations;
    std::vector<double> trace;
    std::vector<std::string> warnings;
    bool optimized = false;
    bool diverged = false;
    double optimize_ms = 0.0;
};

Prepared prepare(const LoadedModels& models, const torch::Tensor& image,
                 const grounding::EditInstruction& optimize_for, const EditOptions& options,
                 const sampleopt::PerturbationSet* cached) {
    options.opt.validate();
    check_image(image, models.vse.config().canvas);
    torch::manual_seed(options.seed);
    Prepared p;
    p.context = sampleopt::EditContext::build(image, optimize_for, models.frozen());
    p.warnings = oov_warnings(p.context);
    if (cached != nullptr) {
        check_cached(models, *cached);
        p.perturbations = *cached;
    } else if (options.use_opt) {
        const auto started = std::chrono::steady_clock::now();
        auto result = sampleopt::optimize_perturbations(p.context, models.frozen(), options.opt);
        p.optimize_ms =
            std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - started).count();
        p.perturbations = std::move(result.perturbations);
        p.trace = std::move(result.trace);
        p.optimized = true;
        p.diverged = result.diverged;
        if (result.diverged) {
            p.warnings.push_back("perturbation optimization diverged; kept the lowest-loss perturbations");
        }
        if (result.timed_out) {
            p.warnings.push_back(fmt::format("perturbation optimization stopped at the {}s time limit",
                                             options.opt.time_limit_seconds));
        }
    } else {
        p.perturbations = sampleopt::PerturbationSet::zeros(models.decoder.generator()->perturbation_shapes());
    }
    return p;
}

}  // namespace

EditResult edit(const LoadedModels& models, const torch::Tensor& image, const grounding::EditInstruction& instruction,
                const EditOptions& options, const sampleopt::PerturbationSet* cached) {
    auto p = prepare(models, image, instruction, options, cached);
    torch::NoGradGuard no_grad;
    const auto& c = p.context;
    EditResult result;
    result.reconstruction = models.decoder.decode(c.features, c.edge_map, &p.perturbations);
    result.image_out = models.decoder.decode(grounding::apply_encoded(c.features, instruction, c.source, c.target),
                                             c.edge_map, &p.perturbations);
    result.grounding = grounding::grounding_map(c.features, c.source);
    result.all_oov = c.all_oov;
    result.loss_trace = std::move(p.trace);
    result.warnings = std::move(p.warnings);
    result.optimized = p.optimized;
    result.diverged = p.diverged;
    result.optimize_ms = p.optimize_ms;
    result.perturbations = std::move(p.perturbations);
    return result;
}

std::vector<double> default_alpha_grid() { return {0.0, 0.2, 0.4, 0.6, 0.8, 1.0}; }

std::vector<double> parse_alpha_grid(const std::string& text) {
    std::vector<double> grid;
    std::stringstream in(text);
    std::string item;
    while (std::getline(in, item, ',')) {
        std::size_t used = 0;
        double value = 0.0;
        try {
            value = std::stod(item, &used);
        } catch (const std::exception&) {
            used = 0;
        }
        if (used == 0 || used != item.size()) {
            throw ValidationError("alpha grid entry '" + item + "' is not a number", "grid");
        }
        grid.push_back(value);
    }
    if (grid.empty()) {
        throw ValidationError("alpha grid is empty", "grid");
    }
    return grid;
}

SweepResult sweep_alpha(const LoadedModels& models, const torch::Tensor& image,
                        const grounding::EditInstruction& instruction, std::vector<double> grid,
                        const EditOptions& options, const sampleopt::PerturbationSet* cached) {
    if (grid.empty()) {
        throw ValidationError("alpha grid is empty", "grid");
    }
    for (double a : grid) {
        if (!std::isfinite(a) || a < 0.0) {
            throw ValidationError("alpha grid values must be finite and >= 0", "grid");
        }
    }
    std::sort(grid.begin(), grid.end());
    grid.erase(std::unique(grid.begin(), grid.end()), grid.end());
    auto at_max = instruction;
    at_max.alpha = grid.back();
    auto p = prepare(models, image, at_max, options, cached);

    torch::NoGradGuard no_grad;
    const auto& c = p.context;
    SweepResult result;
    result.reconstruction = models.decoder.decode(c.features, c.edge_map, &p.perturbations);
    for (double a : grid) {
        auto step = instruction;
        step.alpha = a;
        result.frames.push_back(
            {a, models.decoder.decode(grounding::apply_encoded(c.features, step, c.source, c.target), c.edge_map,
                                      &p.perturbations)});
    }
    result.grounding = grounding::grounding_map(c.features, c.source);
    result.all_oov = c.all_oov;
    result.loss_trace = std::move(p.trace);
    result.warnings = std::move(p.warnings);
    result.optimized = p.optimized;
    result.optimize_ms = p.optimize_ms;
    result.perturbations = std::move(p.perturbations);
    return result;
}

EditScore score_edit(const torch::Tensor& reference, const torch::Tensor& edited, const torch::Tensor& mask,
                     synth::Color target) {
    check_image(reference);
    if (edited.sizes() != reference.sizes()) {
        throw ValidationError("edited and reference images differ in size", "image");
    }
    auto region = mask.to(torch::kBool);
    if (region.dim() != 2 || region.size(0) != reference.size(1) || region.size(1) != reference.size(2)) {
        throw ValidationError("mask must be [H,W] matching the image", "mask");
    }
    EditScore score;
    const auto after = masked_hue(edited, region);
    const auto before = masked_hue(reference, region);
    score.hue_to_target = after.defined ? circular_hue_distance(after.hue_degrees, synth::hue_degrees(target)) : 180.0;
    score.hue_shift =
        after.defined && before.defined ? circular_hue_distance(before.hue_degrees, after.hue_degrees) : 0.0;
    auto diff = (edited.to(torch::kFloat64) - reference.to(torch::kFloat64)).abs().mean(0);
    auto mean_over = [&](const torch::Tensor& m) {
        auto selected = diff.masked_select(m);
        return selected.numel() == 0 ? 0.0 : selected.mean().item<double>();
    };
    score.inside_change = mean_over(region);
    score.outside_change = mean_over(region.logical_not());
    score.success = score.hue_to_target < kHueSuccessDegrees &&
                    score.outside_change < kOutsideChangeRatio * score.inside_change;
    return score;
}

namespace {

std::vector<double> ranks(const std::vector<double>& v) {
    std::vector<std::size_t> order(v.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return v[a] < v[b]; });
    std::vector<double> r(v.size());
    for (std::size_t i = 0; i < order.size();) {
        std::size_t j = i;
        while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) {
            ++j;
        }
        const double average = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
        for (std::size_t k = i; k <= j; ++k) {
            r[order[k]] = average;
        }
        i = j + 1;
    }
    return r;
}

}  // namespace

double spearman(const std::vector<double>& x, const std::vector<double>& y) {
    if (x.size() != y.size() || x.size() < 2) {
        throw ValidationError("spearman needs two equal-length series of >= 2 values", "series");
    }
    auto rx = ranks(x);
    auto ry = ranks(y);
    const double n = static_cast<double>(x.size());
    const double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / n;
    const double my = std::accumulate(ry.begin(), ry.end(), 0.0) / n;
    double sxy = 0.0, sxx = 0.0, syy = 0.0;
    for (std::size_t i = 0; i < rx.size(); ++i) {
        sxy += (rx[i] - mx) * (ry[i] - my);
        sxx += (rx[i] - mx) * (rx[i] - mx);
        syy += (ry[i] - my) * (ry[i] - my);
    }
    if (sxx == 0.0 || syy == 0.0) {
        return 0.0;
    }
    return sxy / std::sqrt(sxx * syy);
}

namespace {

double mean_of(const std::vector<double>& v) {
    return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

}  // namespace

void EvalReport::recompute_aggregates() {
    for (auto& cell : cells) {
        cell.mean_l2 = mean_of(cell.l2);
        cell.mean_perceptual = mean_of(cell.perceptual);
    }
    std::vector<double> success, inside, outside;
    for (const auto& e : edits) {
        success.push_back(e.success ? 1.0 : 0.0);
        inside.push_back(e.inside_change);
        outside.push_back(e.outside_change);
    }
    edit_success_rate = mean_of(success);
    mean_inside_change = mean_of(inside);
    mean_outside_change = mean_of(outside);
}

nlohmann::json EvalReport::to_json() const {
    nlohmann::json j;
    j["split"] = split;
    j["cells"] = nlohmann::json::array();
    for (const auto& c : cells) {
        nlohmann::json rows = nlohmann::json::array();
        for (std::size_t i = 0; i < c.l2.size(); ++i) {
            rows.push_back({{"image_id", c.image_ids[i]}, {"l2", c.l2[i]}, {"perceptual", c.perceptual[i]}});
        }
        j["cells"].push_back({{"name", c.name},
                              {"present", c.present},
                              {"mean_l2", c.mean_l2},
                              {"mean_perceptual", c.mean_perceptual},
                              {"rows", rows}});
    }
    j["edits"] = nlohmann::json::array();
    for (const auto& e : edits) {
        j["edits"].push_back({{"case_id", e.case_id},
                              {"hue_to_target", e.hue_to_target},
                              {"hue_shift", e.hue_shift},
                              {"inside_change", e.inside_change},
                              {"outside_change", e.outside_change},
                              {"success", e.success}});
    }
    j["aggregates"] = {{"edit_success_rate", edit_success_rate},
                       {"mean_inside_change", mean_inside_change},
                       {"mean_outside_change", mean_outside_change},
                       {"edit_cases", edits.size()}};
    return j;
}

std::string EvalReport::to_markdown() const {
    std::string out = fmt::format("# Evaluation report ({} split)\n\n", split);
    out += "| cell | images | mean L2 | mean perceptual |\n|---|---|---|---|\n";
    for (const auto& c : cells) {
        if (c.present) {
            out += fmt::format("| {} | {} | {:.4f} | {:.4f} |\n", c.name, c.l2.size(), c.mean_l2, c.mean_perceptual);
        } else {
            out += fmt::format("| {} | absent | - | - |\n", c.name);
        }
    }
    out += fmt::format("\nEdit success: {:.1f}% of {} change cases; mean |dRGB| inside mask {:.4f}, outside {:.4f}\n",
                       100.0 * edit_success_rate, edits.size(), mean_inside_change, mean_outside_change);
    return out;
}

std::vector<synth::EditCase> select_change_cases(const std::vector<synth::SceneRecord>& scenes, int limit) {
    auto all = synth::derive_edit_cases(scenes, {synth::EditKind::change});
    if (limit <= 0 || all.empty()) {
        return {};
    }
    // One case per (scene, source shape), rotating through target colors.
    std::map<std::pair<std::size_t, std::string>, std::vector<std::size_t>> groups;
    std::vector<std::pair<std::size_t, std::string>> group_order;
    for (std::size_t i = 0; i < all.size(); ++i) {
        auto key = std::pair{all[i].scene_index, all[i].source_phrase};
        if (!groups.contains(key)) {
            group_order.push_back(key);
        }
        groups[key].push_back(i);
    }
    std::vector<std::size_t> primary;
    std::set<std::size_t> used;
    for (std::size_t g = 0; g < group_order.size(); ++g) {
        const auto& members = groups[group_order[g]];
        primary.push_back(members[g % members.size()]);
    }
    std::vector<std::size_t> chosen;
    const auto n = primary.size();
    const auto want = static_cast<std::size_t>(limit);
    if (n >= want) {
        for (std::size_t i = 0; i < want; ++i) {
            chosen.push_back(primary[i * n / want]);
        }
    } else {
        chosen = primary;
        used.insert(primary.begin(), primary.end());
        for (std::size_t i = 0; i < all.size() && chosen.size() < want; ++i) {
            if (!used.contains(i)) {
                chosen.push_back(i);
            }
        }
    }
    std::vector<synth::EditCase> out;
    for (auto i : chosen) {
        out.push_back(all[i]);
    }
    return out;
}

grounding::EditInstruction instruction_for(const synth::EditCase& edit_case, double alpha) {
    grounding::EditInstruction instruction;
    instruction.kind = edit_case.kind;
    instruction.source_phrase = edit_case.source_phrase;
    instruction.target_phrase = edit_case.target_phrase;
    instruction.sign = edit_case.sign;
    instruction.alpha = alpha;
    return instruction;
}

namespace {

std::string case_id(const synth::EditCase& c) {
    return fmt::format("{}:{}->{}", c.scene_id, c.source_phrase, c.target_phrase);
}

}  // namespace

EvalReport evaluate(const EvalOptions& options) {
    auto scenes = synth::load_split(options.corpus_root, options.split);
    if (scenes.empty()) {
        throw ValidationError("split '" + options.split + "' is empty", "split");
    }
    auto encoder = vse::VseModel::load(options.vse_checkpoint);
    encoder.freeze();
    const decoder::PerceptualMetric perceptual(encoder);
    const auto limit =
        options.max_images > 0 ? std::min<std::size_t>(scenes.size(), options.max_images) : scenes.size();
    const auto change_cases = synth::derive_edit_cases(scenes, {synth::EditKind::change});

    auto checkpoint_for = [&](const std::string& cell) -> std::optional<fs::path> {
        auto it = options.cells.find(cell);
        if (it == options.cells.end() && cell == "edge-opt") {
            it = options.cells.find("edge");
        }
        if (it == options.cells.end() || !fs::exists(it->second)) {
            return std::nullopt;
        }
        return it->second;
    };
    auto load_cell = [&](const fs::path& ckpt) -> std::optional<LoadedModels> {
        try {
            return LoadedModels::load(options.vse_checkpoint, ckpt);
        } catch (const std::exception& e) {
            log::warn("cannot load {}: {}", ckpt.string(), e.what());
            return std::nullopt;
        }
    };

    EvalReport report;
    report.split = options.split;
    for (const auto& name : options.cell_order) {
        EvalCell cell;
        cell.name = name;
        auto ckpt = checkpoint_for(name);
        std::optional<LoadedModels> models;
        if (ckpt) {
            models = load_cell(*ckpt);
        }
        if (!models) {
            log::warn("evaluation cell '{}' has no usable checkpoint; marked absent", name);
            report.cells.push_back(cell);
            continue;
        }
        cell.present = true;
        const bool optimize = name == "edge-opt";
        for (std::size_t i = 0; i < limit; ++i) {
            const auto& scene = scenes[i];
            torch::Tensor reconstruction;
            if (optimize) {
                // The reconstruction term is optimized jointly with the cycle of
                // the scene's first change edit.
                auto it = std::find_if(change_cases.begin(), change_cases.end(),
                                       [&](const auto& c) { return c.scene_index == i; });
                EditOptions edit_options{true, options.opt, options.seed};
                auto instruction = it != change_cases.end() ? instruction_for(*it, options.edit_alpha)
                                                            : grounding::EditInstruction{
                                                                  synth::EditKind::remove, "", "", 0, 0.0};
                if (it == change_cases.end()) {
                    instruction.source_phrase = synth::phrase(scene.spec.shapes.front().color,
                                                              scene.spec.shapes.front().kind);
                }
                reconstruction = edit(*models, scene.image, instruction, edit_options).reconstruction;
            } else {
                torch::NoGradGuard no_grad;
                reconstruction = models->decoder.decode(models->vse.encode_image(scene.image),
                                                        edges::extract_edges(scene.image));
            }
            torch::NoGradGuard no_grad;
            cell.image_ids.push_back(scene.id);
            cell.l2.push_back(reconstruction_l2(reconstruction, scene.image));
            cell.perceptual.push_back(perceptual.distance(reconstruction, scene.image).item<double>());
        }
        log::info("cell {}: {} images", name, cell.l2.size());
        report.cells.push_back(std::move(cell));
    }

    if (auto ckpt = checkpoint_for(options.edit_cell); ckpt && options.max_edit_cases > 0) {
        if (auto models = load_cell(*ckpt)) {
            EditOptions edit_options{options.edit_use_opt, options.opt, options.seed};
            for (const auto& c : select_change_cases(scenes, options.max_edit_cases)) {
                const auto& scene = scenes[c.scene_index];
                auto result = edit(*models, scene.image, instruction_for(c, options.edit_alpha), edit_options);
                auto target = synth::parse_phrase(c.target_phrase);
                auto score = score_edit(result.reconstruction, result.image_out, c.gt_mask, target->color);
                score.case_id = case_id(c);
                report.edits.push_back(score);
            }
        }
    }
    report.recompute_aggregates();
    return report;
}

}  // namespace openedit::pipeline
