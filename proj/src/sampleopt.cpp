// Copyright (C) 2026 The Open-Edit Authors
// SPDX-License-Identifier: Apache-2.0

#include "openedit/sampleopt.hpp"

#include <chrono>
#include <cmath>
#include <limits>

#include "openedit/common.hpp"

namespace openedit::sampleopt {

void OptConfig::validate() const {
    if (steps < 0) {
        throw ValidationError("steps must be >= 0", "steps");
    }
    for (auto [value, name] : {std::pair{learning_rate, "learning_rate"}, {perceptual_weight, "perceptual_weight"},
                               {reg_weight, "reg_weight"}, {rec_weight, "rec_weight"}, {cyc_weight, "cyc_weight"},
                               {time_limit_seconds, "time_limit_seconds"}}) {
        if (!std::isfinite(value) || value < 0.0) {
            throw ValidationError(std::string(name) + " must be finite and non-negative", name);
        }
    }
}

nlohmann::json OptConfig::to_json() const {
    return {{"steps", steps},           {"learning_rate", learning_rate}, {"perceptual_weight", perceptual_weight},
            {"reg_weight", reg_weight}, {"rec_weight", rec_weight},       {"cyc_weight", cyc_weight},
            {"time_limit_seconds", time_limit_seconds}};
}

EditContext EditContext::build(const torch::Tensor& image, const grounding::EditInstruction& instruction,
                               const FrozenModels& models) {
    instruction.validate();
    torch::NoGradGuard no_grad;
    EditContext context;
    context.image = image;
    context.features = models.vse.encode_image(image);
    context.edge_map = edges::extract_edges(image);
    context.instruction = instruction;
    context.source = models.vse.encode_phrase(instruction.source_phrase);
    context.all_oov = context.source.all_oov;
    if (instruction.kind == synth::EditKind::change) {
        context.target = models.vse.encode_phrase(instruction.target_phrase);
        context.all_oov = context.all_oov || context.target.all_oov;
    }
    return context;
}

CycleImages cycle_images(const EditContext& context, const FrozenModels& models,
                         const PerturbationSet& perturbations) {
    const auto& dec = models.decoder;
    CycleImages out;
    out.reconstruction = dec.decode(context.features, context.edge_map, &perturbations);
    if (!context.has_cycle()) {
        out.manipulated =
            dec.decode(grounding::apply_encoded(context.features, context.instruction, context.source, context.target),
                       context.edge_map, &perturbations);
        out.reconstruction_only = true;
        return out;
    }
    const double alpha = context.instruction.alpha;
    if (alpha == 0.0) {
        // The identity edit is its own inverse.
        out.manipulated = out.reconstruction;
        out.cycled = out.reconstruction;
        return out;
    }
    auto edited = grounding::change_attribute(context.features, context.source, context.target, alpha);
    out.manipulated = dec.decode(edited, context.edge_map, &perturbations);
    auto reencoded = vse::FeatureMap{models.vse.encode_images(out.manipulated.unsqueeze(0)).features.squeeze(0)};
    auto back = grounding::change_attribute(reencoded, context.target, context.source, alpha);
    out.cycled = dec.decode(back, context.edge_map, &perturbations);
    return out;
}

SampleLosses sample_losses(const torch::Tensor& image, const torch::Tensor& reconstruction,
                           const torch::Tensor& cycled, const PerturbationSet& perturbations,
                           const OptConfig& config, const decoder::PerceptualMetric& perceptual) {
    if (reconstruction.sizes() != image.sizes() || (cycled.defined() && cycled.sizes() != image.sizes())) {
        throw ValidationError("sample losses need same-shape images", "image");
    }
    auto image_features = [&] {
        torch::NoGradGuard no_grad;
        return perceptual.features(image);
    }();
    auto term = [&](const torch::Tensor& produced) {
        return (produced - image).abs().mean() +
               config.perceptual_weight * perceptual.distance_to(produced, image_features);
    };
    SampleLosses losses;
    losses.reconstruction = term(reconstruction);
    losses.cycle = cycled.defined() ? term(cycled) : torch::zeros({}, image.options());
    losses.regularization = torch::zeros({}, image.options());
    for (const auto& p : perturbations.tensors) {
        losses.regularization = losses.regularization + p.pow(2).sum();
    }
    losses.total = config.rec_weight * losses.reconstruction + config.cyc_weight * losses.cycle +
                   config.reg_weight * losses.regularization;
    return losses;
}

OptResult optimize_perturbations(const EditContext& context, const FrozenModels& models,
                                 const OptConfig& config, const PerturbationSet* initial) {
    config.validate();
    const auto dtype = context.features.values.scalar_type();
    auto shapes = models.decoder.generator()->perturbation_shapes();
    PerturbationSet current = initial != nullptr ? *initial : PerturbationSet::zeros(shapes, dtype);
    for (auto& t : current.tensors) {
        t = t.detach().clone().to(dtype).set_requires_grad(true);
    }

    OptResult result;
    result.reconstruction_only = !context.has_cycle();
    auto snapshot = [&] {
        PerturbationSet copy;
        for (const auto& t : current.tensors) {
            copy.tensors.push_back(t.detach().clone());
        }
        return copy;
    };
    result.perturbations = snapshot();
    if (config.steps == 0) {
        return result;
    }

    const decoder::PerceptualMetric perceptual(models.vse);
    torch::optim::Adam optimizer(current.tensors, torch::optim::AdamOptions(config.learning_rate));
    auto evaluate = [&] {
        auto images = cycle_images(context, models, current);
        return sample_losses(context.image, images.reconstruction, images.cycled, current, config, perceptual);
    };

    const auto started = std::chrono::steady_clock::now();
    double best = std::numeric_limits<double>::infinity();
    for (int step = 0; step < config.steps; ++step) {
        if (config.time_limit_seconds > 0.0 && step > 0 &&
            std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count() >
                config.time_limit_seconds) {
            result.timed_out = true;
            break;
        }
        optimizer.zero_grad();
        auto losses = evaluate();
        const double total = losses.total.item<double>();
        if (step == 0) {
            result.initial_total = total;
        }
        if (!std::isfinite(total) || total > 10.0 * result.initial_total) {
            result.diverged = true;
            break;
        }
        result.trace.push_back(total);
        if (total < best) {
            best = total;
            result.perturbations = snapshot();
        }
        losses.total.backward();
        optimizer.step();
    }
    if (!result.diverged) {
        torch::NoGradGuard no_grad;
        const double total = evaluate().total.item<double>();
        if (std::isfinite(total) && total < best) {
            best = total;
            result.perturbations = snapshot();
        }
    }
    result.final_total = best;
    return result;
}

}  // namespace openedit::sampleopt
