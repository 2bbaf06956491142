// Copyright (C) 2026 The Open-Edit Authors
// SPDX-License-Identifier: Apache-2.0

#include "openedit/grounding.hpp"

#include <cmath>
#include <vector>

#include <fmt/format.h>
#include <fmt/ranges.h>

#include "openedit/common.hpp"

namespace openedit::grounding {

namespace {

void check_operands(const FeatureMap& features, const TextEmbedding& text, double alpha) {
    if (!features.values.defined() || features.values.dim() != 3) {
        throw ValidationError("feature map must be [D,S,S]", "features");
    }
    if (!text.values.defined() || text.values.dim() != 1 || text.values.size(0) != features.channels()) {
        throw ValidationError(fmt::format("text embedding dim must equal feature channels ({})",
                                          features.channels()),
                              "text");
    }
    if (!std::isfinite(alpha) || alpha < 0.0) {
        throw ValidationError("alpha must be finite and non-negative", "alpha");
    }
    if (!torch::isfinite(features.values).all().item<bool>() ||
        !torch::isfinite(text.values).all().item<bool>()) {
        throw ValidationError("non-finite values in feature map or text embedding", "features");
    }
}

// <v^{i,j}, t> as an [S,S] map.
torch::Tensor coefficients(const torch::Tensor& values, const torch::Tensor& t) {
    return torch::einsum("dij,d->ij", {values, t.to(values.dtype())});
}

// v + scale * <v, t_ground> * direction, per location.
torch::Tensor shift_along(const torch::Tensor& values, const torch::Tensor& t_ground,
                          const torch::Tensor& direction, double scale) {
    auto g = coefficients(values, t_ground);
    return values + (scale * g).unsqueeze(0) * direction.to(values.dtype()).view({-1, 1, 1});
}

}  // namespace

torch::Tensor GroundingMap::normalized() const {
    auto lo = values.min();
    auto hi = values.max();
    auto range = hi - lo;
    if (range.item<double>() <= 0.0) {
        return torch::zeros_like(values);
    }
    return (values - lo) / range;
}

void EditInstruction::validate() const {
    std::vector<std::string> problems;
    if (source_phrase.empty()) {
        problems.emplace_back("source_phrase is required");
    }
    switch (kind) {
        case synth::EditKind::change:
            if (target_phrase.empty()) {
                problems.emplace_back("target_phrase is required for change");
            }
            if (sign != 0) {
                problems.emplace_back("sign is only valid for relative");
            }
            break;
        case synth::EditKind::remove:
            if (!target_phrase.empty()) {
                problems.emplace_back("target_phrase is not allowed for remove");
            }
            if (sign != 0) {
                problems.emplace_back("sign is only valid for relative");
            }
            break;
        case synth::EditKind::relative:
            if (!target_phrase.empty()) {
                problems.emplace_back("target_phrase is not allowed for relative");
            }
            if (sign != 1 && sign != -1) {
                problems.emplace_back("sign must be +1 or -1 for relative");
            }
            break;
    }
    if (!std::isfinite(alpha) || alpha < 0.0) {
        problems.emplace_back("alpha must be finite and >= 0");
    }
    if (!problems.empty()) {
        std::string field = problems.front().substr(0, problems.front().find(' '));
        throw ValidationError(fmt::format("malformed instruction: {}", fmt::join(problems, "; ")), field);
    }
}

GroundingMap grounding_map(const FeatureMap& features, const TextEmbedding& text) {
    check_operands(features, text, 0.0);
    return {coefficients(features.values, text.values), text.source_phrase};
}

FeatureMap change_attribute(const FeatureMap& features, const TextEmbedding& source,
                            const TextEmbedding& target, double alpha) {
    check_operands(features, source, alpha);
    check_operands(features, target, alpha);
    // Both terms share the source coefficient, so (t2 - t1) is exact zero
    // when the phrases coincide.
    auto direction = target.values.to(features.values.dtype()) - source.values.to(features.values.dtype());
    return {shift_along(features.values, source.values, direction, alpha)};
}

FeatureMap remove_concept(const FeatureMap& features, const TextEmbedding& removed, double alpha) {
    check_operands(features, removed, alpha);
    return {shift_along(features.values, removed.values, removed.values, -alpha)};
}

FeatureMap relative_attribute(const FeatureMap& features, const TextEmbedding& attribute,
                              double alpha, int sign) {
    check_operands(features, attribute, alpha);
    if (sign != 1 && sign != -1) {
        throw ValidationError("sign must be +1 or -1", "sign");
    }
    return {shift_along(features.values, attribute.values, attribute.values, sign * alpha)};
}

FeatureMap apply_encoded(const FeatureMap& features, const EditInstruction& instruction,
                         const TextEmbedding& source, const TextEmbedding& target) {
    switch (instruction.kind) {
        case synth::EditKind::change:
            return change_attribute(features, source, target, instruction.alpha);
        case synth::EditKind::remove:
            return remove_concept(features, source, instruction.alpha);
        case synth::EditKind::relative:
            return relative_attribute(features, source, instruction.alpha, instruction.sign);
    }
    throw ValidationError("unknown edit kind", "kind");
}

AppliedEdit apply_instruction(const FeatureMap& features, const EditInstruction& instruction,
                              const vse::VseModel& text_encoder) {
    instruction.validate();
    torch::NoGradGuard no_grad;
    auto source = text_encoder.encode_phrase(instruction.source_phrase);
    TextEmbedding target;
    bool all_oov = source.all_oov;
    if (instruction.kind == synth::EditKind::change) {
        target = text_encoder.encode_phrase(instruction.target_phrase);
        all_oov = all_oov || target.all_oov;
    }
    AppliedEdit result{apply_encoded(features, instruction, source, target),
                       grounding_map(features, source), all_oov};
    return result;
}

}  // namespace openedit::grounding
