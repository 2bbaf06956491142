// Copyright (C) 2026 The Open-Edit Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <string>
#include <utility>

#include <torch/torch.h>

#include "openedit/synthdata.hpp"
#include "openedit/vse.hpp"

namespace openedit::grounding {

using vse::FeatureMap;
using vse::TextEmbedding;

/// g[i,j] = <v^{i,j}, t>: raw, unclamped, possibly negative.
struct GroundingMap {
    torch::Tensor values;  // [S, S]
    std::string phrase;

    // Min-max normalized copy in [0,1] for display only (all zeros when flat).
    torch::Tensor normalized() const;
};

struct EditInstruction {
    synth::EditKind kind = synth::EditKind::change;
    std::string source_phrase;
    std::string target_phrase;  // change only
    int sign = 0;               // relative only: +1 strengthens, -1 weakens
    double alpha = 1.0;

    // Throws ValidationError listing every missing or extraneous field.
    void validate() const;
};

GroundingMap grounding_map(const FeatureMap& features, const TextEmbedding& text);

// v_m = v - alpha <v,t1> t1 + alpha <v,t1> t2 at every location.
FeatureMap change_attribute(const FeatureMap& features, const TextEmbedding& source,
                            const TextEmbedding& target, double alpha);
// v_m = v - alpha <v,t> t.
FeatureMap remove_concept(const FeatureMap& features, const TextEmbedding& removed, double alpha);
// v_m = v + sign * alpha <v,t> t, sign in {+1, -1}.
FeatureMap relative_attribute(const FeatureMap& features, const TextEmbedding& attribute,
                              double alpha, int sign);

/// Result of dispatching an instruction against a feature map.
struct AppliedEdit {
    FeatureMap edited;
    GroundingMap grounding;  // of the source phrase against the input map
    bool all_oov = false;    // some phrase had no in-vocabulary token
};

AppliedEdit apply_instruction(const FeatureMap& features, const EditInstruction& instruction,
                              const vse::VseModel& text_encoder);

// Same dispatch with already-encoded phrases (target ignored unless change).
FeatureMap apply_encoded(const FeatureMap& features, const EditInstruction& instruction,
                         const TextEmbedding& source, const TextEmbedding& target);

}  // namespace openedit::grounding
