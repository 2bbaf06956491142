// Copyright (C) 2026 The Open-Edit Authors
// SPDX-License-Identifier: Apache-2.0

#include "support/doctest_torch.hpp"

#include "openedit/common.hpp"
#include "openedit/sampleopt.hpp"
#include "support/test_support.hpp"

using namespace openedit;
using namespace openedit::sampleopt;

namespace {

// Grid 2 on a 16px canvas keeps every forward pass cheap.
struct Miniature {
    vse::VseModel vse;
    decoder::DecoderModel decoder;
    torch::Tensor image;

    explicit Miniature(torch::Dtype dtype = torch::kFloat32, std::uint64_t seed = 17)
        : vse(make_vse(seed)), decoder(openedit::testing::small_decoder_config(2, 8)) {
        {
            torch::NoGradGuard no_grad;
            for (auto& p : decoder.generator()->parameters()) {
                p.add_(torch::randn_like(p) * 0.1);
            }
        }
        vse.to(dtype);
        decoder.to(dtype);
        vse.freeze();
        decoder.freeze();
        image = synth::generate_scene(openedit::testing::two_shape_spec(16)).image.to(dtype);
    }

    static vse::VseModel make_vse(std::uint64_t seed) {
        torch::manual_seed(seed);
        return vse::VseModel(openedit::testing::small_vse_config(2, 8, false), openedit::testing::palette_vocabulary());
    }

    FrozenModels models() const { return {vse, decoder}; }
};

grounding::EditInstruction change(double alpha) {
    return {synth::EditKind::change, "red circle", "blue circle", 0, alpha};
}

}  // namespace

TEST_SUITE("sampleopt") {

TEST_CASE("regularizer hand cases") {
    Miniature m;
    auto shapes = m.decoder.generator()->perturbation_shapes();
    auto set = decoder::PerturbationSet::zeros(shapes);
    const decoder::PerceptualMetric perceptual(m.vse);
    OptConfig config;

    auto zero = sample_losses(m.image, m.image, m.image, set, config, perceptual);
    CHECK(zero.reconstruction.item<double>() == 0.0);
    CHECK(zero.cycle.item<double>() == 0.0);
    CHECK(zero.regularization.item<double>() == 0.0);
    CHECK(zero.total.item<double>() == 0.0);

    set.tensors[1][2][1][0] = 2.0;
    auto single = sample_losses(m.image, m.image, m.image, set, config, perceptual);
    CHECK(single.regularization.item<double>() == 4.0);
    CHECK(single.total.item<double>() == doctest::Approx(config.reg_weight * 4.0).epsilon(1e-9));

    torch::manual_seed(1);
    for (auto& t : set.tensors) {
        t.copy_(torch::randn_like(t));
    }
    const double base = sample_losses(m.image, m.image, m.image, set, config, perceptual).regularization.item<double>();
    for (auto& t : set.tensors) {
        t.mul_(2.0);
    }
    const double doubled = sample_losses(m.image, m.image, m.image, set, config, perceptual).regularization.item<double>();
    CHECK(doubled == doctest::Approx(4.0 * base).epsilon(1e-6));

    CHECK_THROWS_AS(sample_losses(m.image, torch::rand({3, 8, 8}), m.image, set, config, perceptual), ValidationError);
}

TEST_CASE("loss terms follow their definitions") {
    Miniature m;
    const decoder::PerceptualMetric perceptual(m.vse);
    auto set = decoder::PerturbationSet::zeros(m.decoder.generator()->perturbation_shapes());
    torch::manual_seed(3);
    auto rec = torch::rand_like(m.image);
    auto cyc = torch::rand_like(m.image);
    OptConfig config;
    config.perceptual_weight = 0.5;
    auto losses = sample_losses(m.image, rec, cyc, set, config, perceptual);
    const double rec_expected = (rec - m.image).abs().mean().item<double>() +
                                0.5 * perceptual.distance(rec, m.image).item<double>();
    const double cyc_expected = (cyc - m.image).abs().mean().item<double>() +
                                0.5 * perceptual.distance(cyc, m.image).item<double>();
    CHECK(losses.reconstruction.item<double>() == doctest::Approx(rec_expected).epsilon(1e-6));
    CHECK(losses.cycle.item<double>() == doctest::Approx(cyc_expected).epsilon(1e-6));
    CHECK(losses.total.item<double>() == doctest::Approx(rec_expected + cyc_expected).epsilon(1e-6));
    // No cycle image: the term is zero.
    CHECK(sample_losses(m.image, rec, torch::Tensor(), set, config, perceptual).cycle.item<double>() == 0.0);
}

TEST_CASE("alpha = 0 cycle is the reconstruction") {
    Miniature m;
    auto context = EditContext::build(m.image, change(0.0), m.models());
    auto zeros = decoder::PerturbationSet::zeros(m.decoder.generator()->perturbation_shapes());
    auto images = cycle_images(context, m.models(), zeros);
    CHECK_FALSE(images.reconstruction_only);
    CHECK(torch::equal(images.manipulated, images.reconstruction));
    CHECK(torch::equal(images.cycled, images.reconstruction));
    // Untrained zero perturbations reproduce the plain decode.
    CHECK(torch::equal(images.reconstruction, m.decoder.decode(context.features, context.edge_map)));
}

TEST_CASE("a real change produces distinct manipulated and cycled images") {
    Miniature m;
    auto context = EditContext::build(m.image, change(1.0), m.models());
    auto zeros = decoder::PerturbationSet::zeros(m.decoder.generator()->perturbation_shapes());
    auto images = cycle_images(context, m.models(), zeros);
    CHECK(images.cycled.defined());
    CHECK_FALSE(torch::equal(images.manipulated, images.reconstruction));
}

TEST_CASE("remove and relative instructions run reconstruction-only") {
    Miniature m;
    auto zeros = decoder::PerturbationSet::zeros(m.decoder.generator()->perturbation_shapes());
    grounding::EditInstruction remove{synth::EditKind::remove, "red circle", "", 0, 1.0};
    auto images = cycle_images(EditContext::build(m.image, remove, m.models()), m.models(), zeros);
    CHECK(images.reconstruction_only);
    CHECK_FALSE(images.cycled.defined());
    CHECK(images.manipulated.defined());

    grounding::EditInstruction relative{synth::EditKind::relative, "red", "", -1, 1.0};
    OptConfig config;
    config.steps = 3;
    auto result = optimize_perturbations(EditContext::build(m.image, relative, m.models()), m.models(), config);
    CHECK(result.reconstruction_only);
    CHECK(result.trace.size() == 3);
}

TEST_CASE("zero steps keeps zero perturbations and an empty trace") {
    Miniature m;
    OptConfig config;
    config.steps = 0;
    auto context = EditContext::build(m.image, change(1.0), m.models());
    auto result = optimize_perturbations(context, m.models(), config);
    CHECK(result.trace.empty());
    CHECK(result.perturbations.squared_norm() == 0.0);
    REQUIRE(result.perturbations.tensors.size() == 3);
    auto edited = grounding::change_attribute(context.features, context.source, context.target, 1.0);
    CHECK(torch::equal(m.decoder.decode(edited, context.edge_map, &result.perturbations),
                       m.decoder.decode(edited, context.edge_map)));
}

TEST_CASE("optimization leaves every model parameter untouched") {
    Miniature m;
    const auto vse_before = m.vse.parameter_hash();
    const auto dec_before = m.decoder.parameter_hash();
    OptConfig config;
    config.steps = 10;
    auto result = optimize_perturbations(EditContext::build(m.image, change(1.0), m.models()), m.models(), config);
    CHECK(m.vse.parameter_hash() == vse_before);
    CHECK(m.decoder.parameter_hash() == dec_before);
    CHECK(result.trace.size() == 10);
    CHECK(result.final_total <= result.initial_total);
    CHECK(result.perturbations.squared_norm() > 0.0);
    for (const auto& t : result.perturbations.tensors) {
        CHECK_FALSE(t.requires_grad());
    }
}

TEST_CASE("the regularizer alone pulls perturbations toward zero") {
    Miniature m;
    auto init = decoder::PerturbationSet::zeros(m.decoder.generator()->perturbation_shapes());
    for (auto& t : init.tensors) {
        t.fill_(1.0);
    }
    OptConfig config;
    config.steps = 20;
    config.rec_weight = 0.0;
    config.cyc_weight = 0.0;
    auto result = optimize_perturbations(EditContext::build(m.image, change(1.0), m.models()), m.models(), config, &init);
    REQUIRE(result.trace.size() == 20);
    for (std::size_t i = 1; i < result.trace.size(); ++i) {
        CHECK(result.trace[i] < result.trace[i - 1]);
    }
    CHECK(result.perturbations.squared_norm() < init.squared_norm());
}

TEST_CASE("gradient of the total with respect to the perturbations") {
    Miniature m(torch::kFloat64, 23);
    auto context = EditContext::build(m.image, change(0.8), m.models());
    const decoder::PerceptualMetric perceptual(m.vse);
    OptConfig config;
    auto set = decoder::PerturbationSet::zeros(m.decoder.generator()->perturbation_shapes(), torch::kFloat64);
    torch::manual_seed(5);
    for (auto& t : set.tensors) {
        t.copy_(torch::randn_like(t) * 0.05);
        t.set_requires_grad(true);
    }
    auto total = [&] {
        auto images = cycle_images(context, m.models(), set);
        return sample_losses(context.image, images.reconstruction, images.cycled, set, config, perceptual).total;
    };
    total().backward();
    for (std::size_t i = 0; i < set.tensors.size(); ++i) {
        auto& p = set.tensors[i];
        auto coords = openedit::testing::sample_coords(p.numel(), 6, 100 + i);
        auto grad = p.grad().reshape({-1});
        std::vector<double> analytic;
        for (auto c : coords) {
            analytic.push_back(grad[c].item<double>());
        }
        auto data = p.detach();
        auto numeric = openedit::testing::finite_difference([&] { return total().item<double>(); }, data, coords, 1e-4);
        INFO("perturbation " << i);
        CHECK(openedit::testing::relative_error(analytic, numeric) <= 1e-3);
    }
}

TEST_CASE("config validation") {
    OptConfig config;
    CHECK_NOTHROW(config.validate());
    config.steps = -1;
    CHECK_THROWS_WITH_AS(config.validate(), doctest::Contains("steps"), ValidationError);
    config = OptConfig{};
    config.reg_weight = -1e-3;
    CHECK_THROWS_WITH_AS(config.validate(), doctest::Contains("reg_weight"), ValidationError);
    config = OptConfig{};
    config.learning_rate = std::nan("");
    CHECK_THROWS_AS(config.validate(), ValidationError);
    CHECK(OptConfig{}.to_json().at("steps") == 100);
}

}  // TEST_SUITE
