// Copyright (C) 2026 The Open-Edit Authors
// SPDX-License-Identifier: Apache-2.0

#include "openedit/cli.hpp"

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include "openedit/common.hpp"
#include "openedit/edgemap.hpp"
#include "openedit/editservice.hpp"
#include "openedit/image.hpp"
#include "openedit/log.hpp"
#include "openedit/pipeline.hpp"
#include "openedit/synthdata.hpp"

namespace openedit::cli {
namespace fs = std::filesystem;
using nlohmann::json;

Layout Layout::from_environment() {
    const char* home = std::getenv("OPEN_EDIT_HOME");
    return Layout{home != nullptr && *home != '\0' ? fs::path(home) : fs::current_path()};
}

namespace {

/// Bad flag combination or value detected after CLI11 parsing.
class UsageError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct Globals {
    std::string config_path;
    std::uint64_t seed = 0;
    std::string out;
    bool json = false;
};

struct InstructionFlags {
    std::vector<std::string> change;
    std::string remove;
    std::string relative;
    std::string sign;
    double alpha = 1.0;

    void add_to(CLI::App* app) {
        auto* c = app->add_option("--change", change, "Change attribute: SOURCE TARGET phrases")->expected(2);
        auto* r = app->add_option("--remove", remove, "Remove the concept named by the phrase");
        auto* rel = app->add_option("--relative", relative, "Strengthen or weaken the phrase (needs --sign)");
        c->excludes(r)->excludes(rel);
        r->excludes(rel);
        app->add_option("--sign", sign, "+ or - for --relative")->needs(rel);
        app->add_option("--alpha", alpha, "Manipulation strength (>= 0)")->check(CLI::NonNegativeNumber);
    }

    grounding::EditInstruction build() const {
        grounding::EditInstruction instruction;
        instruction.alpha = alpha;
        if (!change.empty()) {
            instruction.kind = synth::EditKind::change;
            instruction.source_phrase = change.at(0);
            instruction.target_phrase = change.at(1);
        } else if (!remove.empty()) {
            instruction.kind = synth::EditKind::remove;
            instruction.source_phrase = remove;
        } else if (!relative.empty()) {
            instruction.kind = synth::EditKind::relative;
            instruction.source_phrase = relative;
            if (sign == "+" || sign == "+1" || sign == "plus") {
                instruction.sign = 1;
            } else if (sign == "-" || sign == "-1" || sign == "minus") {
                instruction.sign = -1;
            } else {
                throw UsageError("--sign must be + or - (got '" + sign + "')");
            }
        } else {
            throw UsageError("one of --change, --remove or --relative is required");
        }
        try {
            instruction.validate();
        } catch (const ValidationError& e) {
            throw UsageError(e.what());
        }
        return instruction;
    }
};

json load_config_file(const std::string& path) {
    if (path.empty()) {
        return json::object();
    }
    std::ifstream in(path);
    if (!in) {
        throw UsageError("--config: cannot read " + path);
    }
    try {
        auto j = json::parse(in);
        if (!j.is_object()) {
            throw UsageError("--config: " + path + " must hold a JSON object");
        }
        return j;
    } catch (const json::parse_error& e) {
        throw UsageError("--config: " + path + " is not valid JSON: " + e.what());
    }
}

sampleopt::OptConfig opt_config(const json& config) {
    sampleopt::OptConfig opt;
    if (config.contains("opt")) {
        const auto& o = config.at("opt");
        opt.steps = o.value("steps", opt.steps);
        opt.learning_rate = o.value("learning_rate", opt.learning_rate);
        opt.perceptual_weight = o.value("perceptual_weight", opt.perceptual_weight);
        opt.reg_weight = o.value("reg_weight", opt.reg_weight);
        opt.rec_weight = o.value("rec_weight", opt.rec_weight);
        opt.cyc_weight = o.value("cyc_weight", opt.cyc_weight);
        opt.time_limit_seconds = o.value("time_limit_seconds", opt.time_limit_seconds);
    }
    return opt;
}

pipeline::RunConfig run_config(const json& config) {
    return config.contains("train") ? pipeline::RunConfig::from_json(config.at("train")) : pipeline::RunConfig{};
}

void emit(const Globals& globals, const json& result, const std::string& human) {
    if (globals.json) {
        std::cout << result.dump() << std::endl;
    } else if (!human.empty()) {
        std::cout << human << std::endl;
    }
}

std::string alpha_label(double alpha) { return fmt::format("{}", alpha); }

std::string sha256_of(const std::vector<std::uint8_t>& bytes) { return sha256_hex(bytes.data(), bytes.size()); }

torch::Tensor read_input_image(const std::string& path) {
    if (path.empty()) {
        throw UsageError("--image is required");
    }
    return read_png(path);
}

}  // namespace

int run(const std::vector<std::string>& args) {
    std::vector<const char*> argv;
    for (const auto& a : args) {
        argv.push_back(a.c_str());
    }
    return run(static_cast<int>(argv.size()), argv.data());
}

int run(int argc, const char* const* argv) {
    configure_torch_runtime();
    const auto layout = Layout::from_environment();

    CLI::App app{"Text-guided image editing on a synthetic shapes corpus", "open-edit"};
    app.require_subcommand(1);
    app.fallthrough();
    Globals globals;
    app.add_option("--config", globals.config_path, "JSON file with 'train' and 'opt' overrides");
    app.add_option("--seed", globals.seed, "Seed for every stochastic choice");
    app.add_option("--out", globals.out, "Primary output path of the subcommand");
    app.add_flag("--json", globals.json, "Print a machine-readable JSON result on stdout");

    // gen-data
    auto* gen = app.add_subcommand("gen-data", "Generate the synthetic corpus");
    synth::DatasetConfig dataset;
    gen->add_option("--train", dataset.train)->check(CLI::NonNegativeNumber);
    gen->add_option("--val", dataset.val)->check(CLI::NonNegativeNumber);
    gen->add_option("--test", dataset.test)->check(CLI::NonNegativeNumber);
    gen->add_option("--canvas", dataset.canvas_size)->check(CLI::PositiveNumber);

    // train-vse / train-decoder
    std::string corpus_flag, vse_flag, decoder_flag;
    std::optional<int> steps_flag, batch_flag, eval_every_flag;
    auto add_train_flags = [&](CLI::App* sub) {
        sub->add_option("--corpus", corpus_flag, "Corpus root");
        sub->add_option("--steps", steps_flag, "Training steps")->check(CLI::NonNegativeNumber);
        sub->add_option("--batch-size", batch_flag)->check(CLI::Range(2, 4096));
        sub->add_option("--eval-every", eval_every_flag)->check(CLI::PositiveNumber);
    };
    auto* train_vse = app.add_subcommand("train-vse", "Train the visual-semantic embedding");
    add_train_flags(train_vse);
    auto* train_dec = app.add_subcommand("train-decoder", "Train the decoder against a frozen embedding");
    add_train_flags(train_dec);
    bool no_edges = false;
    train_dec->add_option("--vse", vse_flag, "Embedding checkpoint");
    train_dec->add_flag("--no-edges", no_edges, "Train the decoder without edge conditioning");

    // edit / reconstruct / sweep-alpha
    std::string image_flag;
    InstructionFlags instr_flags;
    bool no_opt = false;
    std::optional<int> opt_steps_flag;
    std::string save_reconstruction, save_grounding;
    auto add_model_flags = [&](CLI::App* sub) {
        sub->add_option("--image", image_flag, "Input PNG");
        sub->add_option("--vse", vse_flag, "Embedding checkpoint");
        sub->add_option("--decoder", decoder_flag, "Decoder checkpoint");
    };
    auto* edit_cmd = app.add_subcommand("edit", "Edit one image");
    add_model_flags(edit_cmd);
    instr_flags.add_to(edit_cmd);
    edit_cmd->add_flag("--no-opt", no_opt, "Skip sample-specific optimization");
    edit_cmd->add_option("--opt-steps", opt_steps_flag)->check(CLI::NonNegativeNumber);
    edit_cmd->add_option("--save-reconstruction", save_reconstruction, "Also write the reconstruction PNG");
    edit_cmd->add_option("--save-grounding", save_grounding, "Also write the grounding heatmap PNG");

    auto* recon_cmd = app.add_subcommand("reconstruct", "Encode and decode one image without editing");
    add_model_flags(recon_cmd);

    auto* sweep_cmd = app.add_subcommand("sweep-alpha", "Decode one frame per manipulation strength");
    add_model_flags(sweep_cmd);
    InstructionFlags sweep_instr;
    sweep_instr.add_to(sweep_cmd);
    std::string grid_flag = "0,0.2,0.4,0.6,0.8,1";
    sweep_cmd->add_option("--grid", grid_flag, "Comma-separated alpha values");
    sweep_cmd->add_flag("--no-opt", no_opt, "Skip sample-specific optimization");
    sweep_cmd->add_option("--opt-steps", opt_steps_flag)->check(CLI::NonNegativeNumber);

    // edges
    auto* edges_cmd = app.add_subcommand("edges", "Write the edge map of an image");
    std::string edges_in, edges_out;
    edges_cmd->add_option("input", edges_in, "Input PNG")->required();
    edges_cmd->add_option("output", edges_out, "Output PNG (or use --out)");

    // eval
    auto* eval_cmd = app.add_subcommand("eval", "Reconstruction ablation and edit-success report");
    std::string cells_flag = "no-edge,edge,edge-opt", split_flag = "val";
    std::string no_edge_decoder, edge_decoder;
    pipeline::EvalOptions eval_options;
    eval_cmd->add_option("--corpus", corpus_flag);
    eval_cmd->add_option("--split", split_flag)->check(CLI::IsMember({"train", "val", "test"}));
    eval_cmd->add_option("--cells", cells_flag, "Comma-separated subset of no-edge,edge,edge-opt");
    eval_cmd->add_option("--vse", vse_flag);
    eval_cmd->add_option("--edge-decoder", edge_decoder);
    eval_cmd->add_option("--no-edge-decoder", no_edge_decoder);
    eval_cmd->add_option("--max-images", eval_options.max_images)->check(CLI::NonNegativeNumber);
    eval_cmd->add_option("--max-edit-cases", eval_options.max_edit_cases)->check(CLI::NonNegativeNumber);
    eval_cmd->add_option("--edit-alpha", eval_options.edit_alpha)->check(CLI::NonNegativeNumber);
    eval_cmd->add_flag("--edit-opt", eval_options.edit_use_opt, "Optimize perturbations for edit-success cases");
    eval_cmd->add_option("--opt-steps", opt_steps_flag)->check(CLI::NonNegativeNumber);

    // serve
    auto* serve_cmd = app.add_subcommand("serve", "Run the HTTP edit service");
    service::ServiceConfig service_config;
    std::string checkpoint_dir;
    serve_cmd->add_option("--port", service_config.port)->check(CLI::Range(0, 65535));
    serve_cmd->add_option("--host", service_config.host);
    serve_cmd->add_option("--checkpoint-dir", checkpoint_dir, "Root holding runs/vse and runs/decoder-edge");
    serve_cmd->add_option("--vse", vse_flag);
    serve_cmd->add_option("--decoder", decoder_flag);
    serve_cmd->add_option("--corpus", corpus_flag);
    serve_cmd->add_option("--max-concurrent-opt", service_config.max_concurrent_optimizations)
        ->check(CLI::PositiveNumber);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        std::cerr << "run with --help for usage\n";
        return kExitUsage;
    }

    auto pick = [](const std::string& flag, const fs::path& fallback) { return flag.empty() ? fallback : fs::path(flag); };
    try {
        torch::manual_seed(globals.seed);
        const json config = load_config_file(globals.config_path);
        auto opt = opt_config(config);
        if (opt_steps_flag) {
            opt.steps = *opt_steps_flag;
        }
        try {
            opt.validate();
        } catch (const ValidationError& e) {
            throw UsageError(std::string("--config opt: ") + e.what());
        }
        const auto corpus = pick(corpus_flag, layout.corpus());

        if (gen->parsed()) {
            dataset.root = pick(globals.out, layout.corpus());
            dataset.base_seed = globals.seed;
            synth::generate_dataset(dataset);
            emit(globals,
                 {{"root", dataset.root.string()},
                  {"train", dataset.train},
                  {"val", dataset.val},
                  {"test", dataset.test}},
                 "corpus written to " + dataset.root.string());
        } else if (train_vse->parsed() || train_dec->parsed()) {
            const bool is_vse = train_vse->parsed();
            auto rc = run_config(config);
            rc.corpus_root = corpus;
            rc.seed = globals.seed;
            rc.steps = steps_flag.value_or(config.contains("train") && config["train"].contains("steps")
                                               ? rc.steps
                                               : (is_vse ? pipeline::kDefaultVseSteps : pipeline::kDefaultDecoderSteps));
            rc.batch_size = batch_flag.value_or(rc.batch_size);
            rc.eval_every = eval_every_flag.value_or(rc.eval_every);
            if (!fs::exists(corpus / "train" / "meta.jsonl")) {
                throw IoError("corpus not found at " + corpus.string() + " (run gen-data first)");
            }
            pipeline::TrainSummary summary;
            if (is_vse) {
                rc.run_dir = pick(globals.out, layout.run("vse"));
                summary = pipeline::train_vse(rc);
            } else {
                rc.decoder.use_edges = !no_edges;
                rc.run_dir = pick(globals.out, layout.run(no_edges ? "decoder-no-edge" : "decoder-edge"));
                summary = pipeline::train_decoder(rc, pick(vse_flag, layout.vse_checkpoint()));
            }
            json result{{"run_dir", rc.run_dir.string()},
                        {"best_checkpoint", summary.best_checkpoint.string()},
                        {"last_checkpoint", summary.last_checkpoint.string()},
                        {"best_step", summary.best_step},
                        {"best_metric", summary.best_metric},
                        {"initial_metric", summary.initial_metric},
                        {"rollbacks", summary.rollbacks}};
            if (!is_vse) {
                result["vse_hash_before"] = summary.frozen_hash_before;
                result["vse_hash_after"] = summary.frozen_hash_after;
            }
            emit(globals, result,
                 fmt::format("best {} {:.4f} at step {} -> {}", is_vse ? "val R@1" : "val L2", summary.best_metric,
                             summary.best_step, summary.best_checkpoint.string()));
        } else if (edit_cmd->parsed() || recon_cmd->parsed() || sweep_cmd->parsed()) {
            auto image = read_input_image(image_flag);
            grounding::EditInstruction instruction;
            if (edit_cmd->parsed()) {
                instruction = instr_flags.build();
            } else if (sweep_cmd->parsed()) {
                instruction = sweep_instr.build();
            }
            std::vector<double> grid;
            if (sweep_cmd->parsed()) {
                try {
                    grid = pipeline::parse_alpha_grid(grid_flag);
                } catch (const ValidationError& e) {
                    throw UsageError(std::string("--grid: ") + e.what());
                }
            }
            const auto models =
                pipeline::LoadedModels::load(pick(vse_flag, layout.vse_checkpoint()),
                                             pick(decoder_flag, layout.decoder_checkpoint()));
            pipeline::EditOptions options;
            options.use_opt = !no_opt && !recon_cmd->parsed();
            options.opt = opt;
            options.seed = globals.seed;

            if (recon_cmd->parsed()) {
                torch::NoGradGuard no_grad;
                auto out = models.decoder.decode(models.vse.encode_image(image), edges::extract_edges(image));
                const auto path = pick(globals.out, "reconstruction.png");
                const auto bytes = encode_png(out);
                write_file_bytes(path, bytes);
                emit(globals, {{"output", path.string()}, {"sha256", sha256_of(bytes)}}, path.string());
            } else if (edit_cmd->parsed()) {
                auto result = pipeline::edit(models, image, instruction, options);
                for (const auto& w : result.warnings) {
                    log::warn("{}", w);
                }
                const auto path = pick(globals.out, "edited.png");
                const auto bytes = encode_png(result.image_out);
                write_file_bytes(path, bytes);
                if (!save_reconstruction.empty()) {
                    write_png(save_reconstruction, result.reconstruction);
                }
                if (!save_grounding.empty()) {
                    write_gray_png(save_grounding, result.grounding.normalized());
                }
                emit(globals,
                     {{"output", path.string()},
                      {"sha256", sha256_of(bytes)},
                      {"optimized", result.optimized},
                      {"all_oov", result.all_oov},
                      {"warnings", result.warnings},
                      {"loss_trace", result.loss_trace}},
                     path.string());
            } else {
                auto result = pipeline::sweep_alpha(models, image, instruction, grid, options);
                for (const auto& w : result.warnings) {
                    log::warn("{}", w);
                }
                const auto dir = pick(globals.out, "sweep");
                fs::create_directories(dir);
                json frames = json::array();
                for (const auto& f : result.frames) {
                    const auto path = dir / ("alpha-" + alpha_label(f.alpha) + ".png");
                    const auto bytes = encode_png(f.image);
                    write_file_bytes(path, bytes);
                    frames.push_back({{"alpha", f.alpha}, {"path", path.string()}, {"sha256", sha256_of(bytes)}});
                }
                emit(globals,
                     {{"frames", frames},
                      {"optimized", result.optimized},
                      {"all_oov", result.all_oov},
                      {"warnings", result.warnings},
                      {"loss_trace", result.loss_trace}},
                     fmt::format("{} frames in {}", frames.size(), dir.string()));
            }
        } else if (edges_cmd->parsed()) {
            const auto out = edges_out.empty() ? globals.out : edges_out;
            if (out.empty()) {
                throw UsageError("edges needs an output path (positional or --out)");
            }
            auto edge_map = edges::extract_edges(read_png(edges_in));
            write_gray_png(out, edge_map.values);
            emit(globals, {{"output", out}}, out);
        } else if (eval_cmd->parsed()) {
            eval_options.corpus_root = corpus;
            eval_options.split = split_flag;
            eval_options.vse_checkpoint = pick(vse_flag, layout.vse_checkpoint());
            eval_options.opt = opt;
            eval_options.seed = globals.seed;
            eval_options.cell_order.clear();
            std::stringstream cells(cells_flag);
            std::string cell;
            while (std::getline(cells, cell, ',')) {
                if (cell != "no-edge" && cell != "edge" && cell != "edge-opt") {
                    throw UsageError("--cells: unknown cell '" + cell + "'");
                }
                eval_options.cell_order.push_back(cell);
            }
            eval_options.cells["no-edge"] = pick(no_edge_decoder, layout.decoder_checkpoint(false));
            eval_options.cells["edge"] = pick(edge_decoder, layout.decoder_checkpoint(true));
            auto report = pipeline::evaluate(eval_options);
            const auto dir = pick(globals.out, layout.home / "eval");
            fs::create_directories(dir);
            const auto report_json = report.to_json();
            {
                std::ofstream out(dir / "report.json");
                out << report_json.dump(2) << "\n";
                std::ofstream md(dir / "report.md");
                md << report.to_markdown();
                if (!out || !md) {
                    throw IoError("cannot write report into " + dir.string());
                }
            }
            json summary{{"report", (dir / "report.json").string()}, {"aggregates", report_json["aggregates"]}};
            for (const auto& c : report.cells) {
                summary["cells"][c.name] = {
                    {"present", c.present}, {"mean_l2", c.mean_l2}, {"mean_perceptual", c.mean_perceptual}};
            }
            emit(globals, summary, report.to_markdown());
        } else if (serve_cmd->parsed()) {
            const fs::path root = checkpoint_dir.empty() ? layout.home : fs::path(checkpoint_dir);
            const Layout serve_layout{root};
            service_config.vse_checkpoint = pick(vse_flag, serve_layout.vse_checkpoint());
            service_config.decoder_checkpoint = pick(decoder_flag, serve_layout.decoder_checkpoint());
            service_config.corpus_root = pick(corpus_flag, serve_layout.corpus());
            service::EditService service(service_config);
            service.listen();
        }
    } catch (const UsageError& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const std::exception& e) {
        log::error("{}", e.what());
        if (globals.json) {
            std::cout << json{{"error", e.what()}}.dump() << std::endl;
        }
        return kExitRuntime;
    }
    return kExitOk;
}

}  // namespace openedit::cli
