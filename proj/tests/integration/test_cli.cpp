// Copyright (C) 2026 The Open-Edit Authors
// SPDX-License-Identifier: Apache-2.0

#include "support/doctest_torch.hpp"

#include <sys/wait.h>

#include <cstdio>
#include <fstream>

#include "openedit/cli.hpp"
#include "openedit/image.hpp"
#include "openedit/vse.hpp"
#include "support/test_support.hpp"

using namespace openedit;
using nlohmann::json;
using openedit::testing::TempDir;
namespace fs = std::filesystem;

namespace {

struct Outcome {
    int code = -1;
    std::string out;
};

// Runs the real binary with OPEN_EDIT_HOME pointed at `home`.
Outcome run_cli(const fs::path& home, const std::string& args) {
    const std::string command = "cd '" + home.string() + "' && OPEN_EDIT_HOME='" + home.string() + "' OPEN_EDIT_LOG=off '" +
                                OPEN_EDIT_BINARY + "' " + args + " 2>/dev/null";
    Outcome outcome;
    FILE* pipe = popen(command.c_str(), "r");
    REQUIRE(pipe != nullptr);
    char buffer[4096];
    while (std::fgets(buffer, sizeof buffer, pipe) != nullptr) {
        outcome.out += buffer;
    }
    const int status = pclose(pipe);
    outcome.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    return outcome;
}

json last_json(const Outcome& o) {
    auto pos = o.out.rfind("\n{");
    return json::parse(pos == std::string::npos ? o.out : o.out.substr(pos + 1));
}

// A home directory with a tiny corpus and briefly trained 32px models,
// produced through the CLI itself.
struct Home {
    TempDir dir{"oe-cli"};

    Home() {
        json config{{"train",
                     {{"batch_size", 8},
                      {"eval_images", 4},
                      {"eval_every", 2},
                      {"vse", openedit::testing::small_vse_config().to_json()},
                      {"decoder", openedit::testing::small_decoder_config().to_json()}}},
                    {"opt", {{"steps", 3}}}};
        std::ofstream(dir / "small.json") << config.dump();
        REQUIRE(run_cli(path(), "gen-data --train 24 --val 8 --test 8 --canvas 32").code == 0);
        REQUIRE(run_cli(path(), "--config small.json train-vse --steps 3").code == 0);
        REQUIRE(run_cli(path(), "--config small.json train-decoder --steps 2").code == 0);
        REQUIRE(run_cli(path(), "--config small.json train-decoder --steps 2 --no-edges").code == 0);
    }
    const fs::path& path() const { return dir.path(); }
    std::string image() const { return (dir / "corpus" / "val" / "images" / "val-00003.png").string(); }
};

Home& home() {
    static Home h;
    return h;
}

}  // namespace

TEST_SUITE("cli") {

TEST_CASE("usage errors exit with 1") {
    auto& h = home();
    CHECK(run_cli(h.path(), "").code == cli::kExitUsage);
    CHECK(run_cli(h.path(), "frobnicate").code == cli::kExitUsage);
    CHECK(run_cli(h.path(), "edit --bogus").code == cli::kExitUsage);
    CHECK(run_cli(h.path(), "edit --image " + h.image() + " --change red").code == cli::kExitUsage);
    CHECK(run_cli(h.path(), "edit --image " + h.image() + " --change red blue --remove red").code == cli::kExitUsage);
    CHECK(run_cli(h.path(), "edit --image " + h.image()).code == cli::kExitUsage);
    CHECK(run_cli(h.path(), "edit --image " + h.image() + " --relative red --sign=x").code == cli::kExitUsage);
    CHECK(run_cli(h.path(), "edit --image " + h.image() + " --remove red --alpha -1").code == cli::kExitUsage);
    CHECK(run_cli(h.path(), "sweep-alpha --image " + h.image() + " --remove red --grid 0,a").code == cli::kExitUsage);
    CHECK(run_cli(h.path(), "--config nope.json edit --image " + h.image() + " --remove red").code == cli::kExitUsage);
    CHECK(run_cli(h.path(), "eval --cells edge,bogus").code == cli::kExitUsage);
    CHECK(run_cli(h.path(), "--help").code == cli::kExitOk);
}

TEST_CASE("runtime failures exit with 2 and report JSON errors") {
    auto& h = home();
    auto missing = run_cli(h.path(), "--json edit --image nowhere.png --remove red");
    CHECK(missing.code == cli::kExitRuntime);
    CHECK(last_json(missing).contains("error"));
    CHECK(run_cli(h.path(), "train-vse --corpus empty-dir --steps 1").code == cli::kExitRuntime);
    CHECK(run_cli(h.path(), "edit --image " + h.image() + " --remove red --vse missing.bin").code == cli::kExitRuntime);
    // Wrong-size image.
    write_png(h.dir / "tiny.png", torch::rand({3, 8, 8}));
    CHECK(run_cli(h.path(), "edit --image tiny.png --remove red --no-opt").code == cli::kExitRuntime);
}

TEST_CASE("a poisoned embedding checkpoint makes decoder training fail cleanly") {
    auto& h = home();
    auto model = vse::VseModel::load(h.dir / "runs" / "vse" / "ckpt-best.bin");
    {
        torch::NoGradGuard no_grad;
        for (auto& p : model.image_encoder()->parameters()) {
            p.fill_(std::numeric_limits<float>::quiet_NaN());
        }
    }
    model.save(h.dir / "poisoned.bin");
    auto outcome = run_cli(h.path(), "--json --config small.json --out runs/poisoned train-decoder --steps 2 --vse poisoned.bin");
    CHECK(outcome.code == cli::kExitRuntime);
    CHECK(last_json(outcome).at("error").get<std::string>().size() > 0);
}

TEST_CASE("edits are deterministic and written as PNG") {
    auto& h = home();
    auto a = run_cli(h.path(), "--json --config small.json --out a.png edit --image " + h.image() +
                                   " --change 'red circle' 'blue circle' --save-reconstruction ra.png --save-grounding g.png");
    auto b = run_cli(h.path(), "--json --config small.json --out b.png edit --image " + h.image() +
                                   " --change 'red circle' 'blue circle'");
    REQUIRE(a.code == 0);
    REQUIRE(b.code == 0);
    auto ja = last_json(a);
    CHECK(ja.at("sha256") == last_json(b).at("sha256"));
    CHECK(ja.at("optimized").get<bool>());
    CHECK(ja.at("loss_trace").size() == 3);
    CHECK(read_file_bytes(h.dir / "a.png") == read_file_bytes(h.dir / "b.png"));
    CHECK(decode_png(read_file_bytes(h.dir / "a.png")).size(1) == 32);
    CHECK(fs::exists(h.dir / "ra.png"));
    CHECK(fs::exists(h.dir / "g.png"));

    auto oov = run_cli(h.path(), "--json --out o.png edit --no-opt --image " + h.image() + " --remove 'zorp'");
    REQUIRE(oov.code == 0);
    CHECK(last_json(oov).at("all_oov").get<bool>());
    CHECK_FALSE(last_json(oov).at("warnings").empty());
}

TEST_CASE("reconstruct equals an alpha = 0 edit") {
    auto& h = home();
    REQUIRE(run_cli(h.path(), "--out r.png reconstruct --image " + h.image()).code == 0);
    REQUIRE(run_cli(h.path(), "--out z.png edit --no-opt --alpha 0 --image " + h.image() +
                                  " --change 'red circle' 'blue circle'")
                .code == 0);
    CHECK(read_file_bytes(h.dir / "r.png") == read_file_bytes(h.dir / "z.png"));
}

TEST_CASE("sweep frames are named by alpha") {
    auto& h = home();
    auto outcome = run_cli(h.path(), "--json --out frames sweep-alpha --no-opt --grid 1,0,0.5 --image " + h.image() +
                                         " --relative red --sign=+");
    REQUIRE(outcome.code == 0);
    for (const char* name : {"alpha-0.png", "alpha-0.5.png", "alpha-1.png"}) {
        CHECK(fs::exists(h.dir / "frames" / name));
    }
    auto frames = last_json(outcome).at("frames");
    REQUIRE(frames.size() == 3);
    CHECK(frames[0].at("alpha") == 0.0);
    CHECK(frames[2].at("alpha") == 1.0);

    REQUIRE(run_cli(h.path(), "--out d sweep-alpha --no-opt --image " + h.image() + " --remove red").code == 0);
    int count = 0;
    for ([[maybe_unused]] const auto& e : fs::directory_iterator(h.dir / "d")) {
        ++count;
    }
    CHECK(count == 6);
}

TEST_CASE("edges and eval subcommands write their outputs") {
    auto& h = home();
    REQUIRE(run_cli(h.path(), "edges " + h.image() + " e.png").code == 0);
    auto edges = decode_png(read_file_bytes(h.dir / "e.png"));
    CHECK(edges.size(1) == 32);

    auto outcome = run_cli(h.path(), "--json --config small.json --out report eval --max-images 2 --max-edit-cases 3");
    REQUIRE(outcome.code == 0);
    auto report = json::parse(std::ifstream(h.dir / "report" / "report.json"));
    CHECK(report.at("cells").size() == 3);
    for (const auto& cell : report.at("cells")) {
        CHECK(cell.at("present").get<bool>());
    }
    CHECK(fs::exists(h.dir / "report" / "report.md"));
    CHECK(last_json(outcome).at("cells").at("edge").at("present").get<bool>());
}

TEST_CASE("training through the CLI is reproducible") {
    auto& h = home();
    REQUIRE(run_cli(h.path(), "--config small.json --out runs/vse-again train-vse --steps 3").code == 0);
    auto first = vse::VseModel::load(h.dir / "runs" / "vse" / "ckpt-last.bin");
    auto second = vse::VseModel::load(h.dir / "runs" / "vse-again" / "ckpt-last.bin");
    CHECK(first.parameter_hash() == second.parameter_hash());
}

}  // TEST_SUITE
