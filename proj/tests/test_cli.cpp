#include "temp_dir.hpp"

#include "medmamba/checkpoint.hpp"
#include "medmamba/cli/commands.hpp"
#include "medmamba/cli/run_config.hpp"
#include "medmamba/cli/tasks.hpp"
#include "medmamba/data.hpp"
#include "medmamba/errors.hpp"

#include <doctest.h>
#include <json.hpp>

#include <cmath>
#include <fstream>
#include <iterator>
#include <sstream>

using namespace medmamba;
namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

struct Outcome {
    int code;
    std::string out;
    std::string err;
};

Outcome invoke(std::vector<std::string> args) {
    std::ostringstream out, err;
    const int code = cli::run(args, out, err);
    return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void spit(const fs::path& p, const std::string& text) { std::ofstream(p) << text; }

std::vector<std::vector<std::string>> csv_rows(const fs::path& p) {
    std::vector<std::vector<std::string>> rows;
    std::istringstream in(slurp(p));
    std::string line;
    while (std::getline(in, line)) {
        std::vector<std::string> cells;
        std::istringstream ls(line);
        std::string cell;
        while (std::getline(ls, cell, ',')) cells.push_back(cell);
        rows.push_back(cells);
    }
    return rows;
}

void check_config_file(const fs::path& dir) {
    INFO(dir.string());
    REQUIRE(fs::exists(dir / "config.json"));
    const auto j = json::parse(slurp(dir / "config.json"));
    CHECK(j.at("library_version").get<std::string>() == cli::version());
}

// Tiny-config cross-validation run on a small stripes set; shared by several cases.
struct TinyRun {
    testing::TempDir dir{"cli_run"};
    fs::path data = dir / "s.mmpk";
    fs::path config = dir / "run.json";
    fs::path out = dir / "run";
    Outcome result;

    TinyRun() {
        REQUIRE(invoke({"synth", "-o", data.string(), "--count", "50", "--size", "16", "--seed", "3"}).code == 0);
        spit(config, json{{"model", {{"base_dim", 8}, {"depths", {1, 1, 1, 1}}, {"state_size", 4}, {"input_size", 16}}},
                          {"training", {{"epochs", 2}, {"batch_size", 8}, {"seed", 5}}},
                          {"data", {{"path", data.string()}}},
                          {"output_dir", out.string()}}
                         .dump());
        result = invoke({"train", "-c", config.string()});
    }
};

TinyRun& tiny_run() {
    static TinyRun run;
    return run;
}

} // namespace

TEST_CASE("synth layout and determinism") {
    testing::TempDir dir("synth");
    const auto a = dir / "a.mmpk";
    REQUIRE(invoke({"synth", "-o", a.string()}).code == 0);
    const auto set = load_packed(a);
    CHECK(set.samples.size() == 200);
    CHECK(set.samples[0].image.shape() == Shape{3, 64, 64});
    CHECK(set.indices_of(Split::train).size() == 140);
    CHECK(set.indices_of(Split::val).size() == 20);
    CHECK(set.indices_of(Split::test).size() == 40);
    const auto b = dir / "b.mmpk";
    REQUIRE(invoke({"synth", "-o", b.string()}).code == 0);
    CHECK(slurp(a) == slurp(b));
    CHECK(fs::exists(dir / "a.mmpk.json"));
    const auto c = dir / "c.mmpk";
    REQUIRE(invoke({"synth", "-o", c.string(), "--seed", "1"}).code == 0);
    CHECK(slurp(a) != slurp(c));
}

TEST_CASE("synthetic stripes are separable by a gradient heuristic") {
    const auto d = cli::synthesize_stripes({});
    const auto n = static_cast<std::int64_t>(d.size());
    const std::int64_t s = d.height;
    std::int64_t correct = 0;
    for (std::int64_t i = 0; i < n; ++i) {
        const auto* px = d.pixels.data() + static_cast<std::size_t>(i) * d.sample_bytes();
        auto at = [&](std::int64_t y, std::int64_t x) { return static_cast<double>(px[y * s + x]); };
        double gy = 0, gx = 0;
        for (std::int64_t y = 1; y + 1 < s; ++y) {
            for (std::int64_t x = 1; x + 1 < s; ++x) {
                // 3x3 mean-difference kernels along each axis.
                double dy = 0, dx = 0;
                for (int k = -1; k <= 1; ++k) {
                    dy += at(y + 1, x + k) - at(y - 1, x + k);
                    dx += at(y + k, x + 1) - at(y + k, x - 1);
                }
                gy += std::abs(dy);
                gx += std::abs(dx);
            }
        }
        const std::int64_t guess = gy > gx ? 0 : 1;
        correct += guess == d.labels[static_cast<std::size_t>(i)];
    }
    CHECK(static_cast<double>(correct) / static_cast<double>(n) > 0.9);
}

TEST_CASE("train emits fold checkpoints and summaries") {
    auto& run = tiny_run();
    INFO(run.result.err);
    REQUIRE(run.result.code == 0);
    for (int f = 1; f <= 5; ++f) {
        CHECK(fs::exists(run.out / ("fold" + std::to_string(f) + ".ckpt")));
    }
    const auto summary = csv_rows(run.out / "summary.csv");
    REQUIRE(summary.size() == 7);
    CHECK(summary[0] == std::vector<std::string>{"metric", "mean", "std", "summary"});
    CHECK(summary[1][0] == "accuracy");
    const auto history = csv_rows(run.out / "history.csv");
    CHECK(history.size() == 1 + 5 * 2);
    check_config_file(run.out);
    const auto cfg = json::parse(slurp(run.out / "config.json"));
    CHECK(cfg["training"]["seed"] == 5);
    const auto meta = read_checkpoint_meta(run.out / "fold2.ckpt");
    CHECK(meta.metrics.at("fold") == 2);
    CHECK(meta.seed == 5);
}

TEST_CASE("train is deterministic") {
    auto& run = tiny_run();
    REQUIRE(run.result.code == 0);
    const auto again = run.dir / "again";
    REQUIRE(invoke({"train", "-c", run.config.string(), "-o", again.string()}).code == 0);
    CHECK(slurp(run.out / "history.csv") == slurp(again / "history.csv"));
    CHECK(slurp(run.out / "metrics.csv") == slurp(again / "metrics.csv"));
}

TEST_CASE("eval reproduces the training metrics of a fold") {
    auto& run = tiny_run();
    REQUIRE(run.result.code == 0);
    const auto out = run.dir / "eval3";
    const auto r = invoke({"eval", "-c", run.config.string(), "-k", (run.out / "fold3.ckpt").string(), "--fold", "3",
                           "-o", out.string()});
    INFO(r.err);
    REQUIRE(r.code == 0);
    check_config_file(out);
    const auto trained = csv_rows(run.out / "metrics.csv");
    const auto evaluated = csv_rows(out / "metrics.csv");
    std::vector<std::vector<std::string>> fold3;
    for (const auto& row : trained) {
        if (!row.empty() && row[0] == "3") fold3.push_back(row);
    }
    REQUIRE(evaluated.size() == fold3.size() + 1);
    for (std::size_t i = 0; i < fold3.size(); ++i) {
        CHECK(evaluated[i + 1] == fold3[i]);
    }
    CHECK(fs::exists(out / "confusion.csv"));
}

TEST_CASE("eval failures") {
    auto& run = tiny_run();
    REQUIRE(run.result.code == 0);
    const auto ckpt = (run.out / "fold1.ckpt").string();
    const auto mismatch = invoke({"eval", "-c", run.config.string(), "-k", ckpt, "-s", "model.base_dim=16", "-o",
                                  (run.dir / "e1").string()});
    CHECK(mismatch.code == 1);
    CHECK(mismatch.err.find("expected") != std::string::npos);

    PackedDataset empty;
    empty.height = empty.width = 16;
    empty.channels = 1;
    empty.num_classes = 2;
    write_packed(empty, run.dir / "empty.mmpk");
    const auto none = invoke({"eval", "-c", run.config.string(), "-k", ckpt, "-s",
                              "data.path=\"" + (run.dir / "empty.mmpk").string() + "\"", "-o",
                              (run.dir / "e2").string()});
    CHECK(none.code == 1);
    CHECK(invoke({"eval", "-c", run.config.string(), "-k", ckpt, "--fold", "9"}).code == 2);
}

TEST_CASE("predict") {
    auto& run = tiny_run();
    REQUIRE(run.result.code == 0);
    const auto set = load_packed(run.data);
    const auto png = run.dir / "x.png";
    write_png(png, set.samples[0].image);
    const auto ckpt = (run.out / "fold1.ckpt").string();
    const auto r = invoke({"predict", "-k", ckpt, png.string(), png.string()});
    REQUIRE(r.code == 0);
    std::istringstream lines(r.out);
    std::string first, second;
    std::getline(lines, first);
    std::getline(lines, second);
    CHECK(first == second);
    std::istringstream cells(first);
    std::string path, label;
    double p0 = 0, p1 = 0;
    cells >> path >> label >> p0 >> p1;
    CHECK(path == png.string());
    CHECK(std::abs(p0 + p1 - 1.0) < 1e-6);
    CHECK(invoke({"predict", "-k", ckpt, (run.dir / "nope.png").string()}).code == 1);
    CHECK(invoke({"predict", "-k", ckpt, (run.dir / "nope.png").string(), png.string()}).code == 0);
}

TEST_CASE("train reports a missing dataset path") {
    testing::TempDir dir("missing");
    const auto cfg = dir / "c.json";
    spit(cfg, json{{"model", {{"base_dim", 8}, {"depths", {1, 1, 1, 1}}, {"state_size", 4}, {"input_size", 16}}},
                   {"data", {{"path", (dir / "absent.mmpk").string()}}},
                   {"output_dir", (dir / "o").string()}}
                  .dump());
    const auto r = invoke({"train", "-c", cfg.string()});
    CHECK(r.code == 1);
    CHECK(r.err.find("absent.mmpk") != std::string::npos);
}

TEST_CASE("usage and configuration errors exit with 2") {
    testing::TempDir dir("usage");
    CHECK(invoke({}).code == 2);
    CHECK(invoke({"frobnicate"}).code == 2);
    CHECK(invoke({"train"}).code == 2);
    spit(dir / "bad.json", R"({"training": {"learning_rate": 0.1}})");
    const auto r = invoke({"train", "-c", (dir / "bad.json").string()});
    CHECK(r.code == 2);
    CHECK(r.err.find("learning_rate") != std::string::npos);
    CHECK(invoke({"train", "-c", (dir / "absent.json").string()}).code == 2);
    CHECK(invoke({"--help"}).code == 0);
}

TEST_CASE("run config defaults and overrides") {
    const auto cfg = cli::RunConfig::from_json("{}", {});
    CHECK(cfg.training.adam.lr == 0.001);
    CHECK(cfg.training.adam.beta1 == 0.9);
    CHECK(cfg.training.adam.beta2 == 0.999);
    CHECK(cfg.training.adam.weight_decay == 1e-4);
    CHECK(cfg.training.batch_size == 64);
    CHECK(cfg.training.epochs == 100);
    CHECK(cfg.training.folds == 5);
    const auto o = cli::RunConfig::from_json("{}", {"training.epochs=3", "model.base_dim=16"});
    CHECK(o.training.epochs == 3);
    CHECK(o.model.dims[0] == 16);
    CHECK_THROWS_AS(cli::RunConfig::from_json("{}", {"training.epochs"}), ConfigError);
    CHECK_THROWS_AS(cli::RunConfig::from_json(R"({"model": {"input_size": 64}, "data": {"input_size": 32}})", {}), ConfigError);
    CHECK(cli::RunConfig::from_json(R"({"data": {"input_size": 32}})", {}).model.input_size == 32);
    const auto round = cli::RunConfig::from_json(o.to_json(), {});
    CHECK(round.to_json() == o.to_json());
}

TEST_CASE("gradcheck command") {
    testing::TempDir dir("grad");
    const auto pass = invoke({"gradcheck", "-o", dir.path().string()});
    INFO(pass.out);
    CHECK(pass.code == 0);
    CHECK(pass.out.find("PASS") != std::string::npos);
    check_config_file(dir.path());
    const auto rows = csv_rows(dir / "gradcheck.csv");
    CHECK(rows.size() >= 101);
    // Worst ten parameters are listed by name.
    const bool named = pass.out.find("patch_embed") != std::string::npos ||
                       pass.out.find("stages.") != std::string::npos || pass.out.find("head.") != std::string::npos;
    CHECK(named);

    const auto fail = invoke({"gradcheck", "--inject-fault", "selective_scan"});
    CHECK(fail.code == 1);
    CHECK(fail.out.find("FAIL") != std::string::npos);

    const auto refuse = invoke({"gradcheck", "-s", "model.base_dim=96", "-s", "model.depths=[2,2,4,2]"});
    CHECK(refuse.code == 2);
}

TEST_CASE("bench-scan output format") {
    testing::TempDir dir("bench");
    const auto r = invoke({"bench-scan", "--lengths", "64,128,256", "--repeats", "3", "-o", dir.path().string()});
    REQUIRE(r.code == 0);
    const auto rows = csv_rows(dir / "scan_timing.csv");
    REQUIRE(rows.size() == 4);
    CHECK(rows[0] == std::vector<std::string>{"length", "median_seconds", "ratio_to_previous"});
    CHECK(rows[1][0] == "64");
    CHECK(rows[3][0] == "256");
    check_config_file(dir.path());
    CHECK(invoke({"bench-scan", "--lengths", "128,64"}).code == 2);
}

TEST_CASE("convert packs an image folder") {
    testing::TempDir dir("convert");
    for (const char* cls : {"a", "b"}) {
        fs::create_directories(dir / cls);
        for (int i = 0; i < 10; ++i) {
            write_png(dir / (std::string(cls) + "/" + std::to_string(i) + ".png"),
                      Tensor<float>::full({3, 20, 24}, 0.05f * static_cast<float>(i)));
        }
    }
    const auto out = dir / "p.mmpk";
    const auto r = invoke({"convert", "-i", dir.path().string(), "-o", out.string(), "--size", "8"});
    INFO(r.err);
    REQUIRE(r.code == 0);
    const auto set = load_packed(out);
    CHECK(set.samples.size() == 20);
    CHECK(set.samples[0].image.shape() == Shape{3, 8, 8});
    CHECK(set.indices_of(Split::train).size() == 14);
    CHECK(set.indices_of(Split::test).size() == 4);
    CHECK(json::parse(slurp(dir / "p.mmpk.json"))["convert"]["class_names"] == json{"a", "b"});
}
