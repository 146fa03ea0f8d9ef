#include <fstream>
#include <sstream>

#include "doctest.h"
#include "recticast/cli.hpp"
#include "recticast/errors.hpp"
#include "recticast/tensor_io.hpp"
#include "support/cli_pipeline.hpp"
#include "support/temp_dir.hpp"

using namespace recticast;
using namespace recticast::cli;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

std::size_t count_lines(const fs::path& p) {
    std::ifstream in(p);
    std::size_t n = 0;
    for (std::string line; std::getline(in, line);) ++n;
    return n;
}

std::vector<std::string> with_paths(std::vector<std::string> args, const fs::path& config, const fs::path& out) {
    args.insert(args.end(), {"--config", config.string(), "--out", out.string()});
    return args;
}

}  // namespace

TEST_CASE("config parsing is strict") {
    CHECK_NOTHROW(default_config());
    CHECK_THROWS_AS(parse_config(json{{"sede", 1}}), ConfigError);
    CHECK_THROWS_AS(parse_config(json{{"optimizer", {{"lr", 1e-3}}}}), ConfigError);
    CHECK_THROWS_AS(parse_config(json{{"data", {{"seed", 3}}}}), ConfigError);
    CHECK_THROWS_AS(parse_config(json{{"data", {{"height", 48}}}}), ConfigError);
    CHECK_THROWS_AS(parse_config(json{{"data", {{"height", "32"}}}}), ConfigError);
    CHECK_THROWS_AS(parse_config(json{{"seed", -1}}), ConfigError);
    CHECK_THROWS_AS(parse_config(json{{"generator", {{"segment_vocab", 5}}}}), ConfigError);
    CHECK_THROWS_AS(parse_config(json{{"rectifier", {{"segment_vocab", 2}}}}), ConfigError);
    CHECK_THROWS_AS(parse_config(json{{"backbone", {{"input_frames", 4}}}}), ConfigError);
    CHECK_THROWS_AS(parse_config(json{{"sampler", {{"generator_steps", 0}}}}), ConfigError);
    CHECK_THROWS_AS(parse_config(json{{"thresholds", json::array()}}), ConfigError);
    CHECK_THROWS_AS(parse_config(json{{"optimizer", {{"flow_lr_max", -1.0}}}}), ConfigError);
    CHECK(parse_config(json{{"optimizer", {{"flow_lr_max", 2e-3}}}}).optimizer.flow_lr_max == 2e-3);

    const auto c = default_config();
    CHECK(c.optimizer.lr_max == 1e-4);
    CHECK(c.optimizer.lr_min == 1e-7);
    CHECK(c.rectifier.segment_vocab == 5);
    CHECK(c.generator.segment_vocab == 0);
    CHECK(c.rectifier.frames == 5);
    CHECK(c.rectifier.anchor == Anchor::backbone_cond);
    CHECK(c.generator.anchor == Anchor::side_cond);
    CHECK(parse_config(json{{"generator_variant", "residual"}}).generator.anchor == Anchor::none);
    CHECK_THROWS_AS(parse_config(json{{"generator_variant", "residual"}, {"generator", {{"anchor", "side_cond"}}}}),
                    ConfigError);
    CHECK(c.thresholds == metrics::kDefaultThresholds);
}

TEST_CASE("config hash ignores the output directory and tracks everything else") {
    auto a = parse_config(testing::tiny_config());
    auto b = a;
    b.output_dir = "elsewhere";
    CHECK(config_hash(a) == config_hash(b));
    auto j = testing::tiny_config();
    j["seed"] = 8;
    CHECK(config_hash(parse_config(j)) != config_hash(a));
    CHECK(parse_config(j).data.seed != a.data.seed);
    CHECK(parse_config(to_json(a)) .data == a.data);
}

TEST_CASE("exit codes") {
    testing::TempDir tmp;
    const auto cfg = testing::write_config(tmp / "tiny.json", testing::tiny_config());
    const auto out = tmp / "run";
    CHECK(testing::run_cli({"bogus"}) == 2);
    CHECK(testing::run_cli(with_paths({"train"}, cfg, out)) == 2);
    CHECK(testing::run_cli(with_paths({"train", "--stage", "backbone"}, cfg, out)) == 3);
    CHECK(testing::run_cli(with_paths({"synth"}, cfg, out)) == 0);
    CHECK(testing::run_cli(with_paths({"synth"}, cfg, out)) == 2);
    CHECK(testing::run_cli(with_paths({"synth", "--force"}, cfg, out)) == 0);
    CHECK(testing::run_cli(with_paths({"train", "--stage", "rectifier"}, cfg, out)) == 3);
    CHECK(testing::run_cli(with_paths({"train", "--stage", "sideways"}, cfg, out)) == 2);
    CHECK(testing::run_cli(with_paths({"forecast", "--mode", "full"}, cfg, out)) == 3);
    CHECK(testing::run_cli(with_paths({"evaluate", "--mode", "full"}, cfg, out)) == 3);

    auto bad = testing::tiny_config();
    bad["data"]["height"] = 40;
    const auto bad_cfg = testing::write_config(tmp / "bad.json", bad);
    CHECK(testing::run_cli(with_paths({"synth"}, bad_cfg, tmp / "bad")) == 2);

    auto wild = testing::tiny_config();
    wild["optimizer"]["lr_max"] = 1e30;
    wild["optimizer"]["lr_min"] = 1e30;
    wild["optimizer"]["backbone_steps"] = 20;
    const auto wild_cfg = testing::write_config(tmp / "wild.json", wild);
    CHECK(testing::run_cli(with_paths({"synth"}, wild_cfg, tmp / "wild")) == 0);
    CHECK(testing::run_cli(with_paths({"train", "--stage", "backbone"}, wild_cfg, tmp / "wild")) == 4);
}

TEST_CASE("stage-2 training without the backbone names the stage order") {
    testing::TempDir tmp;
    auto c = parse_config(testing::tiny_config());
    c.output_dir = tmp.path();
    cmd_synth(c, false);
    try {
        cmd_train(c, Stage::generator, std::nullopt, false);
        FAIL("expected a prerequisite error");
    } catch (const PrerequisiteError& e) {
        CHECK(std::string(e.what()).find("stage 1 required") != std::string::npos);
    }
}

TEST_CASE("training writes one loss row per step and resumes the step counter") {
    testing::TempDir tmp;
    auto c = parse_config(testing::tiny_config());
    c.output_dir = tmp.path();
    c.optimizer.backbone_steps = 6;
    cmd_synth(c, false);
    const Layout layout{c.output_dir};

    auto first = cmd_train(c, Stage::backbone, 2, false);
    CHECK(first.start_step == 0);
    CHECK(first.final_step == 2);
    CHECK(count_lines(layout.backbone() / "loss.csv") == 1 + 2);
    const auto run_manifest = json::parse(read_file_bytes(layout.runs() / "train_backbone.json"));
    CHECK(run_manifest.at("config_hash") == config_hash(c));
    CHECK(run_manifest.contains("checkpoint_hash"));

    auto rest = cmd_train(c, Stage::backbone, std::nullopt, false);
    CHECK(rest.start_step == 2);
    CHECK(rest.final_step == 6);
    CHECK(rest.losses.size() == 4);
    CHECK(count_lines(layout.backbone() / "loss.csv") == 1 + 6);
    std::ifstream trace(layout.backbone() / "loss.csv");
    std::string line;
    std::getline(trace, line);
    CHECK(line == "step,loss,lr");
    for (int s = 1; s <= 6; ++s) {
        std::getline(trace, line);
        CHECK(line.rfind(std::to_string(s) + ",", 0) == 0);
    }

    auto done = cmd_train(c, Stage::backbone, std::nullopt, false);
    CHECK(done.final_step == 6);
    CHECK(done.losses.empty());

    auto again = cmd_train(c, Stage::backbone, 1, true);
    CHECK(again.start_step == 0);
    CHECK(count_lines(layout.backbone() / "loss.csv") == 1 + 1);
}

TEST_CASE("forecast manifest, backbone-only identity and evaluation") {
    testing::TempDir tmp;
    auto c = parse_config(testing::tiny_config());
    c.output_dir = tmp.path();
    c.sampler.rectifier_steps = 20;
    c.sampler.generator_steps = 20;
    c.optimizer.flow_lr_max = 4e-3;
    cmd_synth(c, false);
    cmd_train(c, Stage::backbone, std::nullopt, false);
    cmd_train(c, Stage::rectifier, std::nullopt, false);
    cmd_train(c, Stage::generator, std::nullopt, false);
    const Layout layout{c.output_dir};

    // first logged lr of each stage sits near its own peak
    auto first_lr = [](const fs::path& csv) {
        std::ifstream in(csv);
        std::string line;
        std::getline(in, line);
        std::getline(in, line);
        return std::stod(line.substr(line.rfind(',') + 1));
    };
    CHECK(first_lr(layout.backbone() / "loss.csv") <= 1e-3);
    CHECK(first_lr(layout.rectifier() / "loss.csv") > 1e-3);
    CHECK(first_lr(layout.generator(cascade::GeneratorVariant::rectified) / "loss.csv") > 1e-3);

    cmd_forecast(c, cascade::ForecastMode::full, false);
    const auto fm = json::parse(read_file_bytes(layout.forecasts(cascade::ForecastMode::full) / "manifest.json"));
    CHECK(fm.at("nfe") == 160);
    CHECK(fm.at("segments") == 4);
    CHECK(fm.at("checkpoints").contains("rectifier"));
    CHECK(fm.at("samples").size() == 2);

    cmd_forecast(c, cascade::ForecastMode::backbone_only, false);
    const auto ds = data::read_dataset(layout.data());
    const auto test = ds.split("test");
    const auto bb = load_backbone(layout.backbone());
    const auto out = load_tensor<float>(layout.forecasts(cascade::ForecastMode::backbone_only) / "sample_00000.rten");
    CHECK(out == bb.predict(test[0].input));

    // ground truth scored against itself
    const auto mode = cascade::ForecastMode::no_generator;
    const auto gt_dir = layout.forecasts(mode);
    fs::create_directories(gt_dir);
    json samples = json::array();
    const auto idx = ds.split_indices("test");
    for (std::size_t k = 0; k < 2; ++k) {
        const std::string f = "sample_0000" + std::to_string(k) + ".rten";
        save_tensor(gt_dir / f, ds.samples[idx[k]].target);
        samples.push_back({{"file", f}, {"source", ds.entries[idx[k]].file}});
    }
    std::ofstream(gt_dir / "manifest.json") << json{{"samples", samples}}.dump();
    const auto perfect = cmd_evaluate(c, mode, false);
    CHECK(perfect.csi_mean(0) == 1.0);
    CHECK(perfect.hss_mean() == 1.0);
    CHECK(perfect.ssim_mean() == doctest::Approx(1.0));
    const auto rj = json::parse(read_file_bytes(layout.reports(mode) / "report.json"));
    for (const char* key : {"csi", "csi4", "csi16", "hss", "ssim"}) CHECK(rj.contains(key));
    CHECK_THROWS_AS(cmd_evaluate(c, mode, false), ConfigError);

    // misaligned: a listed forecast file is missing
    fs::remove(gt_dir / "sample_00001.rten");
    try {
        cmd_evaluate(c, mode, true);
        FAIL("expected misalignment error");
    } catch (const ConfigError& e) {
        CHECK(std::string(e.what()).find("sample_00001.rten") != std::string::npos);
    }
    std::ofstream(gt_dir / "manifest.json") << json{{"samples", json::array()}}.dump();
    CHECK_THROWS_AS(cmd_evaluate(c, mode, true), PrerequisiteError);
}

TEST_CASE("report curves and svg plots") {
    testing::TempDir tmp;
    std::string csv = "lead,threshold,metric,value\n";
    for (int l = 1; l <= 20; ++l) {
        csv += std::to_string(l) + ",16,csi,0.5\n";
        csv += std::to_string(l) + ",mean,csi," + std::to_string(1.0 / l) + "\n";
    }
    fs::create_directories(tmp / "a");
    std::ofstream(tmp / "a" / "report.csv") << csv;
    const auto curve = read_report_curve(tmp / "a" / "report.csv", "csi");
    REQUIRE(curve.size() == 20);
    CHECK(curve[3] == doctest::Approx(0.25));

    const auto one = render_svg("csi", {{"a", curve}});
    const auto poly = one.find("<polyline");
    REQUIRE(poly != std::string::npos);
    const auto pts = one.substr(one.find("points=\"", poly) + 8);
    const std::string list = pts.substr(0, pts.find('"'));
    CHECK(std::count(list.begin(), list.end(), ',') == 20);
    CHECK(render_svg("csi", {{"a", curve}}) == one);

    const auto two = render_svg("csi", {{"a", curve}, {"b", curve}});
    std::size_t n = 0;
    for (auto p = two.find("<polyline"); p != std::string::npos; p = two.find("<polyline", p + 1)) ++n;
    CHECK(n == 2);
    CHECK(two.find(">b</text>") != std::string::npos);

    std::ofstream(tmp / "bad.csv") << "lead,threshold,metric,value\n1,mean,csi,0.5\n2,mean,csi\n";
    try {
        read_report_curve(tmp / "bad.csv", "csi");
        FAIL("expected a parse error");
    } catch (const FormatError& e) {
        CHECK(std::string(e.what()).find(":3:") != std::string::npos);
    }
    std::ofstream(tmp / "bad2.csv") << "lead,threshold,metric,value\nx,mean,csi,0.5\n";
    CHECK_THROWS_AS(read_report_curve(tmp / "bad2.csv", "csi"), FormatError);
}

TEST_CASE("pipeline reruns are byte-identical") {
    testing::TempDir tmp;
    const auto cfg = testing::write_config(tmp / "tiny.json", testing::tiny_config());
    REQUIRE(testing::run_tiny_pipeline(cfg, tmp / "a") == 0);
    REQUIRE(testing::run_tiny_pipeline(cfg, tmp / "b") == 0);
    const auto a = testing::tree_digest(tmp / "a");
    CHECK(a.size() > 20);
    CHECK(a == testing::tree_digest(tmp / "b"));
}
