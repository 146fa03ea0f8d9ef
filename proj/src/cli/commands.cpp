#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

#include "recticast/cli.hpp"
#include "recticast/errors.hpp"
#include "recticast/rng.hpp"
#include "recticast/tensor_io.hpp"
#include "recticast/training.hpp"

namespace recticast::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

void log(const std::string& msg) { std::cerr << "[recticast] " << msg << '\n'; }

void write_text(const fs::path& path, const std::string& text) {
    fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out << text;
    if (!out) throw std::runtime_error("cannot write " + path.string());
}

void write_json(const fs::path& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

/// Output directory for a whole-directory artifact: refuses to overwrite
/// unless forced.
void fresh_dir(const fs::path& dir, bool force) {
    if (fs::exists(dir) && !fs::is_empty(dir)) {
        if (!force) throw ConfigError(dir.string() + " already exists and is not empty (use --force to replace it)");
        fs::remove_all(dir);
    }
    fs::create_directories(dir);
}

std::string fmt(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.9g", v);
    return buf;
}

json run_header(const RunConfig& c, const std::string& command) {
    return json{{"command", command}, {"config", to_json(c)}, {"config_hash", config_hash(c)}, {"seed", c.seed}};
}

data::Dataset require_dataset(const RunConfig& c, const Layout& layout) {
    if (!fs::exists(layout.data() / "manifest.json")) {
        throw PrerequisiteError("dataset missing at " + layout.data().string() + ": run `synth` first");
    }
    auto ds = data::read_dataset(layout.data());
    if (!(ds.spec == c.data)) {
        throw ConfigError("dataset at " + layout.data().string() +
                          " was synthesized from a different data config or seed; rerun `synth --force`");
    }
    return ds;
}

BackboneModel<float> require_backbone(const Layout& layout, const RunConfig& c, const std::string& stage) {
    if (!fs::exists(layout.backbone() / "manifest.json")) {
        throw PrerequisiteError("stage 1 required: no backbone checkpoint at " + layout.backbone().string() +
                                "; run `train --stage backbone` before `" + stage + "`");
    }
    auto bb = load_backbone(layout.backbone());
    if (!(bb.config() == c.backbone)) {
        throw ConfigError("backbone checkpoint config differs from the run config; retrain with --force");
    }
    return bb;
}

std::string dir_hash(const fs::path& dir) { return checkpoint_hash(dir); }

struct StageBudget {
    std::size_t start = 0;
    std::size_t steps = 0;
    std::size_t horizon = 0;
};

StageBudget budget(std::size_t start, std::size_t total, std::optional<std::size_t> steps) {
    StageBudget b;
    b.start = start;
    b.steps = steps ? *steps : (total > start ? total - start : 0);
    b.horizon = std::max(total, start + b.steps);
    return b;
}

TrainOptions options_for(const RunConfig& c, Stage stage, const StageBudget& b, std::uint64_t seed, std::string& trace) {
    TrainOptions o;
    o.steps = b.steps;
    o.batch = c.optimizer.batch;
    o.lr_max = stage == Stage::backbone ? c.optimizer.lr_max : c.optimizer.flow_lr_max.value_or(c.optimizer.lr_max);
    o.lr_min = c.optimizer.lr_min;
    o.schedule_total = b.horizon;
    o.seed = seed;
    o.on_step = [&trace, total = b.start + b.steps](std::size_t step, double loss, double lr) {
        trace += std::to_string(step) + "," + fmt(loss) + "," + fmt(lr) + "\n";
        if (step % 100 == 0 || step == total) log("step " + std::to_string(step) + " loss " + fmt(loss));
    };
    return o;
}

/// Loss trace: one row per optimizer step, appended across resumed calls.
void append_trace(const fs::path& dir, const std::string& rows, bool fresh) {
    const auto path = dir / "loss.csv";
    const bool header = fresh || !fs::exists(path);
    std::ofstream out(path, std::ios::binary | (header ? std::ios::trunc : std::ios::app));
    if (header) out << "step,loss,lr\n";
    out << rows;
}

std::string sample_name(std::size_t k) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "sample_%05zu.rten", k);
    return buf;
}

}  // namespace

void cmd_synth(const RunConfig& c, bool force) {
    const Layout layout{c.output_dir};
    fresh_dir(layout.data(), force);
    const auto ds = data::build_dataset(c.data);
    data::write_dataset(layout.data(), ds);
    auto manifest = run_header(c, "synth");
    manifest["data_seed"] = c.data.seed;
    manifest["dataset_hash"] = dir_hash(layout.data());
    manifest["windows"] = {{"train", ds.split_indices("train").size()},
                           {"val", ds.split_indices("val").size()},
                           {"test", ds.split_indices("test").size()}};
    write_json(layout.runs() / "synth.json", manifest);
    log("synthesized " + std::to_string(ds.entries.size()) + " windows into " + layout.data().string());
}

TrainSummary cmd_train(const RunConfig& c, Stage stage, std::optional<std::size_t> steps, bool force) {
    const Layout layout{c.output_dir};
    const std::string name = to_string(stage);
    const auto ds = require_dataset(c, layout);
    const auto train = ds.split("train");

    fs::path dir;
    std::size_t total = 0;
    SeedPurpose init_purpose{}, train_purpose{};
    switch (stage) {
        case Stage::backbone:
            dir = layout.backbone();
            total = c.optimizer.backbone_steps;
            init_purpose = SeedPurpose::backbone_init;
            train_purpose = SeedPurpose::backbone_train;
            break;
        case Stage::rectifier:
            dir = layout.rectifier();
            total = c.optimizer.rectifier_steps;
            init_purpose = SeedPurpose::rectifier_init;
            train_purpose = SeedPurpose::rectifier_train;
            break;
        case Stage::generator:
            dir = layout.generator(c.generator_variant);
            total = c.optimizer.generator_steps;
            init_purpose = SeedPurpose::generator_init;
            train_purpose = SeedPurpose::generator_train;
            break;
    }
    const std::uint64_t init_seed = derive_seed(c.seed, init_purpose);
    const std::uint64_t train_seed = derive_seed(c.seed, train_purpose);

    std::optional<BackboneModel<float>> frozen;
    if (stage != Stage::backbone) frozen.emplace(require_backbone(layout, c, "train --stage " + name));

    if (force && fs::exists(dir)) fs::remove_all(dir);
    const bool resume = fs::exists(dir / "manifest.json");

    AdamState<float> adam;
    std::optional<BackboneModel<float>> backbone;
    std::optional<STUNet<float>> net;
    if (stage == Stage::backbone) {
        backbone.emplace(resume ? load_backbone(dir, &adam, true) : BackboneModel<float>(c.backbone, init_seed));
        if (!(backbone->config() == c.backbone)) {
            throw ConfigError("existing backbone checkpoint has a different config; use --force to retrain");
        }
    } else {
        const auto role = stage == Stage::rectifier ? cascade::FlowRole::rectifier : cascade::FlowRole::generator;
        const auto& want = stage == Stage::rectifier ? c.rectifier : c.generator;
        if (resume) {
            auto loaded = cascade::load_flow_model(dir, role, &adam);
            if (!(loaded.net.config() == want)) {
                throw ConfigError("existing " + name + " checkpoint has a different config; use --force to retrain");
            }
            net.emplace(std::move(loaded.net));
        } else {
            net.emplace(want, init_seed);
        }
    }

    const auto b = budget(adam.step, total, steps);
    TrainSummary summary{b.start, b.start, {}};
    if (b.steps == 0) {
        log(name + " already trained to step " + std::to_string(b.start) + " of " + std::to_string(total));
        return summary;
    }

    auto manifest = run_header(c, "train --stage " + name);
    manifest["stage"] = name;
    manifest["init_seed"] = init_seed;
    manifest["train_seed"] = train_seed;
    manifest["start_step"] = b.start;
    manifest["steps"] = b.steps;
    manifest["schedule_total"] = b.horizon;
    manifest["dataset_hash"] = dir_hash(layout.data());
    if (frozen) manifest["backbone_hash"] = dir_hash(layout.backbone());
    if (stage == Stage::generator) manifest["generator_variant"] = cascade::to_string(c.generator_variant);
    const auto run_path = layout.runs() / ("train_" + name + ".json");
    write_json(run_path, manifest);

    log("training " + name + " steps " + std::to_string(b.start + 1) + ".." + std::to_string(b.start + b.steps));
    std::string trace;
    const auto opts = options_for(c, stage, b, train_seed, trace);
    TrainResult result;
    json extra{{"config_hash", config_hash(c)},
               {"init_seed", init_seed},
               {"train_seed", train_seed},
               {"budget_steps", total},
               {"note", "desk-scale budget; not a paper-scale (200k iteration) model"}};
    if (stage == Stage::backbone) {
        result = train_backbone(*backbone, adam, train, opts);
        save_backbone(dir, *backbone, &adam, extra);
    } else {
        extra["backbone_hash"] = manifest["backbone_hash"];
        if (stage == Stage::rectifier) {
            result = cascade::train_rectifier(*net, adam, *frozen, train, opts);
            save_flow_model(dir, cascade::FlowRole::rectifier, *net, std::nullopt, &adam, extra);
        } else {
            result = cascade::train_generator(*net, adam, *frozen, train, c.generator_variant, opts);
            save_flow_model(dir, cascade::FlowRole::generator, *net, c.generator_variant, &adam, extra);
        }
    }
    append_trace(dir, trace, !resume);

    manifest["final_step"] = result.final_step;
    manifest["final_loss"] = result.losses.back();
    manifest["checkpoint_hash"] = dir_hash(dir);
    write_json(run_path, manifest);
    summary.final_step = result.final_step;
    summary.losses = std::move(result.losses);
    return summary;
}

void cmd_forecast(const RunConfig& c, cascade::ForecastMode mode, bool force) {
    const Layout layout{c.output_dir};
    const auto ds = require_dataset(c, layout);
    const std::string mode_name = cascade::to_string(mode);
    const auto bb = require_backbone(layout, c, "forecast --mode " + mode_name);

    json hashes{{"backbone", dir_hash(layout.backbone())}};
    std::optional<cascade::LoadedFlowModel> rect, gen;
    if (cascade::requires_rectifier(mode)) {
        rect.emplace(cascade::load_flow_model(layout.rectifier(), cascade::FlowRole::rectifier));
        hashes["rectifier"] = dir_hash(layout.rectifier());
    }
    const auto variant = cascade::required_generator(mode);
    if (variant) {
        const auto dir = layout.generator(*variant);
        if (!fs::exists(dir / "manifest.json")) {
            throw PrerequisiteError("generator checkpoint missing: mode " + mode_name + " needs a generator trained as '" +
                                    cascade::to_string(*variant) + "' at " + dir.string() +
                                    " (train --stage generator with that generator_variant)");
        }
        gen.emplace(cascade::load_flow_model(dir, cascade::FlowRole::generator));
        hashes["generator"] = dir_hash(dir);
    }

    const auto fb = cascade::forecaster_of(bb);
    std::optional<cascade::SegmentField> fr, fg;
    if (rect) fr = cascade::field_of(rect->net);
    if (gen) fg = cascade::field_of(gen->net);
    const cascade::CascadeModels models{&fb, fr ? &*fr : nullptr, fg ? &*fg : nullptr,
                                        gen ? gen->variant : std::nullopt};
    const auto schedule =
        cascade::SegmentSchedule::make(c.backbone.input_frames, c.backbone.input_frames, c.backbone.output_frames);

    auto indices = ds.split_indices("test");
    if (c.forecast_samples > 0 && c.forecast_samples < indices.size()) {
        // evenly spaced so a subset still spans every test sequence
        std::vector<std::size_t> picked;
        for (std::size_t k = 0; k < c.forecast_samples; ++k) picked.push_back(indices[k * indices.size() / c.forecast_samples]);
        indices = std::move(picked);
    }
    if (indices.empty()) throw ConfigError("the test split is empty");

    const auto out = layout.forecasts(mode);
    fresh_dir(out, force);
    const std::uint64_t base = derive_seed(c.seed, SeedPurpose::forecast);
    json samples = json::array();
    for (std::size_t k = 0; k < indices.size(); ++k) {
        const auto& entry = ds.entries[indices[k]];
        const cascade::SamplerSettings settings{c.sampler.rectifier_steps, c.sampler.generator_steps,
                                                splitmix64(base + k)};
        const Tensor y = cascade::run_ablation(mode, ds.samples[indices[k]].input, models, schedule, settings);
        save_tensor(out / sample_name(k), y);
        samples.push_back({{"file", sample_name(k)}, {"source", entry.file}, {"seed", settings.seed}});
    }

    const cascade::SamplerSettings steps{c.sampler.rectifier_steps, c.sampler.generator_steps, 0};
    auto manifest = run_header(c, "forecast --mode " + mode_name);
    manifest["mode"] = mode_name;
    manifest["forecast_seed"] = base;
    manifest["sampler"] = {{"rectifier_steps", steps.rectifier_steps}, {"generator_steps", steps.generator_steps}};
    manifest["nfe"] = cascade::nfe_for_mode(mode, schedule, steps, c.sampler.count_first_rectifier_segment);
    manifest["nfe_convention"] = c.sampler.count_first_rectifier_segment
                                     ? "first rectifier segment counted (steps_gen*n + steps_rect*n)"
                                     : "first rectifier segment not counted (steps_gen*n + steps_rect*(n-1))";
    manifest["segments"] = schedule.n_segments();
    manifest["checkpoints"] = hashes;
    manifest["dataset_hash"] = dir_hash(layout.data());
    manifest["samples"] = samples;
    write_json(out / "manifest.json", manifest);
    log("wrote " + std::to_string(indices.size()) + " " + mode_name + " forecasts (NFE " +
        std::to_string(manifest["nfe"].get<std::size_t>()) + ") to " + out.string());
}

metrics::MetricReport cmd_evaluate(const RunConfig& c, cascade::ForecastMode mode, bool force) {
    const Layout layout{c.output_dir};
    const auto ds = require_dataset(c, layout);
    const auto fdir = layout.forecasts(mode);
    const std::string mode_name = cascade::to_string(mode);
    if (!fs::exists(fdir / "manifest.json")) {
        throw PrerequisiteError("no forecasts at " + fdir.string() + ": run `forecast --mode " + mode_name + "` first");
    }
    const json fm = json::parse(read_file_bytes(fdir / "manifest.json"));
    const auto& listed = fm.at("samples");
    if (listed.empty()) throw PrerequisiteError("forecast directory " + fdir.string() + " lists no samples");

    std::map<std::string, std::size_t> by_file;
    for (std::size_t i = 0; i < ds.entries.size(); ++i) by_file[ds.entries[i].file] = i;
    std::vector<Tensor> forecasts, truths;
    std::vector<std::string> offenders;
    for (const auto& s : listed) {
        const std::string file = s.at("file").get<std::string>();
        const std::string source = s.at("source").get<std::string>();
        const auto it = by_file.find(source);
        if (it == by_file.end() || ds.entries[it->second].split != "test") {
            offenders.push_back(file + " (source " + source + " is not a test window)");
            continue;
        }
        if (!fs::exists(fdir / file)) {
            offenders.push_back(file + " (missing)");
            continue;
        }
        Tensor f = load_tensor<float>(fdir / file);
        const Tensor& g = ds.samples[it->second].target;
        if (f.shape() != g.shape()) {
            offenders.push_back(file + " (shape " + shape_to_string(f.shape()) + " vs " + shape_to_string(g.shape()) +
                                ")");
            continue;
        }
        forecasts.push_back(std::move(f));
        truths.push_back(g);
    }
    if (!offenders.empty()) {
        std::string msg = "forecasts not aligned with the test split:";
        for (const auto& o : offenders) msg += "\n  " + o;
        throw ConfigError(msg);
    }

    const auto report = metrics::evaluate(forecasts, truths, c.thresholds);
    const auto curves = metrics::leadtime_curves(forecasts, truths, c.thresholds);
    const auto out = layout.reports(mode);
    fresh_dir(out, force);
    auto rj = report.to_json();
    rj["mode"] = mode_name;
    write_json(out / "report.json", rj);
    write_text(out / "report.csv", report.to_csv());
    std::string lt = "lead,csi,csi4,csi16\n";
    for (std::size_t l = 0; l < curves.csi.size(); ++l) {
        lt += std::to_string(l + 1) + "," + fmt(curves.csi[l]) + "," + fmt(curves.csi4[l]) + "," +
              fmt(curves.csi16[l]) + "\n";
    }
    write_text(out / "leadtime.csv", lt);
    auto manifest = run_header(c, "evaluate --mode " + mode_name);
    manifest["forecast_manifest_hash"] = fnv1a_hex(read_file_bytes(fdir / "manifest.json"));
    manifest["dataset_hash"] = dir_hash(layout.data());
    manifest["thresholds"] = c.thresholds;
    manifest["samples"] = forecasts.size();
    write_json(out / "manifest.json", manifest);
    log(mode_name + ": CSI " + fmt(report.csi_mean(0)) + " CSI4 " + fmt(report.csi_mean(1)) + " CSI16 " +
        fmt(report.csi_mean(2)) + " HSS " + fmt(report.hss_mean()) + " SSIM " + fmt(report.ssim_mean()));
    return report;
}

void cmd_plot(const RunConfig& c, std::vector<fs::path> reports, bool force) {
    const Layout layout{c.output_dir};
    if (reports.empty()) {
        const auto root = layout.root / "reports";
        if (fs::exists(root)) {
            for (const auto& e : fs::directory_iterator(root)) {
                if (fs::exists(e.path() / "report.csv")) reports.push_back(e.path() / "report.csv");
            }
        }
        std::sort(reports.begin(), reports.end());
    }
    if (reports.empty()) throw PrerequisiteError("no report CSVs to plot: run `evaluate` first");
    for (const auto& r : reports) {
        if (!fs::exists(r)) throw PrerequisiteError("report not found: " + r.string());
    }
    const auto out = layout.plots();
    fresh_dir(out, force);
    json inputs = json::array();
    for (const auto& r : reports) inputs.push_back({{"label", r.parent_path().filename().string()},
                                                   {"hash", fnv1a_hex(read_file_bytes(r))}});
    for (const std::string metric : {"csi", "csi4", "csi16", "hss", "ssim"}) {
        std::vector<std::pair<std::string, std::vector<double>>> series;
        for (const auto& r : reports) series.emplace_back(r.parent_path().filename().string(), read_report_curve(r, metric));
        write_text(out / (metric + ".svg"), render_svg(metric, series));
    }
    auto manifest = run_header(c, "plot");
    manifest["reports"] = inputs;
    write_json(out / "manifest.json", manifest);
    log("wrote lead-time plots to " + out.string());
}

}  // namespace recticast::cli
