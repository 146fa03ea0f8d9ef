#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "recticast/backbone.hpp"
#include "recticast/cascade.hpp"
#include "recticast/datagen.hpp"
#include "recticast/metrics.hpp"
#include "recticast/stunet.hpp"

namespace recticast::cli {

struct OptimizerSpec {
    double lr_max = 1e-4;
    double lr_min = 1e-7;
    std::optional<double> flow_lr_max;  ///< rectifier/generator peak, defaults to lr_max
    std::size_t batch = 4;
    std::size_t backbone_steps = 3000;
    std::size_t rectifier_steps = 5000;
    std::size_t generator_steps = 5000;
};

struct SamplerSpec {
    std::size_t rectifier_steps = 20;
    std::size_t generator_steps = 20;
    bool count_first_rectifier_segment = true;  ///< NFE convention, see nfe_count
};

/// Everything a run needs. Per-purpose seeds are derived from `seed`, so the
/// data block may not carry its own.
struct RunConfig {
    std::uint64_t seed = 0;
    data::DatasetSpec data;
    BackboneConfig backbone;
    STUNetConfig rectifier;
    STUNetConfig generator;
    cascade::GeneratorVariant generator_variant = cascade::GeneratorVariant::rectified;
    OptimizerSpec optimizer;
    SamplerSpec sampler;
    std::vector<double> thresholds;
    std::size_t forecast_samples = 0;  ///< evenly spaced test windows to forecast, 0 = all
    std::filesystem::path output_dir = "runs/default";
};

/// Strict parse: unknown keys, bad types and inconsistent sizes are
/// ConfigErrors. Fills frame counts, image size and the segment vocabulary
/// from the data and backbone blocks.
RunConfig parse_config(const nlohmann::json& j);
RunConfig load_config(const std::filesystem::path& path);
RunConfig default_config();

/// Resolved config without the output directory (which never affects results).
nlohmann::json to_json(const RunConfig& c);
std::string config_hash(const RunConfig& c);

enum class SeedPurpose : std::uint64_t {
    data = 1,
    backbone_init,
    backbone_train,
    rectifier_init,
    rectifier_train,
    generator_init,
    generator_train,
    forecast,
};
std::uint64_t derive_seed(std::uint64_t seed, SeedPurpose purpose);

enum class Stage { backbone, rectifier, generator };
std::string to_string(Stage s);
Stage stage_from_string(const std::string& s);

/// Output layout under RunConfig::output_dir.
struct Layout {
    std::filesystem::path root;

    std::filesystem::path data() const { return root / "data"; }
    std::filesystem::path backbone() const { return root / "checkpoints" / "backbone"; }
    std::filesystem::path rectifier() const { return root / "checkpoints" / "rectifier"; }
    std::filesystem::path generator(cascade::GeneratorVariant v) const {
        return root / "checkpoints" / ("generator_" + cascade::to_string(v));
    }
    std::filesystem::path forecasts(cascade::ForecastMode m) const { return root / "forecasts" / cascade::to_string(m); }
    std::filesystem::path reports(cascade::ForecastMode m) const { return root / "reports" / cascade::to_string(m); }
    std::filesystem::path plots() const { return root / "plots"; }
    std::filesystem::path runs() const { return root / "runs"; }
};

struct TrainSummary {
    std::size_t start_step = 0;
    std::size_t final_step = 0;
    std::vector<double> losses;
};

void cmd_synth(const RunConfig& config, bool force);
/// Continues from an existing checkpoint unless `force`; `steps` overrides
/// the remaining budget for this call.
TrainSummary cmd_train(const RunConfig& config, Stage stage, std::optional<std::size_t> steps, bool force);
void cmd_forecast(const RunConfig& config, cascade::ForecastMode mode, bool force);
metrics::MetricReport cmd_evaluate(const RunConfig& config, cascade::ForecastMode mode, bool force);
/// Reports default to every reports/<mode>/report.csv under the run.
void cmd_plot(const RunConfig& config, std::vector<std::filesystem::path> reports, bool force);

/// Lead-time polylines of one metric, one per labelled report CSV.
std::string render_svg(const std::string& metric,
                       const std::vector<std::pair<std::string, std::vector<double>>>& series);

/// Threshold-averaged per-lead values of `metric` from a report CSV;
/// FormatError with the line number on malformed input.
std::vector<double> read_report_curve(const std::filesystem::path& csv, const std::string& metric);

/// Full command line: parses, dispatches and maps errors to exit codes
/// (0 ok, 2 config, 3 missing prerequisite, 4 numeric, 1 other).
int run(int argc, char** argv);

}  // namespace recticast::cli
