#include <cstdlib>
#include <iostream>

#include "CLI11.hpp"
#include "recticast/cli.hpp"
#include "recticast/errors.hpp"
#include "recticast/tensor_io.hpp"

namespace recticast::cli {

namespace {

struct Common {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string out;
    bool force = false;
};

void add_common(CLI::App* cmd, Common& c) {
    cmd->add_option("--config", c.config, "run config (JSON)")->check(CLI::ExistingFile);
    cmd->add_option("--seed", c.seed, "override the config seed");
    cmd->add_option("--out", c.out, "output directory (overrides config and RECTICAST_OUT)");
    cmd->add_flag("--force", c.force, "replace existing outputs / restart training");
}

RunConfig resolve(const Common& c) {
    nlohmann::json j = nlohmann::json::object();
    if (!c.config.empty()) {
        try {
            j = nlohmann::json::parse(read_file_bytes(c.config));
        } catch (const nlohmann::json::parse_error& e) {
            throw ConfigError("config " + c.config + ": " + e.what());
        }
    }
    if (c.seed) j["seed"] = *c.seed;
    RunConfig rc = parse_config(j);
    if (!c.out.empty()) {
        rc.output_dir = c.out;
    } else if (const char* env = std::getenv("RECTICAST_OUT"); env && *env) {
        rc.output_dir = env;
    }
    return rc;
}

}  // namespace

int run(int argc, char** argv) {
    CLI::App app{"RectiCast: cascaded flow-matching precipitation nowcasting at desk scale"};
    app.require_subcommand(1, 1);
    Common common;

    auto* synth = app.add_subcommand("synth", "generate the synthetic radar dataset");
    add_common(synth, common);

    auto* train = app.add_subcommand("train", "train one stage (backbone first, then rectifier/generator)");
    add_common(train, common);
    std::string stage;
    std::optional<std::size_t> steps;
    train->add_option("--stage", stage, "backbone | rectifier | generator")->required();
    train->add_option("--steps", steps, "optimizer steps to run now (default: the rest of the budget)");

    auto* forecast = app.add_subcommand("forecast", "forecast the test split");
    add_common(forecast, common);
    std::string mode = "full";
    forecast->add_option("--mode", mode, "full | backbone_only | no_rectifier_y | no_rectifier_residual | no_generator");

    auto* evaluate = app.add_subcommand("evaluate", "score forecasts against the test split");
    add_common(evaluate, common);
    evaluate->add_option("--mode", mode, "which forecast directory to score");

    auto* plot = app.add_subcommand("plot", "SVG lead-time curves from report CSVs");
    add_common(plot, common);
    std::vector<std::string> reports;
    plot->add_option("reports", reports, "report CSVs (default: every reports/*/report.csv of the run)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        const RunConfig config = resolve(common);
        if (synth->parsed()) {
            cmd_synth(config, common.force);
        } else if (train->parsed()) {
            cmd_train(config, stage_from_string(stage), steps, common.force);
        } else if (forecast->parsed()) {
            cmd_forecast(config, cascade::forecast_mode_from_string(mode), common.force);
        } else if (evaluate->parsed()) {
            cmd_evaluate(config, cascade::forecast_mode_from_string(mode), common.force);
        } else if (plot->parsed()) {
            cmd_plot(config, {reports.begin(), reports.end()}, common.force);
        }
        return 0;
    } catch (const PrerequisiteError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 3;
    } catch (const NumericError& e) {
        std::cerr << "numeric failure: " << e.what() << '\n';
        return 4;
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return 2;
    } catch (const DimensionError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return 2;
    } catch (const FormatError& e) {
        std::cerr << "input error: " << e.what() << '\n';
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
}

}  // namespace recticast::cli
