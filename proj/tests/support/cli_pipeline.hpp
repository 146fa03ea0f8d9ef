#pragma once

#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "recticast/cli.hpp"
#include "recticast/tensor_io.hpp"

namespace recticast::testing {

/// Smallest config the whole pipeline accepts: 32x32 frames, two training
/// sequences, few-step training and 2-step samplers.
inline nlohmann::json tiny_config() {
    return nlohmann::json::parse(R"({
      "seed": 7,
      "data": {"frames": 30, "train_sequences": 2, "val_sequences": 1, "test_sequences": 1},
      "backbone": {"channels": 4, "hidden": 8, "depth": 1},
      "rectifier": {"base_channels": 4, "time_dim": 8, "embed_dim": 8},
      "generator": {"base_channels": 4, "time_dim": 8, "embed_dim": 8},
      "optimizer": {"lr_max": 1e-3, "lr_min": 1e-5, "batch": 2,
                    "backbone_steps": 3, "rectifier_steps": 3, "generator_steps": 3},
      "sampler": {"rectifier_steps": 2, "generator_steps": 2},
      "forecast_samples": 2
    })");
}

inline std::filesystem::path write_config(const std::filesystem::path& path, const nlohmann::json& j) {
    std::ofstream(path) << j.dump(2);
    return path;
}

/// Runs the command-line entry point in-process.
inline int run_cli(std::vector<std::string> args) {
    args.insert(args.begin(), "recticast");
    std::vector<char*> argv;
    for (auto& a : args) argv.push_back(a.data());
    return cli::run(static_cast<int>(argv.size()), argv.data());
}

/// Relative path -> content digest for every file under `root`.
inline std::map<std::string, std::string> tree_digest(const std::filesystem::path& root) {
    std::map<std::string, std::string> out;
    for (const auto& e : std::filesystem::recursive_directory_iterator(root)) {
        if (e.is_regular_file()) {
            out[std::filesystem::relative(e.path(), root).string()] = fnv1a_hex(read_file_bytes(e.path()));
        }
    }
    return out;
}

/// synth -> train (all stages) -> forecast (full, backbone_only) -> evaluate -> plot.
/// Returns the first non-zero exit code, or 0.
inline int run_tiny_pipeline(const std::filesystem::path& config, const std::filesystem::path& out) {
    const std::vector<std::vector<std::string>> steps = {
        {"synth"},
        {"train", "--stage", "backbone"},
        {"train", "--stage", "rectifier"},
        {"train", "--stage", "generator"},
        {"forecast", "--mode", "full"},
        {"forecast", "--mode", "backbone_only"},
        {"evaluate", "--mode", "full"},
        {"evaluate", "--mode", "backbone_only"},
        {"plot"},
    };
    for (auto args : steps) {
        args.insert(args.end(), {"--config", config.string(), "--out", out.string()});
        if (int code = run_cli(args); code != 0) return code;
    }
    return 0;
}

}  // namespace recticast::testing
