#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <vector>

#include <nlohmann/json.hpp>

#include "recticast/optim.hpp"

namespace recticast {

struct TrainOptions {
    std::size_t steps = 1000;        ///< optimizer steps to run in this call
    std::size_t batch = 4;
    double lr_max = 1e-4;
    double lr_min = 1e-7;
    std::size_t schedule_total = 0;  ///< cosine horizon; 0 means start_step + steps
    std::uint64_t seed = 0;
    /// Called after every optimizer step with (global step, loss, lr).
    std::function<void(std::size_t, double, double)> on_step;
};

struct TrainResult {
    std::vector<double> losses;  ///< one per optimizer step
    std::size_t final_step = 0;
};

/// Generic optimizer loop. `loss_fn(rng, step)` builds the scalar loss for one
/// batch; the loop runs backward, Adam and the cosine schedule. A non-finite
/// loss aborts with NumericError before the update, leaving the parameters
/// at their last finite state.
TrainResult run_training(ParamStore<float>& params, AdamState<float>& adam, const TrainOptions& options,
                         const std::function<ag::Var<float>(Rng&, std::size_t)>& loss_fn);

void to_json(nlohmann::json& j, const TrainOptions& o);

// Checkpoint directory: manifest.json + params/<name>.rten (+ adam/ moments).

void save_checkpoint(const std::filesystem::path& dir, const ParamStore<float>& params,
                     const AdamState<float>* adam, const nlohmann::json& manifest);

/// Loads parameter values into `params` (names and shapes must match) and,
/// when `adam` is given and moments were saved, restores the optimizer.
nlohmann::json load_checkpoint(const std::filesystem::path& dir, ParamStore<float>& params,
                               AdamState<float>* adam);

nlohmann::json read_checkpoint_manifest(const std::filesystem::path& dir);

/// Digest over every file in the checkpoint, in sorted path order.
std::string checkpoint_hash(const std::filesystem::path& dir);

}  // namespace recticast
