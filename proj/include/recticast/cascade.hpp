#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "recticast/backbone.hpp"
#include "recticast/flow.hpp"
#include "recticast/stunet.hpp"

namespace recticast::cascade {

/// Splits the L_out-frame horizon into n = ceil(L_out / m) segments of m
/// frames; the last one is truncated when m does not divide L_out.
struct SegmentSchedule {
    std::size_t m = 5;
    std::size_t output_frames = 20;

    /// Requires m == input_frames.
    static SegmentSchedule make(std::size_t m, std::size_t input_frames, std::size_t output_frames);

    std::size_t n_segments() const { return (output_frames + m - 1) / m; }
    /// Frame range [begin, end) of 1-based segment i within the horizon.
    std::size_t begin(std::size_t i) const { return (i - 1) * m; }
    std::size_t end(std::size_t i) const { return std::min(i * m, output_frames); }
};

/// Per-segment autoregressive state; vectors are indexed by i - 1.
struct CascadeState {
    Tensor y0;  ///< last m input frames
    std::vector<Tensor> mu_raw;
    std::vector<Tensor> mu_rec;
    std::vector<Tensor> y_hat;
};

/// Deterministic mean forecaster D: [L_in,1,H,W] -> [L_out,1,H,W].
struct MeanForecaster {
    std::function<Tensor(const Tensor&)> forecast;
    std::size_t input_frames = 5;
    std::size_t output_frames = 20;

    /// First m frames of forecast(segment), the rectification target operator.
    Tensor segment_head(const Tensor& segment) const;
};

MeanForecaster forecaster_of(const BackboneModel<float>& backbone);

/// Velocity field of a segment-level flow network.
using SegmentField = std::function<Tensor(const Tensor&, const ConditionBundle<float>&, float)>;

SegmentField field_of(const STUNet<float>& net);

/// What the Generator conditions on through its side encoder and what it learns.
enum class GeneratorVariant {
    rectified,  ///< side = rectified mean, target y_i (full model)
    raw_mean,   ///< side = raw mean, target y_i (no Rectifier, learns y)
    residual,   ///< side = raw mean, target y_i - raw mean (no Rectifier, learns the residual)
};

enum class ForecastMode { full, backbone_only, no_rectifier_y, no_rectifier_residual, no_generator };

std::string to_string(GeneratorVariant v);
GeneratorVariant generator_variant_from_string(const std::string& s);
std::string to_string(ForecastMode m);
ForecastMode forecast_mode_from_string(const std::string& s);
/// Generator variant a mode needs, or nullopt when it uses no Generator.
std::optional<GeneratorVariant> required_generator(ForecastMode mode);
bool requires_rectifier(ForecastMode mode);

/// Repeats the last frame so a truncated segment has m frames.
Tensor pad_segment(const Tensor& segment, std::size_t m);

/// Rectification targets mu_rec_i = D(s_{i-1})_1 for i = 2..n; element i-1
/// of the result, element 0 (segment 1) is empty because no rectification applies.
std::vector<std::optional<Tensor>> rectifier_targets(const data::WindowSample& sample, const MeanForecaster& backbone,
                                                     const SegmentSchedule& schedule);

/// One teacher-forced flow-matching example.
struct FlowExample {
    Tensor target;         ///< x of the flow path
    Tensor backbone_cond;  ///< concatenated with z_t
    Tensor side_cond;      ///< side-encoder input
    std::size_t segment_index = 1;
};

using ExampleObserver = std::function<void(std::size_t sample, const FlowExample&)>;

/// Rectifier examples for i = 2..n: target D(s_{i-1})_1, backbone condition
/// mu_raw_i, side condition D(s_{i-2})_1 with s_0 the input window.
std::vector<FlowExample> rectifier_examples(const data::WindowSample& sample, const MeanForecaster& backbone,
                                            const SegmentSchedule& schedule);

/// Generator examples for i = 1..n with s_0 the last m input frames:
/// backbone condition s_{i-1}; side condition D(s_{i-1})_1 (rectified),
/// or mu_raw_i (raw_mean / residual); target y_i, or y_i - mu_raw_i (residual).
std::vector<FlowExample> generator_examples(const data::WindowSample& sample, const MeanForecaster& backbone,
                                            const SegmentSchedule& schedule, GeneratorVariant variant);

/// Flow-matching training on precomputed examples.
TrainResult train_flow(STUNet<float>& net, AdamState<float>& adam, const std::vector<FlowExample>& examples,
                       bool use_segment_index, const TrainOptions& options);

/// Stage-2 entry points. The backbone must be frozen (InvariantError
/// otherwise) and is only read. `observer` sees every teacher-forced example.
TrainResult train_rectifier(STUNet<float>& rectifier, AdamState<float>& adam, const BackboneModel<float>& backbone,
                            const std::vector<data::WindowSample>& samples, const TrainOptions& options,
                            const ExampleObserver& observer = {});
TrainResult train_generator(STUNet<float>& generator, AdamState<float>& adam, const BackboneModel<float>& backbone,
                            const std::vector<data::WindowSample>& samples, GeneratorVariant variant,
                            const TrainOptions& options, const ExampleObserver& observer = {});

struct SamplerSettings {
    std::size_t rectifier_steps = 20;
    std::size_t generator_steps = 20;
    std::uint64_t seed = 0;
};

enum class FlowRole { rectifier, generator };

/// Seed of the Euler noise for one segment of one forecast.
std::uint64_t segment_seed(std::uint64_t base, FlowRole role, std::size_t segment);

/// mu_rec_1 = mu_raw_1; for i >= 2 samples the Rectifier conditioned on
/// (mu_raw_i, mu_rec_{i-1}, i), strictly in segment order. Sampled means are
/// clamped to [0,1].
std::vector<Tensor> rectify_sequence(const std::vector<Tensor>& mu_raw, const SegmentField& rectifier,
                                     std::size_t steps, std::uint64_t seed);

/// Models needed by a forecast mode; unused ones may be null.
struct CascadeModels {
    const MeanForecaster* backbone = nullptr;
    const SegmentField* rectifier = nullptr;
    const SegmentField* generator = nullptr;
    std::optional<GeneratorVariant> generator_variant;
};

/// Forecast for one input window [L_in,1,H,W] -> [L_out,1,H,W] in the given
/// mode. Throws ConfigError when a required model is absent or the
/// Generator's variant does not match the mode.
Tensor run_ablation(ForecastMode mode, const Tensor& input, const CascadeModels& models,
                    const SegmentSchedule& schedule, const SamplerSettings& settings, CascadeState* state = nullptr);

/// Full model: backbone -> Rectifier -> Generator.
Tensor generate_forecast(const Tensor& input, const CascadeModels& models, const SegmentSchedule& schedule,
                         const SamplerSettings& settings, CascadeState* state = nullptr);

/// steps_gen * n + steps_rect * (n - 1 + [count_first_rect_segment]).
std::size_t nfe_count(const SegmentSchedule& schedule, std::size_t steps_rect, std::size_t steps_gen,
                      bool count_first_rect_segment);

/// Flow-network evaluations a mode performs per forecast under the counting convention.
std::size_t nfe_for_mode(ForecastMode mode, const SegmentSchedule& schedule, const SamplerSettings& settings,
                         bool count_first_rect_segment);

// Flow checkpoints: same layout as the backbone's, kind "rectifier" / "generator".

void save_flow_model(const std::filesystem::path& dir, FlowRole role, const STUNet<float>& net,
                     std::optional<GeneratorVariant> variant, const AdamState<float>* adam, nlohmann::json extra);

struct LoadedFlowModel {
    STUNet<float> net;
    std::optional<GeneratorVariant> variant;
    nlohmann::json manifest;
};

/// Throws PrerequisiteError naming the role when the checkpoint is missing.
LoadedFlowModel load_flow_model(const std::filesystem::path& dir, FlowRole role, AdamState<float>* adam = nullptr);

std::string to_string(FlowRole role);

}  // namespace recticast::cascade
