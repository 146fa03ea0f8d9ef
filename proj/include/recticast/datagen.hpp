#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "recticast/tensor.hpp"

namespace recticast::data {

inline constexpr double kFullScale = 255.0;

/// Parameters of the advection-diffusion storm surrogate. Each cell is a
/// Gaussian blob on its own toroidal grid that is advected, diffused and
/// multiplied by a stochastic growth factor every frame; the frame is the
/// clipped sum over cells.
struct SynthParams {
    std::size_t n_cells = 5;
    double velocity_x = 0.0;       ///< mean advection, pixels per frame
    double velocity_y = 0.0;
    double velocity_jitter = 1.2;  ///< per-sequence uniform perturbation of each velocity component
    double diffusion = 0.03;       ///< explicit diffusion coefficient (stable for <= 0.25)
    double growth = -0.01;         ///< mean log-amplitude change per frame
    double noise = 0.08;           ///< std of the per-cell log-amplitude increment per frame
    double min_radius = 2.0;
    double max_radius = 4.5;
    double min_peak = 0.45;
    double max_peak = 1.0;

    friend bool operator==(const SynthParams&, const SynthParams&) = default;
};

void to_json(nlohmann::json& j, const SynthParams& p);
void from_json(const nlohmann::json& j, SynthParams& p);

struct RadarSequence {
    Tensor frames;  ///< [T,1,H,W], values in [0,1]
    std::uint64_t seed = 0;
    std::size_t index = 0;
};

struct WindowSample {
    Tensor input;   ///< [L_in,1,H,W]
    Tensor target;  ///< [L_out,1,H,W]
};

struct Segment {
    Tensor frames;  ///< [m,1,H,W]
    std::size_t index = 1;
};

/// Deterministic given (seed, params); sequence k depends only on (seed, k).
std::vector<RadarSequence> synth_advection(std::uint64_t seed, std::size_t n_sequences, std::size_t frames,
                                           std::size_t height, std::size_t width, const SynthParams& params);

/// Single sequence `index` of the family generated by synth_advection(seed, ...).
RadarSequence synth_sequence(std::uint64_t seed, std::size_t index, std::size_t frames, std::size_t height,
                             std::size_t width, const SynthParams& params);

/// Windows starting at 0, stride, 2*stride, ...; the first split_in frames of
/// each window are input, the rest target. Returns copies.
std::vector<WindowSample> window_samples(const RadarSequence& seq, std::size_t window = 25, std::size_t stride = 5,
                                         std::size_t split_in = 5);

/// Raw 0-255 values to [0,1]. Out-of-range inputs are clamped and counted.
struct NormalizeResult {
    Tensor values;
    std::size_t clamped = 0;
};
NormalizeResult normalize(const Tensor& raw);
Tensor denormalize(const Tensor& normalized);
inline double normalize_value(double raw) { return raw / kFullScale; }

/// Split a tensor [L,...] into consecutive length-m segments (last truncated).
std::vector<Tensor> split_segments(const Tensor& frames, std::size_t m);

// Dataset directory: manifest.json plus samples/<split>_<nnnnn>.rten holding
// each window as one [window,1,H,W] tensor.

struct DatasetSpec {
    std::uint64_t seed = 0;
    std::size_t height = 32;
    std::size_t width = 32;
    std::size_t frames = 49;  ///< raw sequence length (SEVIR-like)
    std::size_t window = 25;
    std::size_t stride = 5;
    std::size_t split_in = 5;
    std::size_t train_sequences = 24;
    std::size_t val_sequences = 4;
    std::size_t test_sequences = 8;
    SynthParams synth;

    friend bool operator==(const DatasetSpec&, const DatasetSpec&) = default;
};

void to_json(nlohmann::json& j, const DatasetSpec& s);
void from_json(const nlohmann::json& j, DatasetSpec& s);

/// Rejects sizes the U-Net/backbone cannot handle.
void validate(const DatasetSpec& spec);

struct DatasetEntry {
    std::string file;
    std::string split;
    std::size_t sequence = 0;
    std::size_t offset = 0;
};

struct Dataset {
    DatasetSpec spec;
    std::vector<DatasetEntry> entries;
    std::vector<WindowSample> samples;  ///< parallel to entries

    std::vector<WindowSample> split(const std::string& name) const;
    std::vector<std::size_t> split_indices(const std::string& name) const;
};

/// In-memory dataset for a spec (sequence-level train/val/test split).
Dataset build_dataset(const DatasetSpec& spec);

void write_dataset(const std::filesystem::path& dir, const Dataset& dataset);
Dataset read_dataset(const std::filesystem::path& dir);

}  // namespace recticast::data
