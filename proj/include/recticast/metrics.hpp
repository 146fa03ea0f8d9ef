#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "recticast/tensor.hpp"

namespace recticast::metrics {

/// Event thresholds on the raw 0-255 scale.
inline const std::vector<double> kDefaultThresholds{16, 74, 133, 160, 181, 219};
inline const std::vector<std::size_t> kPoolSizes{1, 4, 16};

struct BoolGrid {
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<std::uint8_t> cells;

    bool at(std::size_t r, std::size_t c) const { return cells[r * width + c] != 0; }
};

/// Event where the normalized value is >= threshold / 255. frame is [H,W],
/// [1,H,W] or [1,1,H,W].
BoolGrid binarize(const Tensor& frame, double threshold_raw);

struct ContingencyCounts {
    std::uint64_t hits = 0;
    std::uint64_t misses = 0;
    std::uint64_t false_alarms = 0;
    std::uint64_t correct_negatives = 0;

    std::uint64_t total() const { return hits + misses + false_alarms + correct_negatives; }
    /// No event in either field: CSI is undefined and the cell is skipped in averages.
    bool vacuous() const { return hits + misses + false_alarms == 0; }
    ContingencyCounts& operator+=(const ContingencyCounts& o);
    friend bool operator==(const ContingencyCounts&, const ContingencyCounts&) = default;
};

ContingencyCounts contingency(const BoolGrid& pred, const BoolGrid& gt);

/// H / (H + M + F); 1 for a vacuous table.
double csi(const ContingencyCounts& c);
/// 2(HC - MF) / ((H+M)(M+C) + (H+F)(F+C)); 0 when the denominator vanishes.
double hss(const ContingencyCounts& c);

/// k x k max pooling of one [H,W]-like frame; borders are zero-padded up to a
/// multiple of k. Returns [H',W'].
Tensor max_pool(const Tensor& frame, std::size_t k);

/// Pooled CSI of two sequences [L,1,H,W]: counts per (threshold, lead) cell,
/// averaged over non-vacuous cells (1 if all are vacuous).
double pooled_csi(const Tensor& pred, const Tensor& gt, std::size_t k, const std::vector<double>& thresholds);

/// SSIM of two single frames with an 11x11 Gaussian window (sigma 1.5),
/// K1 = 0.01, K2 = 0.03, dynamic range 1, valid-window mean. Frames smaller
/// than the window use a window truncated to the frame.
double ssim_frame(const Tensor& a, const Tensor& b);
/// Mean SSIM over the frames of two [L,1,H,W] sequences.
double ssim(const Tensor& pred, const Tensor& gt);

/// Verification of an aligned set of forecast / ground-truth sequences.
struct MetricReport {
    std::vector<double> thresholds;
    std::size_t leads = 0;
    std::size_t samples = 0;
    /// counts[pool][threshold][lead], pools as in kPoolSizes.
    std::vector<std::vector<std::vector<ContingencyCounts>>> counts;
    std::vector<double> ssim_per_lead;
    std::vector<double> mse_per_lead;

    /// Mean over non-vacuous (threshold, lead) cells.
    double csi_mean(std::size_t pool_index) const;
    double hss_mean() const;
    double ssim_mean() const;
    /// Mean over non-vacuous thresholds at one lead (0-based); NaN if all vacuous.
    double csi_at_lead(std::size_t pool_index, std::size_t lead) const;
    double hss_at_lead(std::size_t lead) const;
    double csi_at_threshold(std::size_t pool_index, std::size_t threshold) const;

    nlohmann::json to_json() const;
    /// Rows `lead,threshold,metric,value`; threshold "mean" marks the
    /// threshold-averaged curve. Vacuous cells are omitted.
    std::string to_csv() const;
};

/// Throws std::invalid_argument on an empty set and DimensionError on
/// misaligned shapes.
MetricReport evaluate(const std::vector<Tensor>& forecasts, const std::vector<Tensor>& truths,
                      const std::vector<double>& thresholds = kDefaultThresholds);

/// Per-lead CSI table (threshold-averaged) for CSI, CSI4 and CSI16.
struct LeadTimeCurves {
    std::vector<double> csi;
    std::vector<double> csi4;
    std::vector<double> csi16;
};
LeadTimeCurves leadtime_curves(const std::vector<Tensor>& forecasts, const std::vector<Tensor>& truths,
                               const std::vector<double>& thresholds = kDefaultThresholds);

/// Spearman rank correlation with average ranks for ties.
double spearman(const std::vector<double>& x, const std::vector<double>& y);

}  // namespace recticast::metrics
