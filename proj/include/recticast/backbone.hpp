#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include <nlohmann/json.hpp>

#include "recticast/datagen.hpp"
#include "recticast/layers.hpp"
#include "recticast/training.hpp"

namespace recticast {

struct BackboneConfig {
    std::size_t channels = 16;        ///< per-frame encoder/decoder width
    std::size_t hidden = 64;          ///< translator width
    std::size_t depth = 2;            ///< translator residual blocks
    std::size_t input_frames = 5;
    std::size_t output_frames = 20;
    std::size_t height = 32;
    std::size_t width = 32;

    friend bool operator==(const BackboneConfig&, const BackboneConfig&) = default;
};

void to_json(nlohmann::json& j, const BackboneConfig& c);
void from_json(const nlohmann::json& j, BackboneConfig& c);

/// Recurrent-free deterministic forecaster: a per-frame strided conv encoder,
/// a translator that mixes time by folding frames into channels at the
/// bottleneck, and a per-frame upsampling decoder with a zero-initialized head.
template <typename T>
class BackboneModel {
public:
    BackboneModel(const BackboneConfig& config, std::uint64_t seed);

    const BackboneConfig& config() const noexcept { return config_; }
    ParamStore<T>& params() noexcept { return params_; }
    const ParamStore<T>& params() const noexcept { return params_; }

    /// x [B*L_in,1,H,W] -> [B*L_out,1,H,W], unclamped (training path).
    ag::Var<T> forward(const ag::Var<T>& x, std::size_t batch) const;

    /// Posterior-mean forecast for one window [L_in,1,H,W] -> [L_out,1,H,W],
    /// clamped to [0,1]. Pure and deterministic.
    BasicTensor<T> predict(const BasicTensor<T>& x) const;

    /// Batched predict: inputs stacked along the leading axis.
    BasicTensor<T> predict_batch(const BasicTensor<T>& x, std::size_t batch) const;

    /// First m frames of predict(segment); requires m == L_in.
    BasicTensor<T> predict_segment_head(const BasicTensor<T>& segment) const;

    void freeze() { params_.set_trainable(false); }
    bool frozen() const { return !params_.trainable(); }

private:
    struct ConvNormAct {
        Conv2dLayer<T> conv;
        GroupNormLayer<T> norm;
        ag::Var<T> operator()(const ag::Var<T>& x) const { return ag::silu(norm(conv(x))); }
    };
    struct ResBlock {
        Conv2dLayer<T> conv1;
        GroupNormLayer<T> norm;
        Conv2dLayer<T> conv2;
    };

    ConvNormAct make_cna(const std::string& name, std::size_t in, std::size_t out, std::size_t k, std::size_t stride,
                         Rng& rng);

    BackboneConfig config_;
    ParamStore<T> params_;
    std::vector<ConvNormAct> encoder_;
    ConvNormAct translator_in_;
    std::vector<ResBlock> translator_;
    Conv2dLayer<T> translator_out_;
    std::vector<ConvNormAct> decoder_;
    Conv2dLayer<T> head_;
};

void validate(const BackboneConfig& config);

/// Trains with the MSE objective on randomly drawn windows. Throws
/// ConfigError on an empty sample set and NumericError on a non-finite loss.
TrainResult train_backbone(BackboneModel<float>& model, AdamState<float>& adam,
                           const std::vector<data::WindowSample>& samples, const TrainOptions& options);

/// MSE of the batch loss computed through the model (used for the first-batch check).
double backbone_batch_mse(const BackboneModel<float>& model, const std::vector<data::WindowSample>& batch);

/// Stack window inputs (or targets) into [B*L,1,H,W].
Tensor stack_inputs(const std::vector<data::WindowSample>& batch);
Tensor stack_targets(const std::vector<data::WindowSample>& batch);

void save_backbone(const std::filesystem::path& dir, const BackboneModel<float>& model, const AdamState<float>* adam,
                   nlohmann::json extra);
/// Loads config + weights; the returned model is frozen unless `trainable`.
BackboneModel<float> load_backbone(const std::filesystem::path& dir, AdamState<float>* adam = nullptr,
                                   bool trainable = false);

}  // namespace recticast
