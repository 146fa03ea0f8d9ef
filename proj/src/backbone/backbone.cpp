#include "recticast/backbone.hpp"

#include <fstream>

#include "recticast/tensor_io.hpp"

namespace recticast {

void to_json(nlohmann::json& j, const BackboneConfig& c) {
    j = nlohmann::json{{"channels", c.channels},         {"hidden", c.hidden},
                       {"depth", c.depth},               {"input_frames", c.input_frames},
                       {"output_frames", c.output_frames}, {"height", c.height},
                       {"width", c.width}};
}

void from_json(const nlohmann::json& j, BackboneConfig& c) {
    static const char* known[] = {"channels", "hidden", "depth", "input_frames", "output_frames", "height", "width"};
    for (const auto& [key, _] : j.items()) {
        if (std::find(std::begin(known), std::end(known), key) == std::end(known)) {
            throw ConfigError("unknown backbone key '" + key + "'");
        }
    }
    BackboneConfig d;
    c.channels = j.value("channels", d.channels);
    c.hidden = j.value("hidden", d.hidden);
    c.depth = j.value("depth", d.depth);
    c.input_frames = j.value("input_frames", d.input_frames);
    c.output_frames = j.value("output_frames", d.output_frames);
    c.height = j.value("height", d.height);
    c.width = j.value("width", d.width);
}

void validate(const BackboneConfig& c) {
    if (c.channels == 0 || c.hidden == 0 || c.input_frames == 0 || c.output_frames == 0) {
        throw ConfigError("backbone: channels, hidden, input_frames and output_frames must be positive");
    }
    if (c.height % 4 != 0 || c.width % 4 != 0 || c.height < 4 || c.width < 4) {
        throw ConfigError("backbone: height and width must be positive multiples of 4");
    }
}

template <typename T>
typename BackboneModel<T>::ConvNormAct BackboneModel<T>::make_cna(const std::string& name, std::size_t in,
                                                                  std::size_t out, std::size_t k, std::size_t stride,
                                                                  Rng& rng) {
    return ConvNormAct{Conv2dLayer<T>(params_, name + ".conv", in, out, k, stride, rng),
                       GroupNormLayer<T>(params_, name + ".norm", out)};
}

template <typename T>
BackboneModel<T>::BackboneModel(const BackboneConfig& config, std::uint64_t seed) : config_(config) {
    validate(config_);
    Rng rng(seed);
    const std::size_t c = config_.channels;
    encoder_.push_back(make_cna("enc0", 1, c, 3, 1, rng));
    encoder_.push_back(make_cna("enc1", c, c, 3, 2, rng));
    encoder_.push_back(make_cna("enc2", c, c, 3, 2, rng));
    translator_in_ = make_cna("translator.in", config_.input_frames * c, config_.hidden, 1, 1, rng);
    for (std::size_t d = 0; d < config_.depth; ++d) {
        const std::string n = "translator.block" + std::to_string(d);
        translator_.push_back(ResBlock{Conv2dLayer<T>(params_, n + ".conv1", config_.hidden, config_.hidden, 3, 1, rng),
                                       GroupNormLayer<T>(params_, n + ".norm", config_.hidden),
                                       Conv2dLayer<T>(params_, n + ".conv2", config_.hidden, config_.hidden, 3, 1, rng)});
    }
    translator_out_ = Conv2dLayer<T>(params_, "translator.out", config_.hidden, config_.output_frames * c, 1, 1, rng);
    decoder_.push_back(make_cna("dec0", c, c, 3, 1, rng));
    decoder_.push_back(make_cna("dec1", c, c, 3, 1, rng));
    head_ = Conv2dLayer<T>(params_, "head", c, 1, 1, 1, rng, /*zero_init=*/true);
}

template <typename T>
ag::Var<T> BackboneModel<T>::forward(const ag::Var<T>& x, std::size_t batch) const {
    const auto& s = x.shape();
    if (s.size() != 4 || batch == 0 || s[0] != batch * config_.input_frames || s[1] != 1 ||
        s[2] != config_.height || s[3] != config_.width) {
        throw DimensionError("backbone: expected [" + std::to_string(batch * config_.input_frames) + ",1," +
                             std::to_string(config_.height) + "," + std::to_string(config_.width) + "], got " +
                             shape_to_string(s));
    }
    const std::size_t c = config_.channels;
    const std::size_t h4 = config_.height / 4, w4 = config_.width / 4;
    ag::Var<T> h = x;
    for (const auto& layer : encoder_) h = layer(h);
    h = ag::reshape(h, {batch, config_.input_frames * c, h4, w4});
    h = translator_in_(h);
    for (const auto& block : translator_) {
        auto r = block.conv2(ag::silu(block.norm(block.conv1(h))));
        h = ag::add(h, r);
    }
    h = translator_out_(h);
    h = ag::reshape(h, {batch * config_.output_frames, c, h4, w4});
    for (const auto& layer : decoder_) h = layer(ag::upsample2x(h));
    return head_(h);
}

template <typename T>
BasicTensor<T> BackboneModel<T>::predict_batch(const BasicTensor<T>& x, std::size_t batch) const {
    ag::NoGradGuard guard;
    BasicTensor<T> out = forward(ag::constant(x), batch).value();
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] = std::clamp(out[i], T{0}, T{1});
    return out;
}

template <typename T>
BasicTensor<T> BackboneModel<T>::predict(const BasicTensor<T>& x) const {
    if (x.dim() != 4 || x.shape()[0] != config_.input_frames) {
        throw DimensionError("backbone: expected " + std::to_string(config_.input_frames) + " input frames, got " +
                             shape_to_string(x.shape()));
    }
    return predict_batch(x, 1);
}

template <typename T>
BasicTensor<T> BackboneModel<T>::predict_segment_head(const BasicTensor<T>& segment) const {
    if (segment.dim() != 4 || segment.shape()[0] != config_.input_frames) {
        throw ConfigError("segment length " + std::to_string(segment.dim() ? segment.shape()[0] : 0) +
                          " must equal the backbone input length " + std::to_string(config_.input_frames));
    }
    return predict(segment).slice0(0, config_.input_frames);
}

template class BackboneModel<float>;
template class BackboneModel<double>;

Tensor stack_inputs(const std::vector<data::WindowSample>& batch) {
    std::vector<Tensor> parts;
    parts.reserve(batch.size());
    for (const auto& s : batch) parts.push_back(s.input);
    return concat0<float>(std::span<const Tensor>(parts));
}

Tensor stack_targets(const std::vector<data::WindowSample>& batch) {
    std::vector<Tensor> parts;
    parts.reserve(batch.size());
    for (const auto& s : batch) parts.push_back(s.target);
    return concat0<float>(std::span<const Tensor>(parts));
}

double backbone_batch_mse(const BackboneModel<float>& model, const std::vector<data::WindowSample>& batch) {
    ag::NoGradGuard guard;
    auto pred = model.forward(ag::constant(stack_inputs(batch)), batch.size());
    return ag::mse_loss(pred, ag::constant(stack_targets(batch))).value()[0];
}

TrainResult train_backbone(BackboneModel<float>& model, AdamState<float>& adam,
                           const std::vector<data::WindowSample>& samples, const TrainOptions& options) {
    if (samples.empty()) {
        throw ConfigError("train_backbone: the training split is empty");
    }
    if (options.batch == 0) {
        throw ConfigError("train_backbone: batch size must be positive");
    }
    return run_training(model.params(), adam, options, [&](Rng& rng, std::size_t) {
        std::vector<data::WindowSample> batch;
        batch.reserve(options.batch);
        for (std::size_t b = 0; b < options.batch; ++b) batch.push_back(samples[rng.below(samples.size())]);
        auto pred = model.forward(ag::constant(stack_inputs(batch)), batch.size());
        return ag::mse_loss(pred, ag::constant(stack_targets(batch)));
    });
}

void save_backbone(const std::filesystem::path& dir, const BackboneModel<float>& model, const AdamState<float>* adam,
                   nlohmann::json extra) {
    extra["kind"] = "backbone";
    extra["architecture"] = model.config();
    save_checkpoint(dir, model.params(), adam, extra);
}

BackboneModel<float> load_backbone(const std::filesystem::path& dir, AdamState<float>* adam, bool trainable) {
    const auto manifest = read_checkpoint_manifest(dir);
    if (manifest.value("kind", "") != "backbone") {
        throw ConfigError(dir.string() + " is not a backbone checkpoint");
    }
    BackboneModel<float> model(manifest.at("architecture").get<BackboneConfig>(), 0);
    load_checkpoint(dir, model.params(), adam);
    model.params().set_trainable(trainable);
    return model;
}

}  // namespace recticast
