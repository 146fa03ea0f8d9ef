#include "recticast/cascade.hpp"

#include <algorithm>

#include "recticast/errors.hpp"
#include "recticast/rng.hpp"

namespace recticast::cascade {

namespace {

Tensor clamp01(Tensor t) {
    for (auto& v : t.span()) v = std::clamp(v, 0.0f, 1.0f);
    return t;
}

Tensor head(const Tensor& frames, std::size_t m) { return frames.slice0(0, std::min(m, frames.shape()[0])); }

void check_window(const Tensor& input, const SegmentSchedule& schedule) {
    if (input.dim() != 4 || input.shape()[0] != schedule.m || input.shape()[1] != 1) {
        throw DimensionError("cascade: input window must be [" + std::to_string(schedule.m) + ",1,H,W], got " +
                             shape_to_string(input.shape()));
    }
}

// Ground-truth segment s_i of a window (s_0 = last m input frames), padded to m frames.
Tensor truth_segment(const data::WindowSample& sample, const SegmentSchedule& schedule, std::size_t i) {
    if (i == 0) {
        const std::size_t n = sample.input.shape()[0];
        return sample.input.slice0(n - schedule.m, n);
    }
    return pad_segment(sample.target.slice0(schedule.begin(i), schedule.end(i)), schedule.m);
}

Tensor raw_segment(const Tensor& forecast, const SegmentSchedule& schedule, std::size_t i) {
    return pad_segment(forecast.slice0(schedule.begin(i), schedule.end(i)), schedule.m);
}

Tensor sample_segment(const SegmentField& field, const ConditionBundle<float>& cond, std::size_t steps,
                      std::uint64_t seed, const Shape& shape) {
    flow::VelocityField<float> v = [&](const Tensor& z, float t) { return field(z, cond, t); };
    return flow::euler_sample<float>(v, {steps, seed}, shape);
}

Tensor stack(const std::vector<const Tensor*>& parts) {
    std::vector<Tensor> copies;
    copies.reserve(parts.size());
    for (const auto* p : parts) copies.push_back(*p);
    return concat0<float>(copies);
}

}  // namespace

SegmentSchedule SegmentSchedule::make(std::size_t m, std::size_t input_frames, std::size_t output_frames) {
    if (m == 0 || m != input_frames) {
        throw ConfigError("cascade: segment length m=" + std::to_string(m) + " must equal the input length " +
                          std::to_string(input_frames));
    }
    if (output_frames == 0) throw ConfigError("cascade: empty forecast horizon");
    return {m, output_frames};
}

Tensor MeanForecaster::segment_head(const Tensor& segment) const {
    if (segment.shape().empty() || segment.shape()[0] != input_frames) {
        throw ConfigError("cascade: segment of " + std::to_string(segment.shape().empty() ? 0 : segment.shape()[0]) +
                          " frames cannot be fed to a backbone with " + std::to_string(input_frames) + " inputs");
    }
    return head(forecast(segment), input_frames);
}

MeanForecaster forecaster_of(const BackboneModel<float>& backbone) {
    const auto& c = backbone.config();
    return {[&backbone](const Tensor& x) { return backbone.predict(x); }, c.input_frames, c.output_frames};
}

SegmentField field_of(const STUNet<float>& net) {
    return [&net](const Tensor& z, const ConditionBundle<float>& cond, float t) { return net.velocity(z, cond, t); };
}

std::string to_string(GeneratorVariant v) {
    switch (v) {
        case GeneratorVariant::rectified: return "rectified";
        case GeneratorVariant::raw_mean: return "raw_mean";
        case GeneratorVariant::residual: return "residual";
    }
    return "?";
}

GeneratorVariant generator_variant_from_string(const std::string& s) {
    if (s == "rectified") return GeneratorVariant::rectified;
    if (s == "raw_mean") return GeneratorVariant::raw_mean;
    if (s == "residual") return GeneratorVariant::residual;
    throw ConfigError("unknown generator variant '" + s + "'");
}

std::string to_string(ForecastMode m) {
    switch (m) {
        case ForecastMode::full: return "full";
        case ForecastMode::backbone_only: return "backbone_only";
        case ForecastMode::no_rectifier_y: return "no_rectifier_y";
        case ForecastMode::no_rectifier_residual: return "no_rectifier_residual";
        case ForecastMode::no_generator: return "no_generator";
    }
    return "?";
}

ForecastMode forecast_mode_from_string(const std::string& s) {
    for (auto m : {ForecastMode::full, ForecastMode::backbone_only, ForecastMode::no_rectifier_y,
                   ForecastMode::no_rectifier_residual, ForecastMode::no_generator}) {
        if (to_string(m) == s) return m;
    }
    throw ConfigError("unknown forecast mode '" + s +
                      "' (expected full, backbone_only, no_rectifier_y, no_rectifier_residual, no_generator)");
}

std::optional<GeneratorVariant> required_generator(ForecastMode mode) {
    switch (mode) {
        case ForecastMode::full: return GeneratorVariant::rectified;
        case ForecastMode::no_rectifier_y: return GeneratorVariant::raw_mean;
        case ForecastMode::no_rectifier_residual: return GeneratorVariant::residual;
        default: return std::nullopt;
    }
}

bool requires_rectifier(ForecastMode mode) {
    return mode == ForecastMode::full || mode == ForecastMode::no_generator;
}

std::string to_string(FlowRole role) { return role == FlowRole::rectifier ? "rectifier" : "generator"; }

Tensor pad_segment(const Tensor& segment, std::size_t m) {
    const std::size_t have = segment.shape()[0];
    if (have == m) return segment;
    if (have == 0 || have > m) {
        throw DimensionError("cascade: cannot pad a " + std::to_string(have) + "-frame segment to " +
                             std::to_string(m));
    }
    std::vector<Tensor> parts{segment};
    const Tensor last = segment.slice0(have - 1, have);
    for (std::size_t k = have; k < m; ++k) parts.push_back(last);
    return concat0<float>(parts);
}

std::vector<std::optional<Tensor>> rectifier_targets(const data::WindowSample& sample, const MeanForecaster& backbone,
                                                     const SegmentSchedule& schedule) {
    std::vector<std::optional<Tensor>> out(schedule.n_segments());
    for (std::size_t i = 2; i <= schedule.n_segments(); ++i) {
        out[i - 1] = backbone.segment_head(truth_segment(sample, schedule, i - 1));
    }
    return out;
}

std::vector<FlowExample> rectifier_examples(const data::WindowSample& sample, const MeanForecaster& backbone,
                                            const SegmentSchedule& schedule) {
    const std::size_t n = schedule.n_segments();
    const Tensor mu_raw = backbone.forecast(sample.input);
    // heads[k] = D(s_k)_1, with D(s_0) taken on the full input window.
    std::vector<Tensor> heads;
    heads.push_back(head(mu_raw, schedule.m));
    for (std::size_t k = 1; k < n; ++k) {
        heads.push_back(backbone.segment_head(truth_segment(sample, schedule, k)));
    }
    std::vector<FlowExample> out;
    for (std::size_t i = 2; i <= n; ++i) {
        out.push_back({heads[i - 1], raw_segment(mu_raw, schedule, i), heads[i - 2], i});
    }
    return out;
}

std::vector<FlowExample> generator_examples(const data::WindowSample& sample, const MeanForecaster& backbone,
                                            const SegmentSchedule& schedule, GeneratorVariant variant) {
    const std::size_t n = schedule.n_segments();
    const Tensor mu_raw = backbone.forecast(sample.input);
    std::vector<FlowExample> out;
    for (std::size_t i = 1; i <= n; ++i) {
        const Tensor prev = truth_segment(sample, schedule, i - 1);
        const Tensor y = truth_segment(sample, schedule, i);
        const Tensor raw = raw_segment(mu_raw, schedule, i);
        FlowExample ex{y, prev, raw, i};
        if (variant == GeneratorVariant::rectified) {
            ex.side_cond = i == 1 ? head(mu_raw, schedule.m) : backbone.segment_head(prev);
        } else if (variant == GeneratorVariant::residual) {
            for (std::size_t k = 0; k < ex.target.numel(); ++k) ex.target.span()[k] -= raw.span()[k];
        }
        out.push_back(std::move(ex));
    }
    return out;
}

TrainResult train_flow(STUNet<float>& net, AdamState<float>& adam, const std::vector<FlowExample>& examples,
                       bool use_segment_index, const TrainOptions& options) {
    if (examples.empty()) throw ConfigError("cascade: no training examples");
    if (options.batch == 0) throw ConfigError("cascade: batch size must be positive");
    return run_training(net.params(), adam, options, [&](Rng& rng, std::size_t) {
        std::vector<const Tensor*> xs, bc, sc;
        std::vector<std::size_t> idx;
        for (std::size_t b = 0; b < options.batch; ++b) {
            const auto& ex = examples[rng.below(examples.size())];
            xs.push_back(&ex.target);
            bc.push_back(&ex.backbone_cond);
            sc.push_back(&ex.side_cond);
            if (use_segment_index) idx.push_back(ex.segment_index);
        }
        const auto batch = flow::make_flow_batch<float>(stack(xs), options.batch, rng);
        const auto bvar = ag::constant(stack(bc));
        const auto svar = ag::constant(stack(sc));
        flow::VelocityModel<float> model = [&](const ag::Var<float>& z, std::span<const float> t) {
            return net.forward(z, bvar, svar, t, idx, options.batch);
        };
        if (net.config().anchor == Anchor::none) return flow::fm_loss<float>(model, batch);
        // anchored nets regress data: weighting by (1 - t)^2 turns the velocity error into the data error
        const float floor = static_cast<float>(net.config().min_remaining_time);
        const std::function<float(float)> weight = [floor](float t) {
            const float r = std::max(1.0f - t, floor);
            return r * r;
        };
        return flow::fm_loss<float>(model, batch, weight);
    });
}

namespace {

std::vector<FlowExample> collect(const BackboneModel<float>& backbone, const std::vector<data::WindowSample>& samples,
                                 const ExampleObserver& observer,
                                 const std::function<std::vector<FlowExample>(const data::WindowSample&,
                                                                              const MeanForecaster&,
                                                                              const SegmentSchedule&)>& make) {
    if (!backbone.frozen()) {
        throw InvariantError("cascade: the backbone must be frozen before training the flow stages");
    }
    const auto& c = backbone.config();
    const auto schedule = SegmentSchedule::make(c.input_frames, c.input_frames, c.output_frames);
    const auto forecaster = forecaster_of(backbone);
    std::vector<FlowExample> all;
    for (std::size_t s = 0; s < samples.size(); ++s) {
        for (auto& ex : make(samples[s], forecaster, schedule)) {
            if (observer) observer(s, ex);
            all.push_back(std::move(ex));
        }
    }
    return all;
}

}  // namespace

TrainResult train_rectifier(STUNet<float>& rectifier, AdamState<float>& adam, const BackboneModel<float>& backbone,
                            const std::vector<data::WindowSample>& samples, const TrainOptions& options,
                            const ExampleObserver& observer) {
    if (rectifier.config().segment_vocab == 0) {
        throw ConfigError("cascade: the rectifier needs a segment-index vocabulary");
    }
    const auto examples = collect(backbone, samples, observer, rectifier_examples);
    return train_flow(rectifier, adam, examples, true, options);
}

TrainResult train_generator(STUNet<float>& generator, AdamState<float>& adam, const BackboneModel<float>& backbone,
                            const std::vector<data::WindowSample>& samples, GeneratorVariant variant,
                            const TrainOptions& options, const ExampleObserver& observer) {
    if (generator.config().segment_vocab != 0) {
        throw ConfigError("cascade: the generator takes no segment-index condition");
    }
    const auto examples = collect(backbone, samples, observer,
                                  [variant](const data::WindowSample& w, const MeanForecaster& f,
                                            const SegmentSchedule& s) { return generator_examples(w, f, s, variant); });
    return train_flow(generator, adam, examples, false, options);
}

std::uint64_t segment_seed(std::uint64_t base, FlowRole role, std::size_t segment) {
    const std::uint64_t r = role == FlowRole::rectifier ? 0x52ULL : 0x47ULL;
    return splitmix64(splitmix64(base) ^ splitmix64((r << 32) | segment));
}

std::vector<Tensor> rectify_sequence(const std::vector<Tensor>& mu_raw, const SegmentField& rectifier,
                                     std::size_t steps, std::uint64_t seed) {
    std::vector<Tensor> out;
    if (mu_raw.empty()) return out;
    out.push_back(mu_raw.front());
    for (std::size_t i = 2; i <= mu_raw.size(); ++i) {
        const ConditionBundle<float> cond{mu_raw[i - 1], out.back(), i};
        out.push_back(clamp01(sample_segment(rectifier, cond, steps, segment_seed(seed, FlowRole::rectifier, i),
                                             mu_raw[i - 1].shape())));
    }
    return out;
}

Tensor run_ablation(ForecastMode mode, const Tensor& input, const CascadeModels& models,
                    const SegmentSchedule& schedule, const SamplerSettings& settings, CascadeState* state) {
    if (!models.backbone) throw ConfigError("cascade: mode " + to_string(mode) + " needs the backbone");
    if (requires_rectifier(mode) && !models.rectifier) {
        throw ConfigError("cascade: mode " + to_string(mode) + " needs a rectifier checkpoint");
    }
    const auto need = required_generator(mode);
    if (need) {
        if (!models.generator) throw ConfigError("cascade: mode " + to_string(mode) + " needs a generator checkpoint");
        if (models.generator_variant != need) {
            throw ConfigError("cascade: mode " + to_string(mode) + " needs a generator trained as '" +
                              to_string(*need) + "', got '" +
                              (models.generator_variant ? to_string(*models.generator_variant) : "unknown") + "'");
        }
    }
    check_window(input, schedule);
    const std::size_t n = schedule.n_segments();
    const Tensor forecast = models.backbone->forecast(input);
    if (forecast.shape().empty() || forecast.shape()[0] != schedule.output_frames) {
        throw DimensionError("cascade: backbone returned " + shape_to_string(forecast.shape()));
    }

    CascadeState local;
    CascadeState& st = state ? *state : local;
    st = {};
    st.y0 = input.slice0(input.shape()[0] - schedule.m, input.shape()[0]);
    for (std::size_t i = 1; i <= n; ++i) st.mu_raw.push_back(raw_segment(forecast, schedule, i));

    if (mode == ForecastMode::backbone_only) {
        st.y_hat = st.mu_raw;
        return clamp01(forecast);
    }
    if (requires_rectifier(mode)) {
        st.mu_rec = rectify_sequence(st.mu_raw, *models.rectifier, settings.rectifier_steps, settings.seed);
    }
    if (mode == ForecastMode::no_generator) {
        st.y_hat = st.mu_rec;
    } else {
        const Tensor* prev = &st.y0;
        for (std::size_t i = 1; i <= n; ++i) {
            const Tensor& side = mode == ForecastMode::full ? st.mu_rec[i - 1] : st.mu_raw[i - 1];
            const ConditionBundle<float> cond{*prev, side, std::nullopt};
            Tensor y = sample_segment(*models.generator, cond, settings.generator_steps,
                                      segment_seed(settings.seed, FlowRole::generator, i), side.shape());
            if (mode == ForecastMode::no_rectifier_residual) {
                for (std::size_t k = 0; k < y.numel(); ++k) y.span()[k] += st.mu_raw[i - 1].span()[k];
            }
            st.y_hat.push_back(clamp01(std::move(y)));
            prev = &st.y_hat.back();
        }
    }
    std::vector<Tensor> parts;
    for (std::size_t i = 1; i <= n; ++i) {
        parts.push_back(st.y_hat[i - 1].slice0(0, schedule.end(i) - schedule.begin(i)));
    }
    return concat0<float>(parts);
}

Tensor generate_forecast(const Tensor& input, const CascadeModels& models, const SegmentSchedule& schedule,
                         const SamplerSettings& settings, CascadeState* state) {
    return run_ablation(ForecastMode::full, input, models, schedule, settings, state);
}

std::size_t nfe_count(const SegmentSchedule& schedule, std::size_t steps_rect, std::size_t steps_gen,
                      bool count_first_rect_segment) {
    const std::size_t n = schedule.n_segments();
    return steps_gen * n + steps_rect * (n - 1 + (count_first_rect_segment ? 1 : 0));
}

std::size_t nfe_for_mode(ForecastMode mode, const SegmentSchedule& schedule, const SamplerSettings& settings,
                         bool count_first_rect_segment) {
    const std::size_t n = schedule.n_segments();
    const std::size_t rect = settings.rectifier_steps * (n - 1 + (count_first_rect_segment ? 1 : 0));
    switch (mode) {
        case ForecastMode::full:
            return nfe_count(schedule, settings.rectifier_steps, settings.generator_steps, count_first_rect_segment);
        case ForecastMode::backbone_only: return 0;
        case ForecastMode::no_generator: return rect;
        default: return settings.generator_steps * n;
    }
}

void save_flow_model(const std::filesystem::path& dir, FlowRole role, const STUNet<float>& net,
                     std::optional<GeneratorVariant> variant, const AdamState<float>* adam, nlohmann::json extra) {
    if (role == FlowRole::generator && !variant) throw ConfigError("cascade: generator checkpoint needs a variant");
    extra["kind"] = to_string(role);
    extra["architecture"] = net.config();
    if (variant) extra["variant"] = to_string(*variant);
    save_checkpoint(dir, net.params(), adam, extra);
}

LoadedFlowModel load_flow_model(const std::filesystem::path& dir, FlowRole role, AdamState<float>* adam) {
    if (!std::filesystem::exists(dir / "manifest.json")) {
        throw PrerequisiteError(to_string(role) + " checkpoint missing: " + dir.string() +
                                " (run the corresponding training stage first)");
    }
    const auto manifest = read_checkpoint_manifest(dir);
    if (manifest.value("kind", "") != to_string(role)) {
        throw ConfigError(dir.string() + " is not a " + to_string(role) + " checkpoint");
    }
    LoadedFlowModel out{STUNet<float>(manifest.at("architecture").get<STUNetConfig>(), 0), std::nullopt, manifest};
    load_checkpoint(dir, out.net.params(), adam);
    if (manifest.contains("variant")) out.variant = generator_variant_from_string(manifest.at("variant"));
    return out;
}

}  // namespace recticast::cascade
