#include <algorithm>
#include <fstream>
#include <sstream>

#include "recticast/cli.hpp"
#include "recticast/errors.hpp"
#include "recticast/rng.hpp"
#include "recticast/tensor_io.hpp"

namespace recticast::cli {

namespace {

using nlohmann::json;

void require_keys(const json& j, std::initializer_list<const char*> known, const std::string& where) {
    if (!j.is_object()) throw ConfigError(where + " must be an object");
    for (const auto& [key, _] : j.items()) {
        if (std::none_of(known.begin(), known.end(), [&](const char* k) { return key == k; })) {
            throw ConfigError("unknown key '" + key + "' in " + where);
        }
    }
}

bool non_negative_integer(const json& v) {
    return v.is_number_unsigned() || (v.is_number_integer() && v.get<std::int64_t>() >= 0);
}

std::size_t count(const json& j, const char* key, std::size_t fallback, const std::string& where) {
    if (!j.contains(key)) return fallback;
    const auto& v = j.at(key);
    if (!non_negative_integer(v)) throw ConfigError(where + "." + key + " must be a non-negative integer");
    return v.get<std::size_t>();
}

double number(const json& j, const char* key, double fallback, const std::string& where) {
    if (!j.contains(key)) return fallback;
    const auto& v = j.at(key);
    if (!v.is_number()) throw ConfigError(where + "." + key + " must be a number");
    return v.get<double>();
}

void check_same(std::size_t got, std::size_t want, const std::string& what) {
    if (got != want) {
        throw ConfigError(what + " is " + std::to_string(got) + " but the data block implies " + std::to_string(want));
    }
}

STUNetConfig flow_config(const json& j, const char* key, const BackboneConfig& bb, const std::string& where) {
    STUNetConfig c;
    if (j.contains(key)) {
        c = j.at(key).get<STUNetConfig>();
        if (j.at(key).contains("frames")) check_same(c.frames, bb.input_frames, where + ".frames");
    }
    c.frames = bb.input_frames;
    return c;
}

}  // namespace

RunConfig default_config() { return parse_config(json::object()); }

RunConfig parse_config(const json& j) {
    try {
        require_keys(j,
                     {"seed", "data", "backbone", "rectifier", "generator", "generator_variant", "optimizer",
                      "sampler", "thresholds", "forecast_samples", "output_dir"},
                     "config");
        RunConfig c;
        if (j.contains("seed")) {
            if (!non_negative_integer(j.at("seed"))) throw ConfigError("seed must be a non-negative integer");
            c.seed = j.at("seed").get<std::uint64_t>();
        }

        if (j.contains("data")) {
            if (j.at("data").is_object() && j.at("data").contains("seed")) {
                throw ConfigError("data.seed is not configurable; it is derived from the top-level seed");
            }
            c.data = j.at("data").get<data::DatasetSpec>();
        }
        c.data.seed = derive_seed(c.seed, SeedPurpose::data);
        data::validate(c.data);

        const std::size_t in = c.data.split_in, out = c.data.window - c.data.split_in;
        if (j.contains("backbone")) {
            const auto& b = j.at("backbone");
            c.backbone = b.get<BackboneConfig>();
            if (b.contains("input_frames")) check_same(c.backbone.input_frames, in, "backbone.input_frames");
            if (b.contains("output_frames")) check_same(c.backbone.output_frames, out, "backbone.output_frames");
            if (b.contains("height")) check_same(c.backbone.height, c.data.height, "backbone.height");
            if (b.contains("width")) check_same(c.backbone.width, c.data.width, "backbone.width");
        }
        c.backbone.input_frames = in;
        c.backbone.output_frames = out;
        c.backbone.height = c.data.height;
        c.backbone.width = c.data.width;
        validate(c.backbone);

        const auto schedule = cascade::SegmentSchedule::make(in, in, out);
        const std::size_t vocab = schedule.n_segments() + 1;
        c.rectifier = flow_config(j, "rectifier", c.backbone, "rectifier");
        if (c.rectifier.segment_vocab == 0) c.rectifier.segment_vocab = vocab;
        if (c.rectifier.segment_vocab < vocab) {
            throw ConfigError("rectifier.segment_vocab must be at least " + std::to_string(vocab) + " for " +
                              std::to_string(schedule.n_segments()) + " segments");
        }
        c.generator = flow_config(j, "generator", c.backbone, "generator");
        if (c.generator.segment_vocab != 0) {
            throw ConfigError("generator.segment_vocab must be 0: the Generator takes no segment index");
        }
        validate(c.rectifier);
        validate(c.generator);
        const std::size_t depth = std::size_t{1} << (std::max(c.rectifier.num_scales(), c.generator.num_scales()) - 1);
        if (c.data.height % depth != 0 || c.data.width % depth != 0) {
            throw ConfigError("frame size must be divisible by " + std::to_string(depth) + " for the U-Net scales");
        }

        if (j.contains("generator_variant")) {
            if (!j.at("generator_variant").is_string()) throw ConfigError("generator_variant must be a string");
            c.generator_variant = cascade::generator_variant_from_string(j.at("generator_variant").get<std::string>());
        }
        // the Generator's current-segment mean arrives through the side encoder; a residual target has no frame to anchor
        const bool residual = c.generator_variant == cascade::GeneratorVariant::residual;
        const bool explicit_anchor = j.contains("generator") && j.at("generator").contains("anchor");
        if (!explicit_anchor) c.generator.anchor = residual ? Anchor::none : Anchor::side_cond;
        if (residual && c.generator.anchor != Anchor::none) {
            throw ConfigError("generator.anchor must be none for the residual variant");
        }

        if (j.contains("optimizer")) {
            const auto& o = j.at("optimizer");
            require_keys(o,
                         {"lr_max", "lr_min", "flow_lr_max", "batch", "backbone_steps", "rectifier_steps",
                          "generator_steps"},
                         "optimizer");
            c.optimizer.lr_max = number(o, "lr_max", c.optimizer.lr_max, "optimizer");
            c.optimizer.lr_min = number(o, "lr_min", c.optimizer.lr_min, "optimizer");
            if (o.contains("flow_lr_max")) c.optimizer.flow_lr_max = number(o, "flow_lr_max", 0.0, "optimizer");
            c.optimizer.batch = count(o, "batch", c.optimizer.batch, "optimizer");
            c.optimizer.backbone_steps = count(o, "backbone_steps", c.optimizer.backbone_steps, "optimizer");
            c.optimizer.rectifier_steps = count(o, "rectifier_steps", c.optimizer.rectifier_steps, "optimizer");
            c.optimizer.generator_steps = count(o, "generator_steps", c.optimizer.generator_steps, "optimizer");
        }
        if (!(c.optimizer.lr_max > 0) || c.optimizer.lr_min < 0 || c.optimizer.lr_min > c.optimizer.lr_max) {
            throw ConfigError("optimizer needs 0 <= lr_min <= lr_max and lr_max > 0");
        }
        if (c.optimizer.flow_lr_max && !(*c.optimizer.flow_lr_max >= c.optimizer.lr_min && *c.optimizer.flow_lr_max > 0)) {
            throw ConfigError("optimizer.flow_lr_max must be positive and at least lr_min");
        }
        if (c.optimizer.batch == 0) throw ConfigError("optimizer.batch must be positive");

        if (j.contains("sampler")) {
            const auto& s = j.at("sampler");
            require_keys(s, {"rectifier_steps", "generator_steps", "count_first_rectifier_segment"}, "sampler");
            c.sampler.rectifier_steps = count(s, "rectifier_steps", c.sampler.rectifier_steps, "sampler");
            c.sampler.generator_steps = count(s, "generator_steps", c.sampler.generator_steps, "sampler");
            if (s.contains("count_first_rectifier_segment")) {
                if (!s.at("count_first_rectifier_segment").is_boolean()) {
                    throw ConfigError("sampler.count_first_rectifier_segment must be a boolean");
                }
                c.sampler.count_first_rectifier_segment = s.at("count_first_rectifier_segment").get<bool>();
            }
        }
        if (c.sampler.rectifier_steps == 0 || c.sampler.generator_steps == 0) {
            throw ConfigError("sampler steps must be at least 1");
        }

        c.thresholds = metrics::kDefaultThresholds;
        if (j.contains("thresholds")) {
            const auto& t = j.at("thresholds");
            if (!t.is_array() || t.empty()) throw ConfigError("thresholds must be a non-empty array");
            c.thresholds.clear();
            for (const auto& v : t) {
                if (!v.is_number() || v.get<double>() < 0 || v.get<double>() > data::kFullScale) {
                    throw ConfigError("thresholds must be numbers on the 0-255 scale");
                }
                c.thresholds.push_back(v.get<double>());
            }
        }
        c.forecast_samples = count(j, "forecast_samples", 0, "config");
        if (j.contains("output_dir")) {
            if (!j.at("output_dir").is_string()) throw ConfigError("output_dir must be a string");
            c.output_dir = j.at("output_dir").get<std::string>();
        }
        return c;
    } catch (const json::exception& e) {
        throw ConfigError(std::string("config: ") + e.what());
    }
}

RunConfig load_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read config file " + path.string());
    json j;
    try {
        j = json::parse(in);
    } catch (const json::parse_error& e) {
        throw ConfigError("config " + path.string() + ": " + e.what());
    }
    return parse_config(j);
}

json to_json(const RunConfig& c) {
    json data = c.data;
    data.erase("seed");  // derived from the top-level seed
    return json{{"seed", c.seed},
                {"data", data},
                {"backbone", c.backbone},
                {"rectifier", c.rectifier},
                {"generator", c.generator},
                {"generator_variant", cascade::to_string(c.generator_variant)},
                {"optimizer",
                 {{"lr_max", c.optimizer.lr_max},
                  {"lr_min", c.optimizer.lr_min},
                  {"flow_lr_max", c.optimizer.flow_lr_max.value_or(c.optimizer.lr_max)},
                  {"batch", c.optimizer.batch},
                  {"backbone_steps", c.optimizer.backbone_steps},
                  {"rectifier_steps", c.optimizer.rectifier_steps},
                  {"generator_steps", c.optimizer.generator_steps}}},
                {"sampler",
                 {{"rectifier_steps", c.sampler.rectifier_steps},
                  {"generator_steps", c.sampler.generator_steps},
                  {"count_first_rectifier_segment", c.sampler.count_first_rectifier_segment}}},
                {"thresholds", c.thresholds},
                {"forecast_samples", c.forecast_samples}};
}

std::string config_hash(const RunConfig& c) { return fnv1a_hex(to_json(c).dump()); }

std::uint64_t derive_seed(std::uint64_t seed, SeedPurpose purpose) {
    return splitmix64(seed ^ (0xD1B54A32D192ED03ULL * static_cast<std::uint64_t>(purpose)));
}

std::string to_string(Stage s) {
    switch (s) {
        case Stage::backbone: return "backbone";
        case Stage::rectifier: return "rectifier";
        case Stage::generator: return "generator";
    }
    return "?";
}

Stage stage_from_string(const std::string& s) {
    if (s == "backbone") return Stage::backbone;
    if (s == "rectifier") return Stage::rectifier;
    if (s == "generator") return Stage::generator;
    throw ConfigError("unknown stage '" + s + "' (expected backbone, rectifier or generator)");
}

}  // namespace recticast::cli
