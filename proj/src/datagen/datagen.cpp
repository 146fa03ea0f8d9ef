#include "recticast/datagen.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "recticast/rng.hpp"
#include "recticast/tensor_io.hpp"

namespace recticast::data {

namespace {

std::size_t wrap(std::ptrdiff_t i, std::size_t n) {
    const auto m = static_cast<std::ptrdiff_t>(n);
    return static_cast<std::size_t>(((i % m) + m) % m);
}

using Grid = std::vector<double>;

/// Semi-Lagrangian step: new(y,x) = old(y - vy, x - vx), bilinear, periodic.
/// Integer velocities reproduce an exact cyclic shift.
Grid advect(const Grid& g, std::size_t h, std::size_t w, double vx, double vy) {
    Grid out(g.size());
    for (std::size_t y = 0; y < h; ++y) {
        const double sy = static_cast<double>(y) - vy;
        const double fy0 = std::floor(sy);
        const double fy = sy - fy0;
        const std::size_t y0 = wrap(static_cast<std::ptrdiff_t>(fy0), h);
        const std::size_t y1 = wrap(static_cast<std::ptrdiff_t>(fy0) + 1, h);
        for (std::size_t x = 0; x < w; ++x) {
            const double sx = static_cast<double>(x) - vx;
            const double fx0 = std::floor(sx);
            const double fx = sx - fx0;
            const std::size_t x0 = wrap(static_cast<std::ptrdiff_t>(fx0), w);
            const std::size_t x1 = wrap(static_cast<std::ptrdiff_t>(fx0) + 1, w);
            const double top = (1.0 - fx) * g[y0 * w + x0] + fx * g[y0 * w + x1];
            const double bottom = (1.0 - fx) * g[y1 * w + x0] + fx * g[y1 * w + x1];
            out[y * w + x] = (1.0 - fy) * top + fy * bottom;
        }
    }
    return out;
}

void diffuse(Grid& g, std::size_t h, std::size_t w, double rate) {
    if (rate == 0.0) {
        return;
    }
    const Grid old = g;
    for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
            const double lap = old[wrap(static_cast<std::ptrdiff_t>(y) - 1, h) * w + x] +
                               old[wrap(static_cast<std::ptrdiff_t>(y) + 1, h) * w + x] +
                               old[y * w + wrap(static_cast<std::ptrdiff_t>(x) - 1, w)] +
                               old[y * w + wrap(static_cast<std::ptrdiff_t>(x) + 1, w)] - 4.0 * old[y * w + x];
            g[y * w + x] = old[y * w + x] + rate * lap;
        }
    }
}

Grid gaussian_blob(std::size_t h, std::size_t w, double cy, double cx, double radius, double peak) {
    Grid g(h * w);
    const double inv = 1.0 / (2.0 * radius * radius);
    for (std::size_t y = 0; y < h; ++y) {
        double dy = std::fabs(static_cast<double>(y) - cy);
        dy = std::min(dy, static_cast<double>(h) - dy);
        for (std::size_t x = 0; x < w; ++x) {
            double dx = std::fabs(static_cast<double>(x) - cx);
            dx = std::min(dx, static_cast<double>(w) - dx);
            g[y * w + x] = peak * std::exp(-(dx * dx + dy * dy) * inv);
        }
    }
    return g;
}

}  // namespace

void to_json(nlohmann::json& j, const SynthParams& p) {
    j = nlohmann::json{{"n_cells", p.n_cells},       {"velocity_x", p.velocity_x}, {"velocity_y", p.velocity_y},
                       {"velocity_jitter", p.velocity_jitter}, {"diffusion", p.diffusion}, {"growth", p.growth},
                       {"noise", p.noise},           {"min_radius", p.min_radius}, {"max_radius", p.max_radius},
                       {"min_peak", p.min_peak},     {"max_peak", p.max_peak}};
}

void from_json(const nlohmann::json& j, SynthParams& p) {
    SynthParams d;
    for (const auto& [key, _] : j.items()) {
        static const char* known[] = {"n_cells",    "velocity_x", "velocity_y", "velocity_jitter",
                                      "diffusion",  "growth",     "noise",      "min_radius",
                                      "max_radius", "min_peak",   "max_peak"};
        if (std::find(std::begin(known), std::end(known), key) == std::end(known)) {
            throw ConfigError("unknown synth key '" + key + "'");
        }
    }
    p.n_cells = j.value("n_cells", d.n_cells);
    p.velocity_x = j.value("velocity_x", d.velocity_x);
    p.velocity_y = j.value("velocity_y", d.velocity_y);
    p.velocity_jitter = j.value("velocity_jitter", d.velocity_jitter);
    p.diffusion = j.value("diffusion", d.diffusion);
    p.growth = j.value("growth", d.growth);
    p.noise = j.value("noise", d.noise);
    p.min_radius = j.value("min_radius", d.min_radius);
    p.max_radius = j.value("max_radius", d.max_radius);
    p.min_peak = j.value("min_peak", d.min_peak);
    p.max_peak = j.value("max_peak", d.max_peak);
}

RadarSequence synth_sequence(std::uint64_t seed, std::size_t index, std::size_t frames, std::size_t height,
                             std::size_t width, const SynthParams& params) {
    Rng rng(splitmix64(seed ^ splitmix64(index + 1)));
    const double vx = params.velocity_x + params.velocity_jitter * rng.uniform(-1.0, 1.0);
    const double vy = params.velocity_y + params.velocity_jitter * rng.uniform(-1.0, 1.0);

    std::vector<Grid> cells;
    cells.reserve(params.n_cells);
    for (std::size_t c = 0; c < params.n_cells; ++c) {
        const double cy = rng.uniform(0.0, static_cast<double>(height));
        const double cx = rng.uniform(0.0, static_cast<double>(width));
        const double radius = rng.uniform(params.min_radius, params.max_radius);
        const double peak = rng.uniform(params.min_peak, params.max_peak);
        cells.push_back(gaussian_blob(height, width, cy, cx, radius, peak));
    }

    RadarSequence seq;
    seq.seed = seed;
    seq.index = index;
    seq.frames = Tensor(Shape{frames, 1, height, width});
    const std::size_t hw = height * width;
    for (std::size_t t = 0; t < frames; ++t) {
        float* dst = seq.frames.data() + t * hw;
        for (std::size_t i = 0; i < hw; ++i) {
            double s = 0.0;
            for (const auto& g : cells) s += g[i];
            dst[i] = static_cast<float>(std::clamp(s, 0.0, 1.0));
        }
        if (t + 1 == frames) {
            break;
        }
        for (auto& g : cells) {
            g = advect(g, height, width, vx, vy);
            diffuse(g, height, width, params.diffusion);
            const double factor = std::exp(params.growth + params.noise * rng.normal());
            if (factor != 1.0) {
                for (double& v : g) v *= factor;
            }
        }
    }
    return seq;
}

std::vector<RadarSequence> synth_advection(std::uint64_t seed, std::size_t n_sequences, std::size_t frames,
                                           std::size_t height, std::size_t width, const SynthParams& params) {
    if (frames < 25) {
        throw ConfigError("synth_advection: sequences need at least 25 frames, got " + std::to_string(frames));
    }
    if (!((height == 32 || height == 64) && (width == 32 || width == 64))) {
        throw ConfigError("synth_advection: H and W must be 32 or 64, got " + std::to_string(height) + "x" +
                          std::to_string(width));
    }
    std::vector<RadarSequence> out;
    out.reserve(n_sequences);
    for (std::size_t k = 0; k < n_sequences; ++k) {
        out.push_back(synth_sequence(seed, k, frames, height, width, params));
    }
    return out;
}

std::vector<WindowSample> window_samples(const RadarSequence& seq, std::size_t window, std::size_t stride,
                                         std::size_t split_in) {
    if (stride == 0 || split_in == 0 || split_in >= window) {
        throw ConfigError("window_samples: need stride > 0 and 0 < split_in < window");
    }
    std::vector<WindowSample> out;
    const std::size_t total = seq.frames.shape().empty() ? 0 : seq.frames.shape()[0];
    for (std::size_t off = 0; off + window <= total; off += stride) {
        out.push_back(WindowSample{seq.frames.slice0(off, off + split_in),
                                   seq.frames.slice0(off + split_in, off + window)});
    }
    return out;
}

NormalizeResult normalize(const Tensor& raw) {
    NormalizeResult r{Tensor(raw.shape()), 0};
    for (std::size_t i = 0; i < raw.numel(); ++i) {
        float v = raw[i];
        if (!(v >= 0.0f && v <= static_cast<float>(kFullScale))) {
            ++r.clamped;
            v = std::isnan(v) ? 0.0f : std::clamp(v, 0.0f, static_cast<float>(kFullScale));
        }
        r.values[i] = v / static_cast<float>(kFullScale);
    }
    return r;
}

Tensor denormalize(const Tensor& normalized) {
    Tensor out(normalized.shape());
    for (std::size_t i = 0; i < normalized.numel(); ++i) {
        out[i] = normalized[i] * static_cast<float>(kFullScale);
    }
    return out;
}

std::vector<Tensor> split_segments(const Tensor& frames, std::size_t m) {
    if (m == 0 || frames.dim() == 0) {
        throw ConfigError("split_segments: segment length must be positive");
    }
    std::vector<Tensor> out;
    for (std::size_t b = 0; b < frames.shape()[0]; b += m) {
        out.push_back(frames.slice0(b, std::min(b + m, frames.shape()[0])));
    }
    return out;
}

void to_json(nlohmann::json& j, const DatasetSpec& s) {
    j = nlohmann::json{{"seed", s.seed},
                       {"height", s.height},
                       {"width", s.width},
                       {"frames", s.frames},
                       {"window", s.window},
                       {"stride", s.stride},
                       {"split_in", s.split_in},
                       {"train_sequences", s.train_sequences},
                       {"val_sequences", s.val_sequences},
                       {"test_sequences", s.test_sequences},
                       {"synth", s.synth}};
}

void from_json(const nlohmann::json& j, DatasetSpec& s) {
    static const char* known[] = {"seed",     "height",          "width",         "frames",
                                  "window",   "stride",          "split_in",      "train_sequences",
                                  "val_sequences", "test_sequences", "synth"};
    for (const auto& [key, _] : j.items()) {
        if (std::find(std::begin(known), std::end(known), key) == std::end(known)) {
            throw ConfigError("unknown data key '" + key + "'");
        }
    }
    DatasetSpec d;
    s.seed = j.value("seed", d.seed);
    s.height = j.value("height", d.height);
    s.width = j.value("width", d.width);
    s.frames = j.value("frames", d.frames);
    s.window = j.value("window", d.window);
    s.stride = j.value("stride", d.stride);
    s.split_in = j.value("split_in", d.split_in);
    s.train_sequences = j.value("train_sequences", d.train_sequences);
    s.val_sequences = j.value("val_sequences", d.val_sequences);
    s.test_sequences = j.value("test_sequences", d.test_sequences);
    s.synth = j.contains("synth") ? j.at("synth").get<SynthParams>() : d.synth;
}

void validate(const DatasetSpec& spec) {
    auto ok_dim = [](std::size_t v) { return v == 32 || v == 64; };
    if (!ok_dim(spec.height) || !ok_dim(spec.width)) {
        throw ConfigError("data.height/width must be 32 or 64 (power of two divisible by the U-Net scales), got " +
                          std::to_string(spec.height) + "x" + std::to_string(spec.width));
    }
    if (spec.frames < spec.window) {
        throw ConfigError("data.frames (" + std::to_string(spec.frames) + ") must be >= data.window (" +
                          std::to_string(spec.window) + ")");
    }
    if (spec.window < 25) {
        throw ConfigError("data.window must be at least 25");
    }
    if (spec.split_in == 0 || spec.split_in >= spec.window || spec.stride == 0) {
        throw ConfigError("data.split_in must be in (0, window) and stride positive");
    }
    if (spec.train_sequences == 0) {
        throw ConfigError("data.train_sequences must be positive");
    }
}

std::vector<WindowSample> Dataset::split(const std::string& name) const {
    std::vector<WindowSample> out;
    for (std::size_t i = 0; i < entries.size(); ++i) {
        if (entries[i].split == name) out.push_back(samples[i]);
    }
    return out;
}

std::vector<std::size_t> Dataset::split_indices(const std::string& name) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < entries.size(); ++i) {
        if (entries[i].split == name) out.push_back(i);
    }
    return out;
}

Dataset build_dataset(const DatasetSpec& spec) {
    validate(spec);
    Dataset ds;
    ds.spec = spec;
    const std::size_t total = spec.train_sequences + spec.val_sequences + spec.test_sequences;
    std::size_t counter[3] = {0, 0, 0};
    const char* names[3] = {"train", "val", "test"};
    for (std::size_t k = 0; k < total; ++k) {
        const std::size_t which = k < spec.train_sequences ? 0 : (k < spec.train_sequences + spec.val_sequences ? 1 : 2);
        const auto seq = synth_sequence(spec.seed, k, spec.frames, spec.height, spec.width, spec.synth);
        auto windows = window_samples(seq, spec.window, spec.stride, spec.split_in);
        for (std::size_t w = 0; w < windows.size(); ++w) {
            std::ostringstream name;
            name << "samples/" << names[which] << '_' << std::setw(5) << std::setfill('0') << counter[which]++
                 << ".rten";
            ds.entries.push_back(DatasetEntry{name.str(), names[which], k, w * spec.stride});
            ds.samples.push_back(std::move(windows[w]));
        }
    }
    return ds;
}

void write_dataset(const std::filesystem::path& dir, const Dataset& dataset) {
    std::filesystem::create_directories(dir / "samples");
    nlohmann::json manifest;
    manifest["format"] = "recticast-dataset";
    manifest["version"] = 1;
    manifest["spec"] = dataset.spec;
    nlohmann::json items = nlohmann::json::array();
    for (std::size_t i = 0; i < dataset.entries.size(); ++i) {
        const auto& e = dataset.entries[i];
        const auto& s = dataset.samples[i];
        std::vector<Tensor> parts{s.input, s.target};
        save_tensor(dir / e.file, concat0<float>(std::span<const Tensor>(parts)));
        items.push_back({{"file", e.file}, {"split", e.split}, {"sequence", e.sequence}, {"offset", e.offset}});
    }
    manifest["samples"] = items;
    std::ofstream out(dir / "manifest.json", std::ios::trunc);
    out << manifest.dump(2) << '\n';
}

Dataset read_dataset(const std::filesystem::path& dir) {
    const auto manifest_path = dir / "manifest.json";
    if (!std::filesystem::exists(manifest_path)) {
        throw PrerequisiteError("dataset manifest not found: " + manifest_path.string());
    }
    nlohmann::json manifest;
    try {
        manifest = nlohmann::json::parse(read_file_bytes(manifest_path));
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(manifest_path.string() + ": " + e.what());
    }
    if (manifest.value("format", "") != "recticast-dataset") {
        throw FormatError(manifest_path.string() + ": not a recticast dataset manifest");
    }
    Dataset ds;
    ds.spec = manifest.at("spec").get<DatasetSpec>();
    for (const auto& item : manifest.at("samples")) {
        DatasetEntry e{item.at("file").get<std::string>(), item.at("split").get<std::string>(),
                       item.at("sequence").get<std::size_t>(), item.at("offset").get<std::size_t>()};
        Tensor full = load_tensor<float>(dir / e.file);
        if (full.dim() != 4 || full.shape()[0] != ds.spec.window) {
            throw FormatError(e.file + ": expected [" + std::to_string(ds.spec.window) + ",1,H,W], got " +
                              shape_to_string(full.shape()));
        }
        ds.samples.push_back(WindowSample{full.slice0(0, ds.spec.split_in), full.slice0(ds.spec.split_in, ds.spec.window)});
        ds.entries.push_back(std::move(e));
    }
    return ds;
}

}  // namespace recticast::data
