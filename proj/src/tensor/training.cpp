#include "recticast/training.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "recticast/tensor_io.hpp"

namespace recticast {

TrainResult run_training(ParamStore<float>& params, AdamState<float>& adam, const TrainOptions& options,
                         const std::function<ag::Var<float>(Rng&, std::size_t)>& loss_fn) {
    TrainResult result;
    const std::size_t start = adam.step;
    const std::size_t horizon = options.schedule_total ? options.schedule_total : start + options.steps;
    Rng rng(options.seed ^ (0xA24BAED4963EE407ULL * (start + 1)));
    result.losses.reserve(options.steps);
    for (std::size_t k = 0; k < options.steps; ++k) {
        const std::size_t step = start + k;
        params.zero_grad();
        ag::Var<float> loss = loss_fn(rng, step);
        const double value = static_cast<double>(loss.value()[0]);
        if (!std::isfinite(value)) {
            throw NumericError("non-finite loss " + std::to_string(value) + " at step " + std::to_string(step));
        }
        loss.backward();
        const double lr = cosine_lr(step, horizon, options.lr_max, options.lr_min);
        adam_step(params, adam, lr);
        result.losses.push_back(value);
        if (options.on_step) {
            options.on_step(step + 1, value, lr);
        }
    }
    result.final_step = adam.step;
    return result;
}

void to_json(nlohmann::json& j, const TrainOptions& o) {
    j = nlohmann::json{{"steps", o.steps},   {"batch", o.batch},   {"lr_max", o.lr_max},
                       {"lr_min", o.lr_min}, {"seed", o.seed},     {"schedule_total", o.schedule_total}};
}

namespace {

std::string file_name(const std::string& param) { return param + ".rten"; }

}  // namespace

void save_checkpoint(const std::filesystem::path& dir, const ParamStore<float>& params,
                     const AdamState<float>* adam, const nlohmann::json& manifest) {
    std::filesystem::create_directories(dir / "params");
    nlohmann::json m = manifest;
    nlohmann::json names = nlohmann::json::array();
    for (const auto& [name, var] : params.entries()) {
        save_tensor(dir / "params" / file_name(name), var.value());
        names.push_back(name);
    }
    m["parameters"] = names;
    if (adam) {
        std::filesystem::create_directories(dir / "adam");
        m["adam_step"] = adam->step;
        for (const auto& [name, t] : adam->first_moment) {
            save_tensor(dir / "adam" / ("m." + file_name(name)), t);
            save_tensor(dir / "adam" / ("v." + file_name(name)), adam->second_moment.at(name));
        }
    }
    std::ofstream out(dir / "manifest.json", std::ios::trunc);
    out << m.dump(2) << '\n';
}

nlohmann::json read_checkpoint_manifest(const std::filesystem::path& dir) {
    const auto path = dir / "manifest.json";
    if (!std::filesystem::exists(path)) {
        throw PrerequisiteError("checkpoint not found: " + dir.string());
    }
    try {
        return nlohmann::json::parse(read_file_bytes(path));
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
}

nlohmann::json load_checkpoint(const std::filesystem::path& dir, ParamStore<float>& params, AdamState<float>* adam) {
    nlohmann::json m = read_checkpoint_manifest(dir);
    std::vector<std::pair<std::string, Tensor>> values;
    for (const auto& name : m.at("parameters")) {
        const auto n = name.get<std::string>();
        values.emplace_back(n, load_tensor<float>(dir / "params" / file_name(n)));
    }
    params.load_values(values);
    if (adam && m.contains("adam_step")) {
        adam->step = m.at("adam_step").get<std::size_t>();
        adam->first_moment.clear();
        adam->second_moment.clear();
        for (const auto& [name, _] : params.entries()) {
            const auto mp = dir / "adam" / ("m." + file_name(name));
            if (std::filesystem::exists(mp)) {
                adam->first_moment[name] = load_tensor<float>(mp);
                adam->second_moment[name] = load_tensor<float>(dir / "adam" / ("v." + file_name(name)));
            }
        }
    }
    return m;
}

std::string checkpoint_hash(const std::filesystem::path& dir) {
    std::vector<std::filesystem::path> files;
    for (const auto& e : std::filesystem::recursive_directory_iterator(dir)) {
        if (e.is_regular_file()) files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
    std::string all;
    for (const auto& f : files) {
        all += std::filesystem::relative(f, dir).generic_string();
        all += '\0';
        all += fnv1a_hex(read_file_bytes(f));
    }
    return fnv1a_hex(all);
}

}  // namespace recticast
