#include "medmamba/cli/run_config.hpp"

#include "medmamba/errors.hpp"

#include <json.hpp>

#include <fstream>
#include <set>
#include <sstream>

namespace medmamba::cli {

namespace {

using nlohmann::json;
using nlohmann::ordered_json;

void reject_unknown(const json& block, const std::set<std::string>& known, const std::string& where) {
    if (!block.is_object()) {
        throw ConfigError("config: '" + where + "' must be an object");
    }
    for (const auto& [key, value] : block.items()) {
        if (!known.count(key)) {
            throw ConfigError("config: unknown key '" + (where.empty() ? key : where + "." + key) + "'");
        }
    }
}

template <typename V>
void read(const json& block, const char* key, V& out, const std::string& where) {
    if (!block.contains(key)) {
        return;
    }
    try {
        out = block.at(key).get<V>();
    } catch (const json::exception&) {
        throw ConfigError("config: '" + where + "." + key + "' has the wrong type: " + block.at(key).dump());
    }
}

} // namespace

const char* version() { return MEDMAMBA_VERSION; }

void RunConfig::validate() const {
    model.validate();
    const auto& t = training;
    if (!(t.adam.lr > 0) || !(t.adam.eps > 0) || t.adam.weight_decay < 0) {
        throw ConfigError("config: training.lr and training.eps must be positive, weight_decay non-negative");
    }
    if (t.adam.beta1 < 0 || t.adam.beta1 >= 1 || t.adam.beta2 < 0 || t.adam.beta2 >= 1) {
        throw ConfigError("config: betas must lie in [0, 1)");
    }
    if (t.epochs < 0 || t.batch_size < 2 || t.patience < 1 || t.min_delta < 0) {
        throw ConfigError("config: need epochs >= 0, batch_size >= 2, patience >= 1, min_delta >= 0");
    }
    if (protocol == Protocol::cross_validation && t.folds < 2) {
        throw ConfigError("config: training.folds must be at least 2");
    }
    if (data.format != "auto" && data.format != "folder" && data.format != "packed") {
        throw ConfigError("config: data.format must be auto, folder or packed, got '" + data.format + "'");
    }
}

void apply_override(std::string& json_text, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0) {
        throw ConfigError("override '" + assignment + "' is not of the form key=value");
    }
    const auto key = assignment.substr(0, eq);
    const auto raw = assignment.substr(eq + 1);
    json value;
    try {
        value = json::parse(raw);
    } catch (const json::exception&) {
        value = raw;
    }
    ordered_json doc;
    try {
        doc = json_text.empty() ? ordered_json::object() : ordered_json::parse(json_text);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("config: ") + e.what());
    }
    std::string pointer;
    std::stringstream parts(key);
    std::string part;
    while (std::getline(parts, part, '.')) {
        if (part.empty()) {
            throw ConfigError("override key '" + key + "' has an empty component");
        }
        pointer += "/" + part;
    }
    try {
        doc[ordered_json::json_pointer(pointer)] = value;
    } catch (const json::exception& e) {
        throw ConfigError("override '" + assignment + "': " + e.what());
    }
    json_text = doc.dump();
}

RunConfig RunConfig::from_json(std::string_view text, const std::vector<std::string>& overrides) {
    std::string merged(text);
    for (const auto& o : overrides) {
        apply_override(merged, o);
    }
    json j;
    try {
        j = json::parse(merged);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("config: ") + e.what());
    }
    reject_unknown(j, {"model", "training", "data", "output_dir", "library_version"}, "");
    RunConfig c;
    if (j.contains("model")) {
        c.model = ModelConfig::from_json(j.at("model").dump());
    }
    if (j.contains("training")) {
        const auto& t = j.at("training");
        reject_unknown(t,
                       {"lr", "beta1", "beta2", "eps", "weight_decay", "epochs", "batch_size", "patience",
                        "min_delta", "folds", "seed", "protocol"},
                       "training");
        read(t, "lr", c.training.adam.lr, "training");
        read(t, "beta1", c.training.adam.beta1, "training");
        read(t, "beta2", c.training.adam.beta2, "training");
        read(t, "eps", c.training.adam.eps, "training");
        read(t, "weight_decay", c.training.adam.weight_decay, "training");
        read(t, "epochs", c.training.epochs, "training");
        read(t, "batch_size", c.training.batch_size, "training");
        read(t, "patience", c.training.patience, "training");
        read(t, "min_delta", c.training.min_delta, "training");
        read(t, "folds", c.training.folds, "training");
        read(t, "seed", c.training.seed, "training");
        std::string protocol = "cv";
        read(t, "protocol", protocol, "training");
        if (protocol == "cv") {
            c.protocol = Protocol::cross_validation;
        } else if (protocol == "holdout") {
            c.protocol = Protocol::holdout;
        } else {
            throw ConfigError("config: training.protocol must be cv or holdout, got '" + protocol + "'");
        }
    }
    if (j.contains("data")) {
        const auto& d = j.at("data");
        reject_unknown(d, {"path", "format", "input_size"}, "data");
        read(d, "path", c.data.path, "data");
        read(d, "format", c.data.format, "data");
        if (d.contains("input_size")) {
            std::int64_t size = 0;
            read(d, "input_size", size, "data");
            const bool model_sets = j.contains("model") && j.at("model").contains("input_size");
            if (model_sets && size != c.model.input_size) {
                throw ConfigError("config: data.input_size " + std::to_string(size) + " disagrees with model.input_size " +
                                  std::to_string(c.model.input_size));
            }
            c.model.input_size = size;
        }
    }
    read(j, "output_dir", c.output_dir, "");
    c.validate();
    return c;
}

std::string RunConfig::to_json() const {
    ordered_json j;
    j["library_version"] = version();
    j["model"] = ordered_json::parse(model.to_json());
    ordered_json t;
    t["protocol"] = protocol == Protocol::cross_validation ? "cv" : "holdout";
    t["lr"] = training.adam.lr;
    t["beta1"] = training.adam.beta1;
    t["beta2"] = training.adam.beta2;
    t["eps"] = training.adam.eps;
    t["weight_decay"] = training.adam.weight_decay;
    t["epochs"] = training.epochs;
    t["batch_size"] = training.batch_size;
    t["patience"] = training.patience;
    t["min_delta"] = training.min_delta;
    t["folds"] = training.folds;
    t["seed"] = training.seed;
    j["training"] = t;
    j["data"] = {{"path", data.path}, {"format", data.format}, {"input_size", model.input_size}};
    j["output_dir"] = output_dir;
    return j.dump(2);
}

RunConfig load_run_config(const std::filesystem::path& path, const std::vector<std::string>& overrides) {
    std::string text = "{}";
    if (!path.empty()) {
        std::ifstream is(path);
        if (!is) {
            throw ConfigError("cannot read config file " + path.string());
        }
        std::stringstream ss;
        ss << is.rdbuf();
        text = ss.str();
    }
    return RunConfig::from_json(text, overrides);
}

void write_resolved_config(const RunConfig& config, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    std::ofstream os(dir / "config.json");
    os << config.to_json() << '\n';
    if (!os) {
        throw FormatError("cannot write " + (dir / "config.json").string());
    }
}

} // namespace medmamba::cli
