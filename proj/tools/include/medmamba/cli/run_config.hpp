#pragma once

#include "medmamba/model.hpp"
#include "medmamba/train.hpp"

#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace medmamba::cli {

enum class Protocol { cross_validation, holdout };

struct DataConfig {
    std::string path;
    std::string format = "auto";  // auto | folder | packed
};

/// Everything a run needs. Parsed from JSON; unknown keys are rejected.
struct RunConfig {
    ModelConfig model;
    TrainSchedule training;
    Protocol protocol = Protocol::cross_validation;
    DataConfig data;
    std::string output_dir = "runs/latest";

    // Throws ConfigError.
    void validate() const;

    static RunConfig from_json(std::string_view text, const std::vector<std::string>& overrides = {});
    // Fully resolved, including the library version.
    std::string to_json() const;
};

/// `key=value` with a dotted key path ("training.epochs=10"). The value is
/// parsed as JSON when possible and taken as a string otherwise.
void apply_override(std::string& json_text, const std::string& assignment);

RunConfig load_run_config(const std::filesystem::path& path, const std::vector<std::string>& overrides = {});

// Writes <dir>/config.json.
void write_resolved_config(const RunConfig& config, const std::filesystem::path& dir);

// Library version string.
const char* version();

} // namespace medmamba::cli
