#pragma once

#include "medmamba/model.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace medmamba {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointMeta {
    ModelConfig config;
    std::uint64_t seed = 0;
    std::map<std::string, double> metrics;
    std::vector<std::string> class_names;
};

template <typename T>
struct LoadedCheckpoint {
    CheckpointMeta meta;
    MedMamba<T> model;
};

/// Writes parameters and batch-norm buffers as 32-bit floats. The header
/// config is taken from the model; meta.config is ignored.
template <typename T>
void save_checkpoint(MedMamba<T>& model, const CheckpointMeta& meta, const std::filesystem::path& path);

/// If `expected` is given and differs from the stored config, throws
/// ConfigError listing both. Bad magic, version, truncation or a tensor
/// name/extent mismatch throw FormatError.
template <typename T>
LoadedCheckpoint<T> load_checkpoint(const std::filesystem::path& path, const ModelConfig* expected = nullptr);

// Header only, without materializing the model.
CheckpointMeta read_checkpoint_meta(const std::filesystem::path& path);

} // namespace medmamba
