#pragma once

#include "medmamba/tensor.hpp"

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace medmamba {

enum class Split : std::uint8_t { train = 0, val = 1, test = 2 };

struct Sample {
    Tensor<float> image;  // [3, H, W], values in [0, 1]
    std::int64_t label = 0;
    std::string source;
    Split split = Split::train;
};

struct SampleSet {
    std::vector<Sample> samples;
    std::vector<std::string> class_names;
    std::int64_t warnings = 0;  // files skipped while loading

    std::int64_t num_classes() const { return static_cast<std::int64_t>(class_names.size()); }
    std::vector<std::int64_t> labels() const;
    // Indices of samples carrying the given split tag.
    std::vector<std::int64_t> indices_of(Split split) const;
};

/// Decodes a PNG or JPEG file into [3, H, W] floats in [0, 1].
/// Grayscale is replicated to three channels; alpha is dropped.
Tensor<float> read_image(const std::filesystem::path& path);

// Writes [1|3, H, W] values in [0, 1] as an 8-bit PNG.
void write_png(const std::filesystem::path& path, const Tensor<float>& image);

/// One subdirectory per class, sorted lexicographically to assign labels.
/// Unreadable files are skipped and counted in SampleSet::warnings.
SampleSet load_image_folder(const std::filesystem::path& root);

/// Raw contents of a packed dataset file.
struct PackedDataset {
    std::uint32_t height = 0;
    std::uint32_t width = 0;
    std::uint32_t channels = 0;
    std::uint32_t num_classes = 0;
    std::vector<std::uint8_t> splits;
    std::vector<std::uint8_t> labels;
    std::vector<std::uint8_t> pixels;  // per sample height*width*channels, HWC order

    std::size_t size() const { return labels.size(); }
    std::size_t sample_bytes() const { return static_cast<std::size_t>(height) * width * channels; }
};

PackedDataset read_packed(const std::filesystem::path& path);
void write_packed(const PackedDataset& data, const std::filesystem::path& path);

// Materializes samples; grayscale is promoted to three channels.
SampleSet unpack(const PackedDataset& data);
SampleSet load_packed(const std::filesystem::path& path);

// Quantizes samples that share one spatial size into the packed layout.
PackedDataset pack(const SampleSet& set, std::uint32_t channels = 3);

/// Bilinear resize of a [C, H, W] image to [C, size, size] with pixel
/// centers at half-integers (no corner alignment); output clamped to [0, 1].
template <typename T>
Tensor<T> resize_bilinear(const Tensor<T>& image, std::int64_t size);

// (x - 0.5) / 0.5 per channel.
template <typename T>
Tensor<T> normalize(const Tensor<T>& image);

/// Per-class round-robin assignment of shuffled indices to k folds.
/// Every class needs at least k samples.
std::vector<std::vector<std::int64_t>> stratified_folds(std::span<const std::int64_t> labels, int k,
                                                        std::uint64_t seed);

} // namespace medmamba
