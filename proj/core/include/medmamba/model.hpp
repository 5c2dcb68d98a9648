#pragma once

#include "medmamba/ops.hpp"
#include "medmamba/rng.hpp"
#include "medmamba/ss2d.hpp"
#include "medmamba/tensor.hpp"

#include <array>
#include <cstdint>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace medmamba {

/// Fully determines a model instance.
struct ModelConfig {
    std::vector<std::int64_t> depths{2, 2, 4, 2};
    std::vector<std::int64_t> dims{96, 192, 384, 768};
    std::int64_t num_classes = 2;
    std::int64_t state_size = 16;
    std::int64_t ssm_expand = 2;
    std::int64_t input_size = 224;

    // Throws ConfigError describing the first violated constraint.
    void validate() const;

    std::string to_json() const;
    // Unknown keys are rejected.
    static ModelConfig from_json(std::string_view text);

    // dims = [c, 2c, 4c, ...] for the current stage count.
    ModelConfig& with_base_dim(std::int64_t c);

    // C=8, depths [1,1,1,1], N=4, 16x16 input.
    static ModelConfig tiny();

    bool operator==(const ModelConfig&) const = default;
};

template <typename T>
using NamedTensors = std::vector<std::pair<std::string, Tensor<T>*>>;

template <typename T>
struct PatchEmbedParams {
    Tensor<T> weight;  // [C, 3, 4, 4]
    Tensor<T> bias;    // [C]
    Tensor<T> norm_gamma;
    Tensor<T> norm_beta;
};

template <typename T>
struct PatchMergeParams {
    Tensor<T> norm_gamma;        // [4C]
    Tensor<T> norm_beta;         // [4C]
    Tensor<T> reduction_weight;  // [2C, 4C]
};

inline constexpr int kConvBranchLayers = 3;

template <typename T>
struct ConvBranchParams {
    std::array<Tensor<T>, kConvBranchLayers> conv_weight;  // [c, c, 3, 3]
    std::array<Tensor<T>, kConvBranchLayers> bn_gamma;
    std::array<Tensor<T>, kConvBranchLayers> bn_beta;
    std::array<BatchNormStats<T>, kConvBranchLayers> bn_stats;
};

template <typename T>
struct SsmBranchParams {
    Tensor<T> norm_gamma;  // [c]
    Tensor<T> norm_beta;
    Tensor<T> in_weight;  // [E, c]
    Tensor<T> in_bias;
    Tensor<T> gate_weight;  // [E, c]
    Tensor<T> gate_bias;
    Tensor<T> dw_weight;  // [E, 1, 3, 3]
    Tensor<T> dw_bias;
    SS2DParams<T> ss2d;
    Tensor<T> out_weight;  // [c, E]
    Tensor<T> out_bias;
};

template <typename T>
struct BlockParams {
    ConvBranchParams<T> conv;
    SsmBranchParams<T> ssm;
};

template <typename T>
struct HeadParams {
    Tensor<T> norm_gamma;
    Tensor<T> norm_beta;
    Tensor<T> weight;  // [K, C_last]
    Tensor<T> bias;
};

template <typename T>
struct StageParams {
    std::vector<BlockParams<T>> blocks;
    PatchMergeParams<T> merge;  // unused after the last stage
};

// [N,3,S,S] -> [N,C,S/4,S/4]: 4x4 stride-4 conv, then layer norm over channels.
template <typename T>
Tensor<T> patch_embed(const Tensor<T>& image, const PatchEmbedParams<T>& params);

// [N,C,H,W] -> [N,2C,H/2,W/2]: 2x2 concat, layer norm, linear 4C -> 2C.
template <typename T>
Tensor<T> patch_merge(const Tensor<T>& x, const PatchMergeParams<T>& params);

template <typename T>
std::pair<Tensor<T>, Tensor<T>> channel_split(const Tensor<T>& x);

// Channel i of group g moves to position i * groups + g.
template <typename T>
Tensor<T> channel_shuffle(const Tensor<T>& x, std::int64_t groups = 2);

template <typename T>
Tensor<T> conv_branch(const Tensor<T>& x, ConvBranchParams<T>& params, NormMode mode);

template <typename T>
Tensor<T> ssm_branch(const Tensor<T>& x, const SsmBranchParams<T>& params);

// split -> (conv, ssm) -> concat -> shuffle(2) -> + x
template <typename T>
Tensor<T> block_forward(const Tensor<T>& x, BlockParams<T>& params, NormMode mode);

// Extents recorded while running a forward pass.
struct ForwardTrace {
    Shape embedded;
    std::vector<Shape> stage_outputs;
};

/// The MedMamba classifier: patch embedding, stages of SS-Conv-SSM blocks
/// separated by patch merging, and a norm / pool / linear head.
template <typename T>
class MedMamba {
public:
    explicit MedMamba(ModelConfig config, std::uint64_t seed = 0);

    const ModelConfig& config() const { return config_; }

    // Logits [N, num_classes]; no softmax.
    Tensor<T> forward(const Tensor<T>& image, NormMode mode, ForwardTrace* trace = nullptr);

    // Trainable tensors in declaration order, dotted names.
    NamedTensors<T> parameters();
    // Batch-norm running statistics.
    NamedTensors<T> buffers();
    // parameters() followed by buffers(), the checkpoint payload order.
    NamedTensors<T> state();

    std::int64_t parameter_count();
    void zero_grad();

    std::vector<std::vector<T>> snapshot();
    void restore(const std::vector<std::vector<T>>& values);

    PatchEmbedParams<T> embed;
    std::vector<StageParams<T>> stages;
    HeadParams<T> head;

private:
    ModelConfig config_;
};

template <typename T>
Tensor<T> model_forward(const Tensor<T>& image, MedMamba<T>& model, NormMode mode) {
    return model.forward(image, mode);
}

} // namespace medmamba
