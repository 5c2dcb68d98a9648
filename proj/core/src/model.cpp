#include "medmamba/model.hpp"

#include "medmamba/errors.hpp"

#include <json.hpp>

#include <set>
#include <sstream>

namespace medmamba {

namespace {

std::string list_str(const std::vector<std::int64_t>& v) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < v.size(); ++i) {
        os << (i ? "," : "") << v[i];
    }
    os << ']';
    return os.str();
}

template <typename T>
Tensor<T> trunc_normal(Shape shape, Rng& rng) {
    auto t = Tensor<T>::zeros(std::move(shape));
    for (auto& v : t.mutable_data()) {
        v = static_cast<T>(rng.truncated_normal(0.02));
    }
    t.set_requires_grad(true);
    return t;
}

template <typename T>
Tensor<T> filled(Shape shape, T value) {
    auto t = Tensor<T>::full(std::move(shape), value);
    t.set_requires_grad(true);
    return t;
}

template <typename T>
Tensor<T> to_channels_last(const Tensor<T>& x) {
    return permute(x, {0, 2, 3, 1});
}

template <typename T>
Tensor<T> to_channels_first(const Tensor<T>& x) {
    return permute(x, {0, 3, 1, 2});
}

} // namespace

// ---------------------------------------------------------------------------
// ModelConfig

void ModelConfig::validate() const {
    if (depths.empty() || depths.size() != dims.size()) {
        throw ConfigError("ModelConfig: depths " + list_str(depths) + " and dims " + list_str(dims) +
                          " must be non-empty and of equal length");
    }
    for (auto d : depths) {
        if (d < 1) {
            throw ConfigError("ModelConfig: every stage needs at least one block, got depths " + list_str(depths));
        }
    }
    if (dims[0] < 2 || dims[0] % 2 != 0) {
        throw ConfigError("ModelConfig: dims[0] must be even and positive, got " + list_str(dims));
    }
    for (std::size_t i = 1; i < dims.size(); ++i) {
        if (dims[i] != 2 * dims[i - 1]) {
            throw ConfigError("ModelConfig: dims must double per stage, got " + list_str(dims));
        }
    }
    if (num_classes < 2) {
        throw ConfigError("ModelConfig: num_classes must be at least 2, got " + std::to_string(num_classes));
    }
    if (state_size < 1 || ssm_expand < 1) {
        throw ConfigError("ModelConfig: state_size and ssm_expand must be positive");
    }
    if (input_size < 4 || input_size % 4 != 0) {
        throw ConfigError("ModelConfig: input_size must be a positive multiple of 4, got " +
                          std::to_string(input_size));
    }
}

std::string ModelConfig::to_json() const {
    nlohmann::ordered_json j;
    j["depths"] = depths;
    j["dims"] = dims;
    j["num_classes"] = num_classes;
    j["state_size"] = state_size;
    j["ssm_expand"] = ssm_expand;
    j["input_size"] = input_size;
    return j.dump();
}

ModelConfig ModelConfig::from_json(std::string_view text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("ModelConfig: ") + e.what());
    }
    if (!j.is_object()) {
        throw ConfigError("ModelConfig: expected a JSON object");
    }
    static const std::set<std::string> known{"depths", "dims", "num_classes", "state_size", "ssm_expand",
                                             "input_size", "base_dim"};
    for (const auto& [key, value] : j.items()) {
        if (!known.count(key)) {
            throw ConfigError("ModelConfig: unknown key '" + key + "'");
        }
    }
    ModelConfig c;
    try {
        if (j.contains("depths")) {
            c.depths = j.at("depths").get<std::vector<std::int64_t>>();
        }
        if (j.contains("dims")) {
            c.dims = j.at("dims").get<std::vector<std::int64_t>>();
        } else if (j.contains("base_dim")) {
            c.dims.resize(c.depths.size());
            c.with_base_dim(j.at("base_dim").get<std::int64_t>());
        }
        if (j.contains("dims") && j.contains("base_dim")) {
            throw ConfigError("ModelConfig: give either dims or base_dim, not both");
        }
        for (const char* key : {"num_classes", "state_size", "ssm_expand", "input_size"}) {
            if (!j.contains(key)) {
                continue;
            }
            const auto v = j.at(key).get<std::int64_t>();
            if (std::string_view(key) == "num_classes") {
                c.num_classes = v;
            } else if (std::string_view(key) == "state_size") {
                c.state_size = v;
            } else if (std::string_view(key) == "ssm_expand") {
                c.ssm_expand = v;
            } else {
                c.input_size = v;
            }
        }
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("ModelConfig: ") + e.what());
    }
    c.validate();
    return c;
}

ModelConfig& ModelConfig::with_base_dim(std::int64_t c) {
    dims.resize(depths.size());
    for (std::size_t i = 0; i < dims.size(); ++i) {
        dims[i] = c << i;
    }
    return *this;
}

ModelConfig ModelConfig::tiny() {
    ModelConfig c;
    c.depths = {1, 1, 1, 1};
    c.with_base_dim(8);
    c.state_size = 4;
    c.input_size = 16;
    return c;
}

// ---------------------------------------------------------------------------
// building blocks

template <typename T>
Tensor<T> patch_embed(const Tensor<T>& image, const PatchEmbedParams<T>& params) {
    if (image.rank() != 4 || image.dim(1) != 3) {
        throw DimensionError("patch_embed: expects [N,3,S,S], got " + shape_str(image.shape()));
    }
    if (image.dim(2) % 4 != 0 || image.dim(3) % 4 != 0) {
        throw ConfigError("patch_embed: spatial extent of " + shape_str(image.shape()) + " is not divisible by 4");
    }
    Conv2dOptions opt;
    opt.stride = {4, 4};
    const auto x = conv2d(image, params.weight, params.bias, opt);
    return to_channels_first(layer_norm(to_channels_last(x), params.norm_gamma, params.norm_beta));
}

template <typename T>
Tensor<T> patch_merge(const Tensor<T>& x, const PatchMergeParams<T>& params) {
    if (x.rank() != 4) {
        throw DimensionError("patch_merge: expects [N,C,H,W], got " + shape_str(x.shape()));
    }
    if (x.dim(2) % 2 != 0 || x.dim(3) % 2 != 0) {
        throw ConfigError("patch_merge: odd spatial extent in " + shape_str(x.shape()));
    }
    const auto cat = to_channels_last(space_to_depth2x2(x));
    const auto y = linear(layer_norm(cat, params.norm_gamma, params.norm_beta), params.reduction_weight);
    return to_channels_first(y);
}

template <typename T>
std::pair<Tensor<T>, Tensor<T>> channel_split(const Tensor<T>& x) {
    if (x.rank() < 2) {
        throw DimensionError("channel_split: expects [N,C,...], got " + shape_str(x.shape()));
    }
    const auto c = x.dim(1);
    if (c % 2 != 0) {
        throw ConfigError("channel_split: odd channel count " + std::to_string(c));
    }
    return {narrow(x, 1, 0, c / 2), narrow(x, 1, c / 2, c / 2)};
}

template <typename T>
Tensor<T> channel_shuffle(const Tensor<T>& x, std::int64_t groups) {
    if (x.rank() < 2) {
        throw DimensionError("channel_shuffle: expects [N,C,...], got " + shape_str(x.shape()));
    }
    const auto c = x.dim(1);
    if (groups < 1 || c % groups != 0) {
        throw ConfigError("channel_shuffle: " + std::to_string(groups) + " groups do not divide " +
                          std::to_string(c) + " channels");
    }
    const auto per_group = c / groups;
    std::vector<std::int64_t> source(static_cast<std::size_t>(c));
    for (std::int64_t j = 0; j < c; ++j) {
        source[static_cast<std::size_t>(j)] = (j % groups) * per_group + j / groups;
    }
    return index_select(x, 1, std::span<const std::int64_t>(source));
}

template <typename T>
Tensor<T> conv_branch(const Tensor<T>& x, ConvBranchParams<T>& params, NormMode mode) {
    Conv2dOptions opt;
    opt.padding = {1, 1};
    Tensor<T> y = x;
    for (int i = 0; i < kConvBranchLayers; ++i) {
        const auto k = static_cast<std::size_t>(i);
        y = conv2d(y, params.conv_weight[k], Tensor<T>{}, opt);
        y = batch_norm2d(y, params.bn_gamma[k], params.bn_beta[k], params.bn_stats[k], mode);
        y = relu(y);
    }
    return y;
}

template <typename T>
Tensor<T> ssm_branch(const Tensor<T>& x, const SsmBranchParams<T>& params) {
    const auto xn = layer_norm(to_channels_last(x), params.norm_gamma, params.norm_beta);
    const auto gate = silu(linear(xn, params.gate_weight, params.gate_bias));
    auto main = linear(xn, params.in_weight, params.in_bias);
    Conv2dOptions dw;
    dw.padding = {1, 1};
    dw.groups = params.dw_weight.dim(0);
    main = to_channels_last(silu(conv2d(to_channels_first(main), params.dw_weight, params.dw_bias, dw)));
    main = ss2d_forward(main, params.ss2d);
    const auto y = linear(mul(main, gate), params.out_weight, params.out_bias);
    return to_channels_first(y);
}

template <typename T>
Tensor<T> block_forward(const Tensor<T>& x, BlockParams<T>& params, NormMode mode) {
    auto [left, right] = channel_split(x);
    const auto merged = concat<T>({conv_branch(left, params.conv, mode), ssm_branch(right, params.ssm)}, 1);
    return add(channel_shuffle(merged, 2), x);
}

// ---------------------------------------------------------------------------
// MedMamba

template <typename T>
MedMamba<T>::MedMamba(ModelConfig config, std::uint64_t seed) : config_(std::move(config)) {
    config_.validate();
    Rng rng(seed);
    const auto c0 = config_.dims[0];
    embed.weight = trunc_normal<T>({c0, 3, 4, 4}, rng);
    embed.bias = filled<T>({c0}, T(0));
    embed.norm_gamma = filled<T>({c0}, T(1));
    embed.norm_beta = filled<T>({c0}, T(0));

    stages.resize(config_.depths.size());
    for (std::size_t s = 0; s < stages.size(); ++s) {
        const auto dim = config_.dims[s];
        const auto half = dim / 2;
        const auto expanded = config_.ssm_expand * half;
        auto& stage = stages[s];
        stage.blocks.resize(static_cast<std::size_t>(config_.depths[s]));
        for (auto& block : stage.blocks) {
            for (int i = 0; i < kConvBranchLayers; ++i) {
                const auto k = static_cast<std::size_t>(i);
                block.conv.conv_weight[k] = trunc_normal<T>({half, half, 3, 3}, rng);
                block.conv.bn_gamma[k] = filled<T>({half}, T(1));
                block.conv.bn_beta[k] = filled<T>({half}, T(0));
                block.conv.bn_stats[k] = BatchNormStats<T>::create(half);
            }
            auto& ssm = block.ssm;
            ssm.norm_gamma = filled<T>({half}, T(1));
            ssm.norm_beta = filled<T>({half}, T(0));
            ssm.in_weight = trunc_normal<T>({expanded, half}, rng);
            ssm.in_bias = filled<T>({expanded}, T(0));
            ssm.gate_weight = trunc_normal<T>({expanded, half}, rng);
            ssm.gate_bias = filled<T>({expanded}, T(0));
            ssm.dw_weight = trunc_normal<T>({expanded, 1, 3, 3}, rng);
            ssm.dw_bias = filled<T>({expanded}, T(0));
            ssm.ss2d = SS2DParams<T>::init(expanded, config_.state_size, rng);
            ssm.out_weight = trunc_normal<T>({half, expanded}, rng);
            ssm.out_bias = filled<T>({half}, T(0));
        }
        if (s + 1 < stages.size()) {
            stage.merge.norm_gamma = filled<T>({4 * dim}, T(1));
            stage.merge.norm_beta = filled<T>({4 * dim}, T(0));
            stage.merge.reduction_weight = trunc_normal<T>({2 * dim, 4 * dim}, rng);
        }
    }
    const auto last = config_.dims.back();
    head.norm_gamma = filled<T>({last}, T(1));
    head.norm_beta = filled<T>({last}, T(0));
    head.weight = trunc_normal<T>({config_.num_classes, last}, rng);
    head.bias = filled<T>({config_.num_classes}, T(0));
}

template <typename T>
Tensor<T> MedMamba<T>::forward(const Tensor<T>& image, NormMode mode, ForwardTrace* trace) {
    auto x = patch_embed(image, embed);
    if (trace) {
        trace->embedded = x.shape();
        trace->stage_outputs.clear();
    }
    for (std::size_t s = 0; s < stages.size(); ++s) {
        for (auto& block : stages[s].blocks) {
            x = block_forward(x, block, mode);
        }
        if (trace) {
            trace->stage_outputs.push_back(x.shape());
        }
        if (s + 1 < stages.size()) {
            // Odd maps (e.g. 1x1 in tiny configs) are zero padded to even extents.
            const auto pad_h = x.dim(2) % 2;
            const auto pad_w = x.dim(3) % 2;
            if (pad_h || pad_w) {
                x = pad2d(x, pad_h, pad_w);
            }
            x = patch_merge(x, stages[s].merge);
        }
    }
    const auto normed = to_channels_first(layer_norm(to_channels_last(x), head.norm_gamma, head.norm_beta));
    return linear(global_avg_pool(normed), head.weight, head.bias);
}

template <typename T>
NamedTensors<T> MedMamba<T>::parameters() {
    NamedTensors<T> out;
    out.emplace_back("patch_embed.proj.weight", &embed.weight);
    out.emplace_back("patch_embed.proj.bias", &embed.bias);
    out.emplace_back("patch_embed.norm.weight", &embed.norm_gamma);
    out.emplace_back("patch_embed.norm.bias", &embed.norm_beta);
    for (std::size_t s = 0; s < stages.size(); ++s) {
        const std::string stage = "stages." + std::to_string(s) + ".";
        for (std::size_t b = 0; b < stages[s].blocks.size(); ++b) {
            auto& block = stages[s].blocks[b];
            const std::string p = stage + "blocks." + std::to_string(b) + ".";
            for (int i = 0; i < kConvBranchLayers; ++i) {
                const auto k = static_cast<std::size_t>(i);
                const std::string l = p + "conv." + std::to_string(i) + ".";
                out.emplace_back(l + "conv.weight", &block.conv.conv_weight[k]);
                out.emplace_back(l + "bn.weight", &block.conv.bn_gamma[k]);
                out.emplace_back(l + "bn.bias", &block.conv.bn_beta[k]);
            }
            auto& ssm = block.ssm;
            out.emplace_back(p + "ssm.norm.weight", &ssm.norm_gamma);
            out.emplace_back(p + "ssm.norm.bias", &ssm.norm_beta);
            out.emplace_back(p + "ssm.in_proj.weight", &ssm.in_weight);
            out.emplace_back(p + "ssm.in_proj.bias", &ssm.in_bias);
            out.emplace_back(p + "ssm.gate_proj.weight", &ssm.gate_weight);
            out.emplace_back(p + "ssm.gate_proj.bias", &ssm.gate_bias);
            out.emplace_back(p + "ssm.dwconv.weight", &ssm.dw_weight);
            out.emplace_back(p + "ssm.dwconv.bias", &ssm.dw_bias);
            for (auto& [name, t] : ssm.ss2d.named()) {
                out.emplace_back(p + "ssm.ss2d." + name, t);
            }
            out.emplace_back(p + "ssm.out_proj.weight", &ssm.out_weight);
            out.emplace_back(p + "ssm.out_proj.bias", &ssm.out_bias);
        }
        if (s + 1 < stages.size()) {
            out.emplace_back(stage + "merge.norm.weight", &stages[s].merge.norm_gamma);
            out.emplace_back(stage + "merge.norm.bias", &stages[s].merge.norm_beta);
            out.emplace_back(stage + "merge.reduction.weight", &stages[s].merge.reduction_weight);
        }
    }
    out.emplace_back("head.norm.weight", &head.norm_gamma);
    out.emplace_back("head.norm.bias", &head.norm_beta);
    out.emplace_back("head.fc.weight", &head.weight);
    out.emplace_back("head.fc.bias", &head.bias);
    return out;
}

template <typename T>
NamedTensors<T> MedMamba<T>::buffers() {
    NamedTensors<T> out;
    for (std::size_t s = 0; s < stages.size(); ++s) {
        for (std::size_t b = 0; b < stages[s].blocks.size(); ++b) {
            auto& conv = stages[s].blocks[b].conv;
            for (int i = 0; i < kConvBranchLayers; ++i) {
                const auto k = static_cast<std::size_t>(i);
                const std::string l =
                    "stages." + std::to_string(s) + ".blocks." + std::to_string(b) + ".conv." + std::to_string(i) + ".bn.";
                out.emplace_back(l + "running_mean", &conv.bn_stats[k].running_mean);
                out.emplace_back(l + "running_var", &conv.bn_stats[k].running_var);
                out.emplace_back(l + "batches_seen", &conv.bn_stats[k].batches_seen);
            }
        }
    }
    return out;
}

template <typename T>
NamedTensors<T> MedMamba<T>::state() {
    auto out = parameters();
    for (auto& b : buffers()) {
        out.push_back(b);
    }
    return out;
}

template <typename T>
std::int64_t MedMamba<T>::parameter_count() {
    std::int64_t n = 0;
    for (auto& [name, t] : parameters()) {
        n += static_cast<std::int64_t>(t->numel());
    }
    return n;
}

template <typename T>
void MedMamba<T>::zero_grad() {
    for (auto& [name, t] : parameters()) {
        t->zero_grad();
    }
}

template <typename T>
std::vector<std::vector<T>> MedMamba<T>::snapshot() {
    std::vector<std::vector<T>> out;
    for (auto& [name, t] : state()) {
        out.emplace_back(t->data().begin(), t->data().end());
    }
    return out;
}

template <typename T>
void MedMamba<T>::restore(const std::vector<std::vector<T>>& values) {
    auto all = state();
    if (all.size() != values.size()) {
        throw StateError("MedMamba::restore: snapshot has " + std::to_string(values.size()) + " tensors, model has " +
                         std::to_string(all.size()));
    }
    for (std::size_t i = 0; i < all.size(); ++i) {
        auto dst = all[i].second->mutable_data();
        if (dst.size() != values[i].size()) {
            throw StateError("MedMamba::restore: size mismatch for " + all[i].first);
        }
        std::copy(values[i].begin(), values[i].end(), dst.begin());
    }
}

#define MEDMAMBA_INSTANTIATE_MODEL(T)                                                                              \
    template Tensor<T> patch_embed(const Tensor<T>&, const PatchEmbedParams<T>&);                                   \
    template Tensor<T> patch_merge(const Tensor<T>&, const PatchMergeParams<T>&);                                   \
    template std::pair<Tensor<T>, Tensor<T>> channel_split(const Tensor<T>&);                                       \
    template Tensor<T> channel_shuffle(const Tensor<T>&, std::int64_t);                                             \
    template Tensor<T> conv_branch(const Tensor<T>&, ConvBranchParams<T>&, NormMode);                               \
    template Tensor<T> ssm_branch(const Tensor<T>&, const SsmBranchParams<T>&);                                     \
    template Tensor<T> block_forward(const Tensor<T>&, BlockParams<T>&, NormMode);                                  \
    template class MedMamba<T>;

MEDMAMBA_INSTANTIATE_MODEL(float)
MEDMAMBA_INSTANTIATE_MODEL(double)

} // namespace medmamba
