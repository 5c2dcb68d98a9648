#include "medmamba/ss2d.hpp"

#include "medmamba/errors.hpp"
#include "medmamba/ops.hpp"

namespace medmamba {

RouteMaps RouteMaps::build(std::int64_t height, std::int64_t width) {
    if (height < 1 || width < 1) {
        throw DimensionError("RouteMaps: grid must be at least 1x1");
    }
    RouteMaps m;
    m.height = height;
    m.width = width;
    const std::int64_t length = height * width;
    auto& row = m.order[static_cast<int>(ScanRoute::row_forward)];
    auto& col = m.order[static_cast<int>(ScanRoute::col_forward)];
    row.resize(static_cast<std::size_t>(length));
    col.resize(static_cast<std::size_t>(length));
    for (std::int64_t s = 0; s < length; ++s) {
        row[static_cast<std::size_t>(s)] = s;
        col[static_cast<std::size_t>(s)] = (s % height) * width + s / height;
    }
    m.order[static_cast<int>(ScanRoute::row_reverse)].assign(row.rbegin(), row.rend());
    m.order[static_cast<int>(ScanRoute::col_reverse)].assign(col.rbegin(), col.rend());
    for (int r = 0; r < kScanRoutes; ++r) {
        auto& inv = m.inverse[static_cast<std::size_t>(r)];
        inv.resize(static_cast<std::size_t>(length));
        for (std::int64_t s = 0; s < length; ++s) {
            inv[static_cast<std::size_t>(m.order[static_cast<std::size_t>(r)][static_cast<std::size_t>(s)])] = s;
        }
    }
    return m;
}

template <typename T>
ScanRoutes<T> scan_expand(const Tensor<T>& x) {
    if (x.rank() == 3) {
        return scan_expand(reshape(x, {1, x.dim(0), x.dim(1), x.dim(2)}));
    }
    if (x.rank() != 4) {
        throw DimensionError("scan_expand: expects [B,H,W,d], got " + shape_str(x.shape()));
    }
    ScanRoutes<T> out;
    out.maps = RouteMaps::build(x.dim(1), x.dim(2));
    const auto flat = reshape(x, {x.dim(0), x.dim(1) * x.dim(2), x.dim(3)});
    for (int r = 0; r < kScanRoutes; ++r) {
        out.sequences[static_cast<std::size_t>(r)] =
            index_select(flat, 1, std::span<const std::int64_t>(out.maps.order[static_cast<std::size_t>(r)]));
    }
    return out;
}

template <typename T>
Tensor<T> scan_merge(const std::array<Tensor<T>, kScanRoutes>& sequences, const RouteMaps& maps) {
    const Shape& s0 = sequences[0].shape();
    if (s0.size() != 3 || s0[1] != maps.length()) {
        throw DimensionError("scan_merge: sequence " + shape_str(s0) + " does not cover a " +
                             std::to_string(maps.height) + "x" + std::to_string(maps.width) + " grid");
    }
    Tensor<T> total;
    for (int r = 0; r < kScanRoutes; ++r) {
        const auto& seq = sequences[static_cast<std::size_t>(r)];
        if (seq.shape() != s0) {
            throw DimensionError("scan_merge: route shapes " + shape_str(s0) + " vs " + shape_str(seq.shape()));
        }
        auto spatial = index_select(seq, 1, std::span<const std::int64_t>(maps.inverse[static_cast<std::size_t>(r)]));
        total = r == 0 ? spatial : add(total, spatial);
    }
    return reshape(total, {s0[0], maps.height, maps.width, s0[2]});
}

template <typename T>
SS2DParams<T> SS2DParams<T>::init(std::int64_t channels, std::int64_t state_size, Rng& rng) {
    SS2DParams p;
    for (auto& r : p.routes) {
        r = SelectiveSSMParams<T>::init(channels, state_size, rng);
    }
    p.norm_gamma = Tensor<T>::full({channels}, T(1));
    p.norm_beta = Tensor<T>::zeros({channels});
    p.norm_gamma.set_requires_grad(true);
    p.norm_beta.set_requires_grad(true);
    return p;
}

template <typename T>
std::vector<std::pair<std::string, Tensor<T>*>> SS2DParams<T>::named() {
    std::vector<std::pair<std::string, Tensor<T>*>> out;
    for (int r = 0; r < kScanRoutes; ++r) {
        for (auto& [name, t] : routes[static_cast<std::size_t>(r)].named()) {
            out.emplace_back("route" + std::to_string(r) + "." + name, t);
        }
    }
    out.emplace_back("out_norm.weight", &norm_gamma);
    out.emplace_back("out_norm.bias", &norm_beta);
    return out;
}

template <typename T>
Tensor<T> ss2d_forward(const Tensor<T>& x, const SS2DParams<T>& params) {
    if (x.rank() == 3) {
        const auto y = ss2d_forward(reshape(x, {1, x.dim(0), x.dim(1), x.dim(2)}), params);
        return reshape(y, x.shape());
    }
    if (x.rank() != 4 || x.dim(3) != params.norm_gamma.dim(0)) {
        throw DimensionError("ss2d_forward: x " + shape_str(x.shape()) + " vs " +
                             std::to_string(params.norm_gamma.dim(0)) + " channels");
    }
    auto routes = scan_expand(x);
    std::array<Tensor<T>, kScanRoutes> processed;
    for (int r = 0; r < kScanRoutes; ++r) {
        const auto k = static_cast<std::size_t>(r);
        processed[k] = s6_forward(routes.sequences[k], params.routes[k]);
    }
    const auto merged = scan_merge(processed, routes.maps);
    return layer_norm(merged, params.norm_gamma, params.norm_beta);
}

#define MEDMAMBA_INSTANTIATE_SS2D(T)                                                                               \
    template struct ScanRoutes<T>;                                                                                  \
    template ScanRoutes<T> scan_expand(const Tensor<T>&);                                                           \
    template Tensor<T> scan_merge(const std::array<Tensor<T>, kScanRoutes>&, const RouteMaps&);                      \
    template struct SS2DParams<T>;                                                                                  \
    template Tensor<T> ss2d_forward(const Tensor<T>&, const SS2DParams<T>&);

MEDMAMBA_INSTANTIATE_SS2D(float)
MEDMAMBA_INSTANTIATE_SS2D(double)

} // namespace medmamba
