#pragma once

#include "medmamba/ssm.hpp"
#include "medmamba/tensor.hpp"

#include <array>
#include <cstdint>
#include <string>
#include <vector>

namespace medmamba {

// Route order: row-major, column-major, row-major reversed, column-major reversed.
enum class ScanRoute { row_forward = 0, col_forward = 1, row_reverse = 2, col_reverse = 3 };

inline constexpr int kScanRoutes = 4;

/// Index maps of the four scan routes over an H x W grid.
struct RouteMaps {
    std::int64_t height = 0;
    std::int64_t width = 0;
    // order[r][s]: spatial (row-major) index visited at sequence position s.
    std::array<std::vector<std::int64_t>, kScanRoutes> order;
    // inverse[r][p]: sequence position of spatial index p.
    std::array<std::vector<std::int64_t>, kScanRoutes> inverse;

    static RouteMaps build(std::int64_t height, std::int64_t width);
    std::int64_t length() const { return height * width; }
};

/// The four directional sequences of one feature map.
template <typename T>
struct ScanRoutes {
    RouteMaps maps;
    std::array<Tensor<T>, kScanRoutes> sequences;  // each [B, H*W, d]
};

/// Unfolds a channel-last map [B, H, W, d] (or [H, W, d]) along the four routes.
template <typename T>
ScanRoutes<T> scan_expand(const Tensor<T>& x);

/// Scatters each processed sequence back to its spatial position and sums
/// the four maps. Returns [B, H, W, d].
template <typename T>
Tensor<T> scan_merge(const std::array<Tensor<T>, kScanRoutes>& sequences, const RouteMaps& maps);

template <typename T>
struct SS2DParams {
    std::array<SelectiveSSMParams<T>, kScanRoutes> routes;
    Tensor<T> norm_gamma;  // [d]
    Tensor<T> norm_beta;   // [d]

    static SS2DParams init(std::int64_t channels, std::int64_t state_size, Rng& rng);
    std::vector<std::pair<std::string, Tensor<T>*>> named();
};

/// Expand, one S6 per route, merge, then the shared layer norm over channels.
/// x: [B, H, W, d] channel-last; output has the same extent.
template <typename T>
Tensor<T> ss2d_forward(const Tensor<T>& x, const SS2DParams<T>& params);

} // namespace medmamba
