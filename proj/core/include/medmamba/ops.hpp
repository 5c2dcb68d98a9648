#pragma once

#include "medmamba/tensor.hpp"

#include <array>
#include <cstdint>
#include <span>
#include <vector>

namespace medmamba {

enum class Activation { silu, relu, softplus, sigmoid };

// `automatic` uses the direct loop nest for depthwise kernels and
// patch unrolling plus matrix multiply otherwise.
enum class ConvAlgorithm { automatic, im2col, direct };

struct Conv2dOptions {
    std::array<std::int64_t, 2> stride{1, 1};
    std::array<std::int64_t, 2> padding{0, 0};
    std::int64_t groups = 1;
    ConvAlgorithm algorithm = ConvAlgorithm::automatic;
};

enum class NormMode { train, eval };

/// Running statistics of a batch-norm layer.
template <typename T>
struct BatchNormStats {
    Tensor<T> running_mean;  // [C]
    Tensor<T> running_var;   // [C], unbiased batch variance
    Tensor<T> batches_seen;  // [1], count of train-mode updates

    static BatchNormStats create(std::int64_t channels);
};

// Elementwise, identical shapes.
template <typename T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> scale(const Tensor<T>& a, T factor);
template <typename T> Tensor<T> neg(const Tensor<T>& a);
template <typename T> Tensor<T> exp(const Tensor<T>& a);

// Reductions to a [1] tensor.
template <typename T> Tensor<T> sum(const Tensor<T>& a);
template <typename T> Tensor<T> mean(const Tensor<T>& a);

template <typename T> Tensor<T> activation(Activation kind, const Tensor<T>& x);
template <typename T> Tensor<T> silu(const Tensor<T>& x) { return activation(Activation::silu, x); }
template <typename T> Tensor<T> relu(const Tensor<T>& x) { return activation(Activation::relu, x); }
template <typename T> Tensor<T> softplus(const Tensor<T>& x) { return activation(Activation::softplus, x); }
template <typename T> Tensor<T> sigmoid(const Tensor<T>& x) { return activation(Activation::sigmoid, x); }

// Layout.
template <typename T> Tensor<T> reshape(const Tensor<T>& x, Shape shape);
template <typename T> Tensor<T> permute(const Tensor<T>& x, std::vector<int> axes);
template <typename T> Tensor<T> concat(const std::vector<Tensor<T>>& parts, int axis);
template <typename T> Tensor<T> narrow(const Tensor<T>& x, int axis, std::int64_t start, std::int64_t length);
// out[..., i, ...] = x[..., index[i], ...] along `axis`.
template <typename T>
Tensor<T> index_select(const Tensor<T>& x, int axis, std::span<const std::int64_t> index);
// Zero padding on the bottom and right of an NCHW map.
template <typename T> Tensor<T> pad2d(const Tensor<T>& x, std::int64_t bottom, std::int64_t right);
// [N,C,H,W] -> [N,4C,H/2,W/2]; channel blocks ordered (0,0),(1,0),(0,1),(1,1) by (dy,dx).
template <typename T> Tensor<T> space_to_depth2x2(const Tensor<T>& x);

// y = x W^T + b over the last axis. `bias` may be undefined.
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias = {});

// Cross-correlation with zero padding. `bias` may be undefined.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias = {},
                 const Conv2dOptions& options = {});

// Normalizes over the last axis.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps = T(1e-5));

template <typename T>
Tensor<T> batch_norm2d(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                       BatchNormStats<T>& stats, NormMode mode, T momentum = T(0.1), T eps = T(1e-5));

// [N,C,H,W] -> [N,C]
template <typename T> Tensor<T> global_avg_pool(const Tensor<T>& x);

// Row softmax over the last axis; untracked.
template <typename T> Tensor<T> softmax(const Tensor<T>& x);

/// While alive, folds the sign pattern of every relu input evaluated on this
/// thread into a fingerprint. Two forward passes with equal fingerprints
/// took the same side of every relu kink.
class KinkProbe {
public:
    KinkProbe();
    ~KinkProbe();
    KinkProbe(const KinkProbe&) = delete;
    KinkProbe& operator=(const KinkProbe&) = delete;

    std::uint64_t fingerprint() const { return hash_; }

private:
    friend struct KinkProbeAccess;
    std::uint64_t hash_ = 1469598103934665603ull;
    KinkProbe* previous_;
};

namespace detail {

// C = alpha * op(A) * op(B) + beta * C, row-major.
template <typename T>
void gemm(bool trans_a, bool trans_b, std::int64_t m, std::int64_t n, std::int64_t k, T alpha, const T* a,
          std::int64_t lda, const T* b, std::int64_t ldb, T beta, T* c, std::int64_t ldc);

} // namespace detail

} // namespace medmamba
