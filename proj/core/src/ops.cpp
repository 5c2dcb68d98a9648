#include "medmamba/ops.hpp"

#include "medmamba/errors.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

namespace medmamba {

struct KinkProbeAccess {
    template <typename T>
    static void record(KinkProbe& p, std::span<const T> values) {
        for (const T v : values) {
            p.hash_ = (p.hash_ ^ (v > T(0) ? 0x9Bu : 0x31u)) * 1099511628211ull;
        }
    }
};

namespace {

template <typename T>
using ImplPtr = std::shared_ptr<TensorImpl<T>>;
template <typename T>
using Inputs = std::vector<ImplPtr<T>>;

// Grad accumulator of an input, or empty when the input is not tracked.
template <typename T>
std::span<T> grad_of(const ImplPtr<T>& p) {
    return p->requires_grad ? p->grad_span() : std::span<T>{};
}

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw DimensionError(std::string(op) + ": shape " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
}

thread_local KinkProbe* t_kink_probe = nullptr;

int normalize_axis(int axis, int rank, const char* op) {
    if (axis < 0) {
        axis += rank;
    }
    if (axis < 0 || axis >= rank) {
        throw DimensionError(std::string(op) + ": axis out of range");
    }
    return axis;
}

// Splits a shape around `axis` into (outer, extent, inner) element counts.
struct AxisSplit {
    std::int64_t outer = 1;
    std::int64_t extent = 1;
    std::int64_t inner = 1;
};

AxisSplit split_at(const Shape& s, int axis) {
    AxisSplit r;
    for (int i = 0; i < axis; ++i) {
        r.outer *= s[static_cast<std::size_t>(i)];
    }
    r.extent = s[static_cast<std::size_t>(axis)];
    for (std::size_t i = static_cast<std::size_t>(axis) + 1; i < s.size(); ++i) {
        r.inner *= s[i];
    }
    return r;
}

template <typename T>
T stable_sigmoid(T x) {
    if (x >= T(0)) {
        return T(1) / (T(1) + std::exp(-x));
    }
    const T e = std::exp(x);
    return e / (T(1) + e);
}

template <typename T>
T stable_softplus(T x) {
    return std::max(x, T(0)) + std::log1p(std::exp(-std::abs(x)));
}

} // namespace

template <typename T>
BatchNormStats<T> BatchNormStats<T>::create(std::int64_t channels) {
    return {Tensor<T>::zeros({channels}), Tensor<T>::full({channels}, T(1)), Tensor<T>::zeros({1})};
}

// ---------------------------------------------------------------------------
// elementwise

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    require_same_shape(a, b, "add");
    std::vector<T> out(a.numel());
    const auto x = a.data();
    const auto y = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = x[i] + y[i];
    }
    return detail::make_result<T>(a.shape(), std::move(out), "add", {a, b},
                                  [](std::span<const T> g, Inputs<T>& in) {
                                      for (int k = 0; k < 2; ++k) {
                                          if (auto gi = grad_of(in[static_cast<std::size_t>(k)]); !gi.empty()) {
                                              for (std::size_t i = 0; i < g.size(); ++i) {
                                                  gi[i] += g[i];
                                              }
                                          }
                                      }
                                  });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    require_same_shape(a, b, "sub");
    std::vector<T> out(a.numel());
    const auto x = a.data();
    const auto y = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = x[i] - y[i];
    }
    return detail::make_result<T>(a.shape(), std::move(out), "sub", {a, b},
                                  [](std::span<const T> g, Inputs<T>& in) {
                                      if (auto ga = grad_of(in[0]); !ga.empty()) {
                                          for (std::size_t i = 0; i < g.size(); ++i) {
                                              ga[i] += g[i];
                                          }
                                      }
                                      if (auto gb = grad_of(in[1]); !gb.empty()) {
                                          for (std::size_t i = 0; i < g.size(); ++i) {
                                              gb[i] -= g[i];
                                          }
                                      }
                                  });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    require_same_shape(a, b, "mul");
    std::vector<T> out(a.numel());
    const auto x = a.data();
    const auto y = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = x[i] * y[i];
    }
    return detail::make_result<T>(a.shape(), std::move(out), "mul", {a, b},
                                  [](std::span<const T> g, Inputs<T>& in) {
                                      const auto& x = in[0]->data;
                                      const auto& y = in[1]->data;
                                      if (auto ga = grad_of(in[0]); !ga.empty()) {
                                          for (std::size_t i = 0; i < g.size(); ++i) {
                                              ga[i] += g[i] * y[i];
                                          }
                                      }
                                      if (auto gb = grad_of(in[1]); !gb.empty()) {
                                          for (std::size_t i = 0; i < g.size(); ++i) {
                                              gb[i] += g[i] * x[i];
                                          }
                                      }
                                  });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
    std::vector<T> out(a.data().begin(), a.data().end());
    for (auto& v : out) {
        v *= factor;
    }
    return detail::make_result<T>(a.shape(), std::move(out), "scale", {a},
                                  [factor](std::span<const T> g, Inputs<T>& in) {
                                      auto ga = grad_of(in[0]);
                                      for (std::size_t i = 0; i < ga.size(); ++i) {
                                          ga[i] += g[i] * factor;
                                      }
                                  });
}

template <typename T>
Tensor<T> neg(const Tensor<T>& a) {
    return scale(a, T(-1));
}

template <typename T>
Tensor<T> exp(const Tensor<T>& a) {
    std::vector<T> out(a.numel());
    const auto x = a.data();
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = std::exp(x[i]);
    }
    return detail::make_result<T>(a.shape(), std::move(out), "exp", {a},
                                  [](std::span<const T> g, Inputs<T>& in) {
                                      auto ga = grad_of(in[0]);
                                      const auto& x = in[0]->data;
                                      for (std::size_t i = 0; i < ga.size(); ++i) {
                                          ga[i] += g[i] * std::exp(x[i]);
                                      }
                                  });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
    T s = 0;
    for (const T v : a.data()) {
        s += v;
    }
    return detail::make_result<T>({1}, {s}, "sum", {a}, [](std::span<const T> g, Inputs<T>& in) {
        for (auto& v : grad_of(in[0])) {
            v += g[0];
        }
    });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
    T s = 0;
    for (const T v : a.data()) {
        s += v;
    }
    const T n = static_cast<T>(a.numel());
    return detail::make_result<T>({1}, {s / n}, "mean", {a}, [n](std::span<const T> g, Inputs<T>& in) {
        for (auto& v : grad_of(in[0])) {
            v += g[0] / n;
        }
    });
}

KinkProbe::KinkProbe() : previous_(t_kink_probe) { t_kink_probe = this; }

KinkProbe::~KinkProbe() { t_kink_probe = previous_; }

template <typename T>
Tensor<T> activation(Activation kind, const Tensor<T>& x) {
    std::vector<T> out(x.numel());
    const auto v = x.data();
    switch (kind) {
    case Activation::silu:
        for (std::size_t i = 0; i < out.size(); ++i) {
            out[i] = v[i] * stable_sigmoid(v[i]);
        }
        break;
    case Activation::relu:
        for (std::size_t i = 0; i < out.size(); ++i) {
            out[i] = v[i] > T(0) ? v[i] : T(0);
        }
        if (t_kink_probe) {
            KinkProbeAccess::record(*t_kink_probe, v);
        }
        break;
    case Activation::softplus:
        for (std::size_t i = 0; i < out.size(); ++i) {
            out[i] = stable_softplus(v[i]);
        }
        break;
    case Activation::sigmoid:
        for (std::size_t i = 0; i < out.size(); ++i) {
            out[i] = stable_sigmoid(v[i]);
        }
        break;
    }
    static constexpr const char* names[] = {"silu", "relu", "softplus", "sigmoid"};
    return detail::make_result<T>(x.shape(), std::move(out), names[static_cast<int>(kind)], {x},
                                  [kind](std::span<const T> g, Inputs<T>& in) {
                                      auto gx = grad_of(in[0]);
                                      const auto& v = in[0]->data;
                                      for (std::size_t i = 0; i < gx.size(); ++i) {
                                          T d = 0;
                                          switch (kind) {
                                          case Activation::silu: {
                                              const T s = stable_sigmoid(v[i]);
                                              d = s * (T(1) + v[i] * (T(1) - s));
                                              break;
                                          }
                                          case Activation::relu:
                                              d = v[i] > T(0) ? T(1) : T(0);
                                              break;
                                          case Activation::softplus:
                                              d = stable_sigmoid(v[i]);
                                              break;
                                          case Activation::sigmoid: {
                                              const T s = stable_sigmoid(v[i]);
                                              d = s * (T(1) - s);
                                              break;
                                          }
                                          }
                                          gx[i] += g[i] * d;
                                      }
                                  });
}

// ---------------------------------------------------------------------------
// layout

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
    if (shape_numel(shape) != static_cast<std::int64_t>(x.numel())) {
        throw DimensionError("reshape: " + shape_str(x.shape()) + " to " + shape_str(shape));
    }
    std::vector<T> out(x.data().begin(), x.data().end());
    return detail::make_result<T>(std::move(shape), std::move(out), "reshape", {x},
                                  [](std::span<const T> g, Inputs<T>& in) {
                                      auto gx = grad_of(in[0]);
                                      for (std::size_t i = 0; i < gx.size(); ++i) {
                                          gx[i] += g[i];
                                      }
                                  });
}

template <typename T>
Tensor<T> permute(const Tensor<T>& x, std::vector<int> axes) {
    const Shape& s = x.shape();
    const std::size_t r = s.size();
    if (axes.size() != r) {
        throw DimensionError("permute: axis list does not match rank of " + shape_str(s));
    }
    std::vector<bool> seen(r, false);
    for (int a : axes) {
        if (a < 0 || static_cast<std::size_t>(a) >= r || seen[static_cast<std::size_t>(a)]) {
            throw DimensionError("permute: invalid axis permutation for " + shape_str(s));
        }
        seen[static_cast<std::size_t>(a)] = true;
    }
    std::vector<std::int64_t> in_stride(r, 1);
    for (std::size_t i = r; i-- > 1;) {
        in_stride[i - 1] = in_stride[i] * s[i];
    }
    Shape out_shape(r);
    std::vector<std::int64_t> step(r);
    for (std::size_t i = 0; i < r; ++i) {
        out_shape[i] = s[static_cast<std::size_t>(axes[i])];
        step[i] = in_stride[static_cast<std::size_t>(axes[i])];
    }
    auto source = std::make_shared<std::vector<std::int64_t>>(x.numel());
    std::vector<std::int64_t> counter(r, 0);
    std::int64_t offset = 0;
    for (std::size_t flat = 0; flat < source->size(); ++flat) {
        (*source)[flat] = offset;
        for (std::size_t d = r; d-- > 0;) {
            offset += step[d];
            if (++counter[d] < out_shape[d]) {
                break;
            }
            offset -= step[d] * out_shape[d];
            counter[d] = 0;
        }
    }
    std::vector<T> out(x.numel());
    const auto v = x.data();
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = v[static_cast<std::size_t>((*source)[i])];
    }
    return detail::make_result<T>(std::move(out_shape), std::move(out), "permute", {x},
                                  [source](std::span<const T> g, Inputs<T>& in) {
                                      auto gx = grad_of(in[0]);
                                      if (gx.empty()) {
                                          return;
                                      }
                                      for (std::size_t i = 0; i < g.size(); ++i) {
                                          gx[static_cast<std::size_t>((*source)[i])] += g[i];
                                      }
                                  });
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, int axis) {
    if (parts.empty()) {
        throw DimensionError("concat: no inputs");
    }
    const Shape& first = parts.front().shape();
    axis = normalize_axis(axis, static_cast<int>(first.size()), "concat");
    Shape out_shape = first;
    out_shape[static_cast<std::size_t>(axis)] = 0;
    std::vector<std::int64_t> extents;
    for (const auto& p : parts) {
        const Shape& s = p.shape();
        bool ok = s.size() == first.size();
        for (std::size_t i = 0; ok && i < s.size(); ++i) {
            ok = static_cast<int>(i) == axis || s[i] == first[i];
        }
        if (!ok) {
            throw DimensionError("concat: " + shape_str(first) + " vs " + shape_str(s));
        }
        extents.push_back(s[static_cast<std::size_t>(axis)]);
        out_shape[static_cast<std::size_t>(axis)] += s[static_cast<std::size_t>(axis)];
    }
    const AxisSplit os = split_at(out_shape, axis);
    std::vector<T> out(static_cast<std::size_t>(shape_numel(out_shape)));
    std::int64_t base = 0;
    for (std::size_t p = 0; p < parts.size(); ++p) {
        const auto v = parts[p].data();
        const std::int64_t block = extents[p] * os.inner;
        for (std::int64_t o = 0; o < os.outer; ++o) {
            std::copy_n(v.begin() + o * block, block, out.begin() + o * os.extent * os.inner + base);
        }
        base += block;
    }
    return detail::make_result<T>(std::move(out_shape), std::move(out), "concat", parts,
                                  [os, extents](std::span<const T> g, Inputs<T>& in) {
                                      std::int64_t base = 0;
                                      for (std::size_t p = 0; p < in.size(); ++p) {
                                          const std::int64_t block = extents[p] * os.inner;
                                          if (auto gp = grad_of(in[p]); !gp.empty()) {
                                              for (std::int64_t o = 0; o < os.outer; ++o) {
                                                  const T* src = g.data() + o * os.extent * os.inner + base;
                                                  T* dst = gp.data() + o * block;
                                                  for (std::int64_t i = 0; i < block; ++i) {
                                                      dst[i] += src[i];
                                                  }
                                              }
                                          }
                                          base += block;
                                      }
                                  });
}

template <typename T>
Tensor<T> narrow(const Tensor<T>& x, int axis, std::int64_t start, std::int64_t length) {
    axis = normalize_axis(axis, x.rank(), "narrow");
    const AxisSplit s = split_at(x.shape(), axis);
    if (start < 0 || length <= 0 || start + length > s.extent) {
        throw DimensionError("narrow: range [" + std::to_string(start) + ", " + std::to_string(start + length) +
                             ") outside " + shape_str(x.shape()));
    }
    Shape out_shape = x.shape();
    out_shape[static_cast<std::size_t>(axis)] = length;
    std::vector<T> out(static_cast<std::size_t>(s.outer * length * s.inner));
    const auto v = x.data();
    for (std::int64_t o = 0; o < s.outer; ++o) {
        std::copy_n(v.begin() + (o * s.extent + start) * s.inner, length * s.inner,
                    out.begin() + o * length * s.inner);
    }
    return detail::make_result<T>(std::move(out_shape), std::move(out), "narrow", {x},
                                  [s, start, length](std::span<const T> g, Inputs<T>& in) {
                                      auto gx = grad_of(in[0]);
                                      if (gx.empty()) {
                                          return;
                                      }
                                      for (std::int64_t o = 0; o < s.outer; ++o) {
                                          const T* src = g.data() + o * length * s.inner;
                                          T* dst = gx.data() + (o * s.extent + start) * s.inner;
                                          for (std::int64_t i = 0; i < length * s.inner; ++i) {
                                              dst[i] += src[i];
                                          }
                                      }
                                  });
}

template <typename T>
Tensor<T> index_select(const Tensor<T>& x, int axis, std::span<const std::int64_t> index) {
    axis = normalize_axis(axis, x.rank(), "index_select");
    const AxisSplit s = split_at(x.shape(), axis);
    for (auto i : index) {
        if (i < 0 || i >= s.extent) {
            throw DimensionError("index_select: index " + std::to_string(i) + " outside " + shape_str(x.shape()));
        }
    }
    const auto n = static_cast<std::int64_t>(index.size());
    if (n == 0) {
        throw DimensionError("index_select: empty index");
    }
    Shape out_shape = x.shape();
    out_shape[static_cast<std::size_t>(axis)] = n;
    std::vector<T> out(static_cast<std::size_t>(s.outer * n * s.inner));
    const auto v = x.data();
    for (std::int64_t o = 0; o < s.outer; ++o) {
        for (std::int64_t i = 0; i < n; ++i) {
            std::copy_n(v.begin() + (o * s.extent + index[static_cast<std::size_t>(i)]) * s.inner, s.inner,
                        out.begin() + (o * n + i) * s.inner);
        }
    }
    auto idx = std::make_shared<std::vector<std::int64_t>>(index.begin(), index.end());
    return detail::make_result<T>(std::move(out_shape), std::move(out), "index_select", {x},
                                  [s, idx](std::span<const T> g, Inputs<T>& in) {
                                      auto gx = grad_of(in[0]);
                                      if (gx.empty()) {
                                          return;
                                      }
                                      const auto n = static_cast<std::int64_t>(idx->size());
                                      for (std::int64_t o = 0; o < s.outer; ++o) {
                                          for (std::int64_t i = 0; i < n; ++i) {
                                              const T* src = g.data() + (o * n + i) * s.inner;
                                              T* dst = gx.data() +
                                                       (o * s.extent + (*idx)[static_cast<std::size_t>(i)]) * s.inner;
                                              for (std::int64_t j = 0; j < s.inner; ++j) {
                                                  dst[j] += src[j];
                                              }
                                          }
                                      }
                                  });
}

template <typename T>
Tensor<T> pad2d(const Tensor<T>& x, std::int64_t bottom, std::int64_t right) {
    if (x.rank() != 4 || bottom < 0 || right < 0) {
        throw DimensionError("pad2d: expects NCHW input and non-negative padding, got " + shape_str(x.shape()));
    }
    const auto nc = x.dim(0) * x.dim(1);
    const auto h = x.dim(2);
    const auto w = x.dim(3);
    const auto ho = h + bottom;
    const auto wo = w + right;
    std::vector<T> out(static_cast<std::size_t>(nc * ho * wo), T(0));
    const auto v = x.data();
    for (std::int64_t p = 0; p < nc; ++p) {
        for (std::int64_t y = 0; y < h; ++y) {
            std::copy_n(v.begin() + (p * h + y) * w, w, out.begin() + (p * ho + y) * wo);
        }
    }
    return detail::make_result<T>({x.dim(0), x.dim(1), ho, wo}, std::move(out), "pad2d", {x},
                                  [nc, h, w, ho, wo](std::span<const T> g, Inputs<T>& in) {
                                      auto gx = grad_of(in[0]);
                                      if (gx.empty()) {
                                          return;
                                      }
                                      for (std::int64_t p = 0; p < nc; ++p) {
                                          for (std::int64_t y = 0; y < h; ++y) {
                                              for (std::int64_t c = 0; c < w; ++c) {
                                                  gx[static_cast<std::size_t>((p * h + y) * w + c)] +=
                                                      g[static_cast<std::size_t>((p * ho + y) * wo + c)];
                                              }
                                          }
                                      }
                                  });
}

template <typename T>
Tensor<T> space_to_depth2x2(const Tensor<T>& x) {
    if (x.rank() != 4) {
        throw DimensionError("space_to_depth2x2: expects NCHW input, got " + shape_str(x.shape()));
    }
    const auto n = x.dim(0);
    const auto c = x.dim(1);
    const auto h = x.dim(2);
    const auto w = x.dim(3);
    if (h % 2 != 0 || w % 2 != 0) {
        throw ConfigError("space_to_depth2x2: odd spatial extent in " + shape_str(x.shape()));
    }
    const auto ho = h / 2;
    const auto wo = w / 2;
    // source index of every output element
    auto source = std::make_shared<std::vector<std::int64_t>>(x.numel());
    std::size_t k = 0;
    for (std::int64_t b = 0; b < n; ++b) {
        for (std::int64_t blk = 0; blk < 4; ++blk) {
            const std::int64_t dy = blk % 2;
            const std::int64_t dx = blk / 2;
            for (std::int64_t ch = 0; ch < c; ++ch) {
                for (std::int64_t y = 0; y < ho; ++y) {
                    for (std::int64_t xx = 0; xx < wo; ++xx) {
                        (*source)[k++] = ((b * c + ch) * h + 2 * y + dy) * w + 2 * xx + dx;
                    }
                }
            }
        }
    }
    std::vector<T> out(x.numel());
    const auto v = x.data();
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = v[static_cast<std::size_t>((*source)[i])];
    }
    return detail::make_result<T>({n, 4 * c, ho, wo}, std::move(out), "space_to_depth2x2", {x},
                                  [source](std::span<const T> g, Inputs<T>& in) {
                                      auto gx = grad_of(in[0]);
                                      if (gx.empty()) {
                                          return;
                                      }
                                      for (std::size_t i = 0; i < g.size(); ++i) {
                                          gx[static_cast<std::size_t>((*source)[i])] += g[i];
                                      }
                                  });
}

// ---------------------------------------------------------------------------
// dense layers

namespace detail {

template <typename T>
void gemm(bool trans_a, bool trans_b, std::int64_t m, std::int64_t n, std::int64_t k, T alpha, const T* a,
          std::int64_t lda, const T* b, std::int64_t ldb, T beta, T* c, std::int64_t ldc) {
    for (std::int64_t i = 0; i < m; ++i) {
        T* row = c + i * ldc;
        if (beta == T(0)) {
            std::fill(row, row + n, T(0));
        } else if (beta != T(1)) {
            for (std::int64_t j = 0; j < n; ++j) {
                row[j] *= beta;
            }
        }
    }
    std::vector<T> bt;
    if (trans_b) {
        // op(B) is [k, n]; materialize it so the inner loop runs contiguously.
        bt.resize(static_cast<std::size_t>(k * n));
        for (std::int64_t j = 0; j < n; ++j) {
            for (std::int64_t p = 0; p < k; ++p) {
                bt[static_cast<std::size_t>(p * n + j)] = b[j * ldb + p];
            }
        }
        b = bt.data();
        ldb = n;
    }
    if (!trans_a) {
        for (std::int64_t i = 0; i < m; ++i) {
            T* row = c + i * ldc;
            const T* arow = a + i * lda;
            for (std::int64_t p = 0; p < k; ++p) {
                const T aip = alpha * arow[p];
                const T* brow = b + p * ldb;
                for (std::int64_t j = 0; j < n; ++j) {
                    row[j] += aip * brow[j];
                }
            }
        }
    } else {
        for (std::int64_t p = 0; p < k; ++p) {
            const T* acol = a + p * lda;
            const T* brow = b + p * ldb;
            for (std::int64_t i = 0; i < m; ++i) {
                const T aip = alpha * acol[i];
                T* row = c + i * ldc;
                for (std::int64_t j = 0; j < n; ++j) {
                    row[j] += aip * brow[j];
                }
            }
        }
    }
}

template void gemm(bool, bool, std::int64_t, std::int64_t, std::int64_t, float, const float*, std::int64_t,
                   const float*, std::int64_t, float, float*, std::int64_t);
template void gemm(bool, bool, std::int64_t, std::int64_t, std::int64_t, double, const double*, std::int64_t,
                   const double*, std::int64_t, double, double*, std::int64_t);

} // namespace detail

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
    if (weight.rank() != 2 || x.rank() < 1 || x.dim(-1) != weight.dim(1)) {
        throw DimensionError("linear: input " + shape_str(x.shape()) + " vs weight " + shape_str(weight.shape()));
    }
    const std::int64_t din = weight.dim(1);
    const std::int64_t dout = weight.dim(0);
    if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != dout)) {
        throw DimensionError("linear: bias " + shape_str(bias.shape()) + " vs weight " + shape_str(weight.shape()));
    }
    const std::int64_t m = static_cast<std::int64_t>(x.numel()) / din;
    Shape out_shape = x.shape();
    out_shape.back() = dout;
    std::vector<T> out(static_cast<std::size_t>(m * dout));
    detail::gemm(false, true, m, dout, din, T(1), x.data().data(), din, weight.data().data(), din, T(0), out.data(),
                 dout);
    if (bias.defined()) {
        const auto b = bias.data();
        for (std::int64_t i = 0; i < m; ++i) {
            for (std::int64_t j = 0; j < dout; ++j) {
                out[static_cast<std::size_t>(i * dout + j)] += b[static_cast<std::size_t>(j)];
            }
        }
    }
    std::vector<Tensor<T>> inputs{x, weight};
    if (bias.defined()) {
        inputs.push_back(bias);
    }
    return detail::make_result<T>(std::move(out_shape), std::move(out), "linear", std::move(inputs),
                                  [m, din, dout](std::span<const T> g, Inputs<T>& in) {
                                      if (auto gx = grad_of(in[0]); !gx.empty()) {
                                          detail::gemm(false, false, m, din, dout, T(1), g.data(), dout,
                                                       in[1]->data.data(), din, T(1), gx.data(), din);
                                      }
                                      if (auto gw = grad_of(in[1]); !gw.empty()) {
                                          detail::gemm(true, false, dout, din, m, T(1), g.data(), dout,
                                                       in[0]->data.data(), din, T(1), gw.data(), din);
                                      }
                                      if (in.size() > 2) {
                                          if (auto gb = grad_of(in[2]); !gb.empty()) {
                                              for (std::int64_t i = 0; i < m; ++i) {
                                                  for (std::int64_t j = 0; j < dout; ++j) {
                                                      gb[static_cast<std::size_t>(j)] +=
                                                          g[static_cast<std::size_t>(i * dout + j)];
                                                  }
                                              }
                                          }
                                      }
                                  });
}

namespace {

struct ConvGeometry {
    std::int64_t n, cin, h, w, cout, kh, kw, sh, sw, ph, pw, groups, ho, wo;
    std::int64_t cin_g() const { return cin / groups; }
    std::int64_t cout_g() const { return cout / groups; }
    std::int64_t kcols() const { return cin_g() * kh * kw; }
    std::int64_t pixels() const { return ho * wo; }
    bool depthwise() const { return groups == cin && cout == cin; }
    bool pointwise() const { return kh == 1 && kw == 1 && sh == 1 && sw == 1 && ph == 0 && pw == 0; }
};

// Unrolls the input patches of one (sample, group) into [kcols, pixels].
template <typename T>
void im2col(const ConvGeometry& c, const T* x, std::int64_t sample, std::int64_t group, T* cols) {
    for (std::int64_t ci = 0; ci < c.cin_g(); ++ci) {
        const T* plane = x + ((sample * c.cin) + group * c.cin_g() + ci) * c.h * c.w;
        for (std::int64_t ky = 0; ky < c.kh; ++ky) {
            for (std::int64_t kx = 0; kx < c.kw; ++kx) {
                T* row = cols + ((ci * c.kh + ky) * c.kw + kx) * c.pixels();
                for (std::int64_t oy = 0; oy < c.ho; ++oy) {
                    const std::int64_t iy = oy * c.sh - c.ph + ky;
                    for (std::int64_t ox = 0; ox < c.wo; ++ox) {
                        const std::int64_t ix = ox * c.sw - c.pw + kx;
                        row[oy * c.wo + ox] =
                            (iy >= 0 && iy < c.h && ix >= 0 && ix < c.w) ? plane[iy * c.w + ix] : T(0);
                    }
                }
            }
        }
    }
}

template <typename T>
void col2im_add(const ConvGeometry& c, const T* cols, std::int64_t sample, std::int64_t group, T* gx) {
    for (std::int64_t ci = 0; ci < c.cin_g(); ++ci) {
        T* plane = gx + ((sample * c.cin) + group * c.cin_g() + ci) * c.h * c.w;
        for (std::int64_t ky = 0; ky < c.kh; ++ky) {
            for (std::int64_t kx = 0; kx < c.kw; ++kx) {
                const T* row = cols + ((ci * c.kh + ky) * c.kw + kx) * c.pixels();
                for (std::int64_t oy = 0; oy < c.ho; ++oy) {
                    const std::int64_t iy = oy * c.sh - c.ph + ky;
                    if (iy < 0 || iy >= c.h) {
                        continue;
                    }
                    for (std::int64_t ox = 0; ox < c.wo; ++ox) {
                        const std::int64_t ix = ox * c.sw - c.pw + kx;
                        if (ix >= 0 && ix < c.w) {
                            plane[iy * c.w + ix] += row[oy * c.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

// Plain loop nest, used for depthwise kernels.
template <typename T>
void conv_direct_forward(const ConvGeometry& c, const T* x, const T* w, T* out) {
    for (std::int64_t b = 0; b < c.n; ++b) {
        for (std::int64_t co = 0; co < c.cout; ++co) {
            const std::int64_t g = co / c.cout_g();
            T* plane = out + (b * c.cout + co) * c.pixels();
            for (std::int64_t ci = 0; ci < c.cin_g(); ++ci) {
                const T* in = x + (b * c.cin + g * c.cin_g() + ci) * c.h * c.w;
                const T* ker = w + (co * c.cin_g() + ci) * c.kh * c.kw;
                for (std::int64_t ky = 0; ky < c.kh; ++ky) {
                    for (std::int64_t kx = 0; kx < c.kw; ++kx) {
                        const T wv = ker[ky * c.kw + kx];
                        for (std::int64_t oy = 0; oy < c.ho; ++oy) {
                            const std::int64_t iy = oy * c.sh - c.ph + ky;
                            if (iy < 0 || iy >= c.h) {
                                continue;
                            }
                            for (std::int64_t ox = 0; ox < c.wo; ++ox) {
                                const std::int64_t ix = ox * c.sw - c.pw + kx;
                                if (ix >= 0 && ix < c.w) {
                                    plane[oy * c.wo + ox] += wv * in[iy * c.w + ix];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

template <typename T>
void conv_direct_backward(const ConvGeometry& c, const T* x, const T* w, const T* g, T* gx, T* gw) {
    for (std::int64_t b = 0; b < c.n; ++b) {
        for (std::int64_t co = 0; co < c.cout; ++co) {
            const std::int64_t grp = co / c.cout_g();
            const T* gplane = g + (b * c.cout + co) * c.pixels();
            for (std::int64_t ci = 0; ci < c.cin_g(); ++ci) {
                const std::int64_t plane_off = (b * c.cin + grp * c.cin_g() + ci) * c.h * c.w;
                const std::int64_t ker_off = (co * c.cin_g() + ci) * c.kh * c.kw;
                for (std::int64_t ky = 0; ky < c.kh; ++ky) {
                    for (std::int64_t kx = 0; kx < c.kw; ++kx) {
                        const T wv = w[ker_off + ky * c.kw + kx];
                        T acc = 0;
                        for (std::int64_t oy = 0; oy < c.ho; ++oy) {
                            const std::int64_t iy = oy * c.sh - c.ph + ky;
                            if (iy < 0 || iy >= c.h) {
                                continue;
                            }
                            for (std::int64_t ox = 0; ox < c.wo; ++ox) {
                                const std::int64_t ix = ox * c.sw - c.pw + kx;
                                if (ix >= 0 && ix < c.w) {
                                    const T gv = gplane[oy * c.wo + ox];
                                    acc += gv * x[plane_off + iy * c.w + ix];
                                    if (gx) {
                                        gx[plane_off + iy * c.w + ix] += gv * wv;
                                    }
                                }
                            }
                        }
                        if (gw) {
                            gw[ker_off + ky * c.kw + kx] += acc;
                        }
                    }
                }
            }
        }
    }
}

} // namespace

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias, const Conv2dOptions& options) {
    if (x.rank() != 4 || weight.rank() != 4) {
        throw DimensionError("conv2d: input " + shape_str(x.shape()) + " vs weight " + shape_str(weight.shape()));
    }
    ConvGeometry c{};
    c.n = x.dim(0);
    c.cin = x.dim(1);
    c.h = x.dim(2);
    c.w = x.dim(3);
    c.cout = weight.dim(0);
    c.kh = weight.dim(2);
    c.kw = weight.dim(3);
    c.sh = options.stride[0];
    c.sw = options.stride[1];
    c.ph = options.padding[0];
    c.pw = options.padding[1];
    c.groups = options.groups;
    if (c.groups <= 0 || c.cin % c.groups != 0 || c.cout % c.groups != 0) {
        throw ConfigError("conv2d: groups=" + std::to_string(c.groups) + " does not divide channels (in " +
                          std::to_string(c.cin) + ", out " + std::to_string(c.cout) + ")");
    }
    if (c.sh <= 0 || c.sw <= 0 || c.ph < 0 || c.pw < 0) {
        throw ConfigError("conv2d: stride must be positive and padding non-negative");
    }
    if (weight.dim(1) != c.cin_g() || c.h + 2 * c.ph < c.kh || c.w + 2 * c.pw < c.kw) {
        throw DimensionError("conv2d: input " + shape_str(x.shape()) + " vs weight " + shape_str(weight.shape()));
    }
    if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != c.cout)) {
        throw DimensionError("conv2d: bias " + shape_str(bias.shape()) + " vs weight " + shape_str(weight.shape()));
    }
    c.ho = (c.h + 2 * c.ph - c.kh) / c.sh + 1;
    c.wo = (c.w + 2 * c.pw - c.kw) / c.sw + 1;

    const bool direct = options.algorithm == ConvAlgorithm::direct ||
                        (options.algorithm == ConvAlgorithm::automatic && c.depthwise());
    std::vector<T> out(static_cast<std::size_t>(c.n * c.cout * c.pixels()), T(0));
    const T* xv = x.data().data();
    const T* wv = weight.data().data();
    if (direct) {
        conv_direct_forward(c, xv, wv, out.data());
    } else {
        std::vector<T> cols(c.pointwise() ? 0 : static_cast<std::size_t>(c.kcols() * c.pixels()));
        for (std::int64_t b = 0; b < c.n; ++b) {
            for (std::int64_t g = 0; g < c.groups; ++g) {
                const T* src = nullptr;
                if (c.pointwise()) {
                    src = xv + (b * c.cin + g * c.cin_g()) * c.pixels();
                } else {
                    im2col(c, xv, b, g, cols.data());
                    src = cols.data();
                }
                detail::gemm(false, false, c.cout_g(), c.pixels(), c.kcols(), T(1), wv + g * c.cout_g() * c.kcols(),
                             c.kcols(), src, c.pixels(), T(0), out.data() + (b * c.cout + g * c.cout_g()) * c.pixels(),
                             c.pixels());
            }
        }
    }
    if (bias.defined()) {
        const auto bv = bias.data();
        for (std::int64_t b = 0; b < c.n; ++b) {
            for (std::int64_t co = 0; co < c.cout; ++co) {
                T* plane = out.data() + (b * c.cout + co) * c.pixels();
                for (std::int64_t p = 0; p < c.pixels(); ++p) {
                    plane[p] += bv[static_cast<std::size_t>(co)];
                }
            }
        }
    }
    std::vector<Tensor<T>> inputs{x, weight};
    if (bias.defined()) {
        inputs.push_back(bias);
    }
    return detail::make_result<T>(
        {c.n, c.cout, c.ho, c.wo}, std::move(out), "conv2d", std::move(inputs),
        [c, direct](std::span<const T> g, Inputs<T>& in) {
            auto gx = grad_of(in[0]);
            auto gw = grad_of(in[1]);
            const T* xv = in[0]->data.data();
            const T* wv = in[1]->data.data();
            if (direct) {
                if (!gx.empty() || !gw.empty()) {
                    conv_direct_backward(c, xv, wv, g.data(), gx.empty() ? nullptr : gx.data(),
                                         gw.empty() ? nullptr : gw.data());
                }
            } else if (!gx.empty() || !gw.empty()) {
                std::vector<T> cols(static_cast<std::size_t>(c.kcols() * c.pixels()));
                for (std::int64_t b = 0; b < c.n; ++b) {
                    for (std::int64_t grp = 0; grp < c.groups; ++grp) {
                        const T* gout = g.data() + (b * c.cout + grp * c.cout_g()) * c.pixels();
                        if (!gw.empty()) {
                            const T* src = nullptr;
                            if (c.pointwise()) {
                                src = xv + (b * c.cin + grp * c.cin_g()) * c.pixels();
                            } else {
                                im2col(c, xv, b, grp, cols.data());
                                src = cols.data();
                            }
                            detail::gemm(false, true, c.cout_g(), c.kcols(), c.pixels(), T(1), gout, c.pixels(), src,
                                         c.pixels(), T(1), gw.data() + grp * c.cout_g() * c.kcols(), c.kcols());
                        }
                        if (!gx.empty()) {
                            if (c.pointwise()) {
                                detail::gemm(true, false, c.kcols(), c.pixels(), c.cout_g(), T(1),
                                             wv + grp * c.cout_g() * c.kcols(), c.kcols(), gout, c.pixels(), T(1),
                                             gx.data() + (b * c.cin + grp * c.cin_g()) * c.pixels(), c.pixels());
                            } else {
                                detail::gemm(true, false, c.kcols(), c.pixels(), c.cout_g(), T(1),
                                             wv + grp * c.cout_g() * c.kcols(), c.kcols(), gout, c.pixels(), T(0),
                                             cols.data(), c.pixels());
                                col2im_add(c, cols.data(), b, grp, gx.data());
                            }
                        }
                    }
                }
            }
            if (in.size() > 2) {
                if (auto gb = grad_of(in[2]); !gb.empty()) {
                    for (std::int64_t b = 0; b < c.n; ++b) {
                        for (std::int64_t co = 0; co < c.cout; ++co) {
                            const T* plane = g.data() + (b * c.cout + co) * c.pixels();
                            T acc = 0;
                            for (std::int64_t p = 0; p < c.pixels(); ++p) {
                                acc += plane[p];
                            }
                            gb[static_cast<std::size_t>(co)] += acc;
                        }
                    }
                }
            }
        });
}

// ---------------------------------------------------------------------------
// normalization and pooling

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps) {
    if (x.rank() < 1) {
        throw DimensionError("layer_norm: scalar input");
    }
    const std::int64_t d = x.dim(-1);
    if (gamma.shape() != Shape{d} || beta.shape() != Shape{d}) {
        throw DimensionError("layer_norm: input " + shape_str(x.shape()) + " vs gamma " + shape_str(gamma.shape()) +
                             " / beta " + shape_str(beta.shape()));
    }
    if (!(eps > T(0))) {
        throw DomainError("layer_norm: eps must be positive");
    }
    const std::int64_t rows = static_cast<std::int64_t>(x.numel()) / d;
    auto xhat = std::make_shared<std::vector<T>>(x.numel());
    auto rstd = std::make_shared<std::vector<T>>(static_cast<std::size_t>(rows));
    std::vector<T> out(x.numel());
    const auto v = x.data();
    const auto gv = gamma.data();
    const auto bv = beta.data();
    for (std::int64_t r = 0; r < rows; ++r) {
        const T* row = v.data() + r * d;
        T mu = 0;
        for (std::int64_t j = 0; j < d; ++j) {
            mu += row[j];
        }
        mu /= static_cast<T>(d);
        T var = 0;
        for (std::int64_t j = 0; j < d; ++j) {
            var += (row[j] - mu) * (row[j] - mu);
        }
        var /= static_cast<T>(d);
        const T rs = T(1) / std::sqrt(var + eps);
        (*rstd)[static_cast<std::size_t>(r)] = rs;
        for (std::int64_t j = 0; j < d; ++j) {
            const auto idx = static_cast<std::size_t>(r * d + j);
            (*xhat)[idx] = (row[j] - mu) * rs;
            out[idx] = (*xhat)[idx] * gv[static_cast<std::size_t>(j)] + bv[static_cast<std::size_t>(j)];
        }
    }
    return detail::make_result<T>(
        x.shape(), std::move(out), "layer_norm", {x, gamma, beta},
        [rows, d, xhat, rstd](std::span<const T> g, Inputs<T>& in) {
            auto gx = grad_of(in[0]);
            auto gg = grad_of(in[1]);
            auto gb = grad_of(in[2]);
            const auto& gamma = in[1]->data;
            std::vector<T> dxhat(static_cast<std::size_t>(d));
            for (std::int64_t r = 0; r < rows; ++r) {
                const T* grow = g.data() + r * d;
                const T* xh = xhat->data() + r * d;
                if (!gg.empty() || !gb.empty()) {
                    for (std::int64_t j = 0; j < d; ++j) {
                        if (!gg.empty()) {
                            gg[static_cast<std::size_t>(j)] += grow[j] * xh[j];
                        }
                        if (!gb.empty()) {
                            gb[static_cast<std::size_t>(j)] += grow[j];
                        }
                    }
                }
                if (gx.empty()) {
                    continue;
                }
                T mean_dxhat = 0;
                T mean_dxhat_xhat = 0;
                for (std::int64_t j = 0; j < d; ++j) {
                    dxhat[static_cast<std::size_t>(j)] = grow[j] * gamma[static_cast<std::size_t>(j)];
                    mean_dxhat += dxhat[static_cast<std::size_t>(j)];
                    mean_dxhat_xhat += dxhat[static_cast<std::size_t>(j)] * xh[j];
                }
                mean_dxhat /= static_cast<T>(d);
                mean_dxhat_xhat /= static_cast<T>(d);
                const T rs = (*rstd)[static_cast<std::size_t>(r)];
                for (std::int64_t j = 0; j < d; ++j) {
                    gx[static_cast<std::size_t>(r * d + j)] +=
                        rs * (dxhat[static_cast<std::size_t>(j)] - mean_dxhat - xh[j] * mean_dxhat_xhat);
                }
            }
        });
}

template <typename T>
Tensor<T> batch_norm2d(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, BatchNormStats<T>& stats,
                       NormMode mode, T momentum, T eps) {
    if (x.rank() != 4) {
        throw DimensionError("batch_norm2d: expects NCHW input, got " + shape_str(x.shape()));
    }
    const std::int64_t n = x.dim(0);
    const std::int64_t c = x.dim(1);
    const std::int64_t hw = x.dim(2) * x.dim(3);
    if (gamma.shape() != Shape{c} || beta.shape() != Shape{c} || stats.running_mean.shape() != Shape{c} ||
        stats.running_var.shape() != Shape{c}) {
        throw DimensionError("batch_norm2d: input " + shape_str(x.shape()) + " vs gamma " + shape_str(gamma.shape()));
    }
    const std::int64_t count = n * hw;
    const bool train = mode == NormMode::train;
    if (train && count < 2) {
        throw DimensionError("batch_norm2d: train mode needs at least 2 values per channel, got " +
                             shape_str(x.shape()));
    }
    if (!train && stats.batches_seen.item() <= T(0)) {
        throw StateError("batch_norm2d: eval mode before any running-statistics update");
    }
    auto xhat = std::make_shared<std::vector<T>>(x.numel());
    auto rstd = std::make_shared<std::vector<T>>(static_cast<std::size_t>(c));
    std::vector<T> out(x.numel());
    const auto v = x.data();
    const auto gv = gamma.data();
    const auto bv = beta.data();
    auto rm = stats.running_mean.mutable_data();
    auto rv = stats.running_var.mutable_data();
    for (std::int64_t ch = 0; ch < c; ++ch) {
        T mu = 0;
        T var = 0;
        if (train) {
            for (std::int64_t b = 0; b < n; ++b) {
                const T* plane = v.data() + (b * c + ch) * hw;
                for (std::int64_t p = 0; p < hw; ++p) {
                    mu += plane[p];
                }
            }
            mu /= static_cast<T>(count);
            for (std::int64_t b = 0; b < n; ++b) {
                const T* plane = v.data() + (b * c + ch) * hw;
                for (std::int64_t p = 0; p < hw; ++p) {
                    var += (plane[p] - mu) * (plane[p] - mu);
                }
            }
            const T unbiased = var / static_cast<T>(count - 1);
            var /= static_cast<T>(count);
            const auto k = static_cast<std::size_t>(ch);
            rm[k] = (T(1) - momentum) * rm[k] + momentum * mu;
            rv[k] = (T(1) - momentum) * rv[k] + momentum * unbiased;
        } else {
            mu = rm[static_cast<std::size_t>(ch)];
            var = rv[static_cast<std::size_t>(ch)];
        }
        const T rs = T(1) / std::sqrt(var + eps);
        (*rstd)[static_cast<std::size_t>(ch)] = rs;
        for (std::int64_t b = 0; b < n; ++b) {
            const std::int64_t off = (b * c + ch) * hw;
            for (std::int64_t p = 0; p < hw; ++p) {
                const auto idx = static_cast<std::size_t>(off + p);
                (*xhat)[idx] = (v[idx] - mu) * rs;
                out[idx] = (*xhat)[idx] * gv[static_cast<std::size_t>(ch)] + bv[static_cast<std::size_t>(ch)];
            }
        }
    }
    if (train) {
        stats.batches_seen.mutable_data()[0] += T(1);
    }
    return detail::make_result<T>(
        x.shape(), std::move(out), "batch_norm2d", {x, gamma, beta},
        [n, c, hw, train, xhat, rstd](std::span<const T> g, Inputs<T>& in) {
            auto gx = grad_of(in[0]);
            auto gg = grad_of(in[1]);
            auto gb = grad_of(in[2]);
            const auto& gamma = in[1]->data;
            const T count = static_cast<T>(n * hw);
            for (std::int64_t ch = 0; ch < c; ++ch) {
                T sum_g = 0;
                T sum_g_xhat = 0;
                for (std::int64_t b = 0; b < n; ++b) {
                    const std::int64_t off = (b * c + ch) * hw;
                    for (std::int64_t p = 0; p < hw; ++p) {
                        const auto idx = static_cast<std::size_t>(off + p);
                        sum_g += g[idx];
                        sum_g_xhat += g[idx] * (*xhat)[idx];
                    }
                }
                const auto k = static_cast<std::size_t>(ch);
                if (!gg.empty()) {
                    gg[k] += sum_g_xhat;
                }
                if (!gb.empty()) {
                    gb[k] += sum_g;
                }
                if (gx.empty()) {
                    continue;
                }
                const T scale = gamma[k] * (*rstd)[k];
                const T mean_g = sum_g / count;
                const T mean_g_xhat = sum_g_xhat / count;
                for (std::int64_t b = 0; b < n; ++b) {
                    const std::int64_t off = (b * c + ch) * hw;
                    for (std::int64_t p = 0; p < hw; ++p) {
                        const auto idx = static_cast<std::size_t>(off + p);
                        gx[idx] += train ? scale * (g[idx] - mean_g - (*xhat)[idx] * mean_g_xhat) : scale * g[idx];
                    }
                }
            }
        });
}

template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
    if (x.rank() != 4) {
        throw DimensionError("global_avg_pool: expects NCHW input, got " + shape_str(x.shape()));
    }
    const std::int64_t planes = x.dim(0) * x.dim(1);
    const std::int64_t hw = x.dim(2) * x.dim(3);
    std::vector<T> out(static_cast<std::size_t>(planes));
    const auto v = x.data();
    for (std::int64_t p = 0; p < planes; ++p) {
        T s = 0;
        for (std::int64_t i = 0; i < hw; ++i) {
            s += v[static_cast<std::size_t>(p * hw + i)];
        }
        out[static_cast<std::size_t>(p)] = s / static_cast<T>(hw);
    }
    return detail::make_result<T>({x.dim(0), x.dim(1)}, std::move(out), "global_avg_pool", {x},
                                  [planes, hw](std::span<const T> g, Inputs<T>& in) {
                                      auto gx = grad_of(in[0]);
                                      if (gx.empty()) {
                                          return;
                                      }
                                      for (std::int64_t p = 0; p < planes; ++p) {
                                          const T share = g[static_cast<std::size_t>(p)] / static_cast<T>(hw);
                                          for (std::int64_t i = 0; i < hw; ++i) {
                                              gx[static_cast<std::size_t>(p * hw + i)] += share;
                                          }
                                      }
                                  });
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& x) {
    const std::int64_t k = x.dim(-1);
    const std::int64_t rows = static_cast<std::int64_t>(x.numel()) / k;
    std::vector<T> out(x.data().begin(), x.data().end());
    for (std::int64_t r = 0; r < rows; ++r) {
        T* row = out.data() + r * k;
        const T mx = *std::max_element(row, row + k);
        T s = 0;
        for (std::int64_t j = 0; j < k; ++j) {
            row[j] = std::exp(row[j] - mx);
            s += row[j];
        }
        for (std::int64_t j = 0; j < k; ++j) {
            row[j] /= s;
        }
    }
    return Tensor<T>::from(x.shape(), std::move(out));
}

#define MEDMAMBA_INSTANTIATE_OPS(T)                                                                               \
    template struct BatchNormStats<T>;                                                                             \
    template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                                    \
    template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                                    \
    template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                                    \
    template Tensor<T> scale(const Tensor<T>&, T);                                                                 \
    template Tensor<T> neg(const Tensor<T>&);                                                                      \
    template Tensor<T> exp(const Tensor<T>&);                                                                      \
    template Tensor<T> sum(const Tensor<T>&);                                                                      \
    template Tensor<T> mean(const Tensor<T>&);                                                                     \
    template Tensor<T> activation(Activation, const Tensor<T>&);                                                   \
    template Tensor<T> reshape(const Tensor<T>&, Shape);                                                           \
    template Tensor<T> permute(const Tensor<T>&, std::vector<int>);                                                \
    template Tensor<T> concat(const std::vector<Tensor<T>>&, int);                                                 \
    template Tensor<T> narrow(const Tensor<T>&, int, std::int64_t, std::int64_t);                                  \
    template Tensor<T> index_select(const Tensor<T>&, int, std::span<const std::int64_t>);                         \
    template Tensor<T> pad2d(const Tensor<T>&, std::int64_t, std::int64_t);                                        \
    template Tensor<T> space_to_depth2x2(const Tensor<T>&);                                                        \
    template Tensor<T> linear(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);                               \
    template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, const Conv2dOptions&);         \
    template Tensor<T> layer_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T);                        \
    template Tensor<T> batch_norm2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, BatchNormStats<T>&,      \
                                    NormMode, T, T);                                                               \
    template Tensor<T> global_avg_pool(const Tensor<T>&);                                                          \
    template Tensor<T> softmax(const Tensor<T>&);

MEDMAMBA_INSTANTIATE_OPS(float)
MEDMAMBA_INSTANTIATE_OPS(double)

} // namespace medmamba
