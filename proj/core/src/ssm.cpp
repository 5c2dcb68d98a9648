#include "medmamba/ssm.hpp"

#include "medmamba/errors.hpp"
#include "medmamba/ops.hpp"

#include <cmath>
#include <sstream>

namespace medmamba {

namespace {

// a_bar and the factor f with b_bar = f * b, for z = delta * a.
template <typename T>
struct ZohFactors {
    T a_bar;
    T f;
};

template <typename T>
inline ZohFactors<T> zoh_factors(T a, T delta) {
    const T z = delta * a;
    const T a_bar = std::exp(z);
    if (std::abs(z) < T(kZohLimitThreshold)) {
        return {a_bar, delta};
    }
    return {a_bar, std::expm1(z) / z * delta};
}

// d/dz of (exp(z) - 1) / z.
template <typename T>
inline T dphi_dz(T z) {
    if (std::abs(z) < T(1e-3)) {
        return T(0.5) + z * (T(1) / T(3) + z * (T(1) / T(8) + z / T(30)));
    }
    return (z * std::exp(z) - std::expm1(z)) / (z * z);
}

struct ScanExtents {
    std::int64_t batch;
    std::int64_t length;
    std::int64_t channels;
    std::int64_t state;
};

template <typename T>
ScanExtents check_reference_scan(const Tensor<T>& x, const Tensor<T>& a_bar, const Tensor<T>& b_bar,
                                 const Tensor<T>& c, const Tensor<T>& d_skip, const char* op) {
    if (x.rank() != 2 && x.rank() != 3) {
        throw DimensionError(std::string(op) + ": x must be [L,d] or [B,L,d], got " + shape_str(x.shape()));
    }
    ScanExtents e{};
    e.batch = x.rank() == 3 ? x.dim(0) : 1;
    e.length = x.dim(-2);
    e.channels = x.dim(-1);
    e.state = a_bar.rank() >= 1 ? a_bar.dim(-1) : 0;
    Shape expect = x.shape();
    expect.push_back(e.state);
    Shape expect_c = x.shape();
    expect_c.back() = e.state;
    if (a_bar.shape() != expect || b_bar.shape() != expect || c.shape() != expect_c ||
        d_skip.shape() != Shape{e.channels}) {
        std::ostringstream os;
        os << op << ": x " << shape_str(x.shape()) << ", a_bar " << shape_str(a_bar.shape()) << ", b_bar "
           << shape_str(b_bar.shape()) << ", c " << shape_str(c.shape()) << ", d " << shape_str(d_skip.shape());
        throw DimensionError(os.str());
    }
    return e;
}

} // namespace

template <typename T>
ZohStep<T> zoh_discretize(T a, T b, T delta) {
    if (!(delta > T(0))) {
        throw DomainError("zoh_discretize: delta must be positive");
    }
    const auto f = zoh_factors(a, delta);
    return {f.a_bar, f.f * b};
}

template <typename T>
DiscreteSSM<T> zoh_discretize(const Tensor<T>& a, const Tensor<T>& b, const Tensor<T>& delta) {
    if (a.rank() != 2 || delta.rank() < 2 || b.rank() != delta.rank()) {
        throw DimensionError("zoh_discretize: a " + shape_str(a.shape()) + ", b " + shape_str(b.shape()) +
                             ", delta " + shape_str(delta.shape()));
    }
    const std::int64_t d = a.dim(0);
    const std::int64_t n = a.dim(1);
    Shape expect_b = delta.shape();
    expect_b.back() = n;
    if (delta.dim(-1) != d || b.shape() != expect_b) {
        throw DimensionError("zoh_discretize: a " + shape_str(a.shape()) + ", b " + shape_str(b.shape()) +
                             ", delta " + shape_str(delta.shape()));
    }
    const std::int64_t steps = static_cast<std::int64_t>(delta.numel()) / d;
    Shape out_shape = delta.shape();
    out_shape.push_back(n);
    std::vector<T> ab(static_cast<std::size_t>(steps * d * n));
    std::vector<T> bb(ab.size());
    const auto av = a.data();
    const auto bv = b.data();
    const auto dv = delta.data();
    for (std::int64_t s = 0; s < steps; ++s) {
        for (std::int64_t ch = 0; ch < d; ++ch) {
            const T dt = dv[static_cast<std::size_t>(s * d + ch)];
            for (std::int64_t k = 0; k < n; ++k) {
                const auto step = zoh_discretize(av[static_cast<std::size_t>(ch * n + k)],
                                                 bv[static_cast<std::size_t>(s * n + k)], dt);
                const auto idx = static_cast<std::size_t>((s * d + ch) * n + k);
                ab[idx] = step.a_bar;
                bb[idx] = step.b_bar;
            }
        }
    }
    return {Tensor<T>::from(out_shape, std::move(ab)), Tensor<T>::from(out_shape, std::move(bb))};
}

template <typename T>
Tensor<T> recurrent_scan(const Tensor<T>& x, const Tensor<T>& a_bar, const Tensor<T>& b_bar, const Tensor<T>& c,
                         const Tensor<T>& d_skip) {
    const auto e = check_reference_scan(x, a_bar, b_bar, c, d_skip, "recurrent_scan");
    const auto xv = x.data();
    const auto av = a_bar.data();
    const auto bv = b_bar.data();
    const auto cv = c.data();
    const auto dv = d_skip.data();
    std::vector<T> y(x.numel());
    std::vector<T> h(static_cast<std::size_t>(e.channels * e.state));
    for (std::int64_t bi = 0; bi < e.batch; ++bi) {
        std::fill(h.begin(), h.end(), T(0));
        for (std::int64_t t = 0; t < e.length; ++t) {
            const std::int64_t row = bi * e.length + t;
            const T* ct = cv.data() + row * e.state;
            for (std::int64_t ch = 0; ch < e.channels; ++ch) {
                const T xt = xv[static_cast<std::size_t>(row * e.channels + ch)];
                const std::int64_t base = (row * e.channels + ch) * e.state;
                T* hc = h.data() + ch * e.state;
                T acc = 0;
                for (std::int64_t k = 0; k < e.state; ++k) {
                    hc[k] = av[static_cast<std::size_t>(base + k)] * hc[k] + bv[static_cast<std::size_t>(base + k)] * xt;
                    acc += ct[k] * hc[k];
                }
                y[static_cast<std::size_t>(row * e.channels + ch)] = acc + dv[static_cast<std::size_t>(ch)] * xt;
            }
        }
    }
    return Tensor<T>::from(x.shape(), std::move(y));
}

template <typename T>
Tensor<T> lti_kernel(const Tensor<T>& a_bar, const Tensor<T>& b_bar, const Tensor<T>& c, std::int64_t length) {
    if (a_bar.rank() != 2 || b_bar.shape() != a_bar.shape() || c.shape() != Shape{a_bar.dim(1)} || length < 1) {
        throw DimensionError("lti_kernel: a_bar " + shape_str(a_bar.shape()) + ", b_bar " +
                             shape_str(b_bar.shape()) + ", c " + shape_str(c.shape()));
    }
    const std::int64_t d = a_bar.dim(0);
    const std::int64_t n = a_bar.dim(1);
    std::vector<T> kernel(static_cast<std::size_t>(d * length), T(0));
    const auto av = a_bar.data();
    const auto bv = b_bar.data();
    const auto cv = c.data();
    for (std::int64_t ch = 0; ch < d; ++ch) {
        for (std::int64_t k = 0; k < n; ++k) {
            const auto idx = static_cast<std::size_t>(ch * n + k);
            // c * a_bar^j * b_bar for j = 0, 1, ...
            T term = cv[static_cast<std::size_t>(k)] * bv[idx];
            for (std::int64_t j = 0; j < length; ++j) {
                kernel[static_cast<std::size_t>(ch * length + j)] += term;
                term *= av[idx];
            }
        }
    }
    return Tensor<T>::from({d, length}, std::move(kernel));
}

template <typename T>
Tensor<T> lti_conv_scan(const Tensor<T>& x, const Tensor<T>& a_bar, const Tensor<T>& b_bar, const Tensor<T>& c,
                        const Tensor<T>& d_skip) {
    const auto e = check_reference_scan(x, a_bar, b_bar, c, d_skip, "lti_conv_scan");
    const std::int64_t step_dn = e.channels * e.state;
    const auto av = a_bar.data();
    const auto bv = b_bar.data();
    const auto cv = c.data();
    // Time invariance: every timestep (and batch element) repeats step 0.
    for (std::int64_t row = 1; row < e.batch * e.length; ++row) {
        for (std::int64_t i = 0; i < step_dn; ++i) {
            if (av[static_cast<std::size_t>(row * step_dn + i)] != av[static_cast<std::size_t>(i)] ||
                bv[static_cast<std::size_t>(row * step_dn + i)] != bv[static_cast<std::size_t>(i)]) {
                throw ContractError("lti_conv_scan: a_bar/b_bar vary over time; use recurrent_scan");
            }
        }
        for (std::int64_t k = 0; k < e.state; ++k) {
            if (cv[static_cast<std::size_t>(row * e.state + k)] != cv[static_cast<std::size_t>(k)]) {
                throw ContractError("lti_conv_scan: c varies over time; use recurrent_scan");
            }
        }
    }
    const Shape dn{e.channels, e.state};
    const auto kernel =
        lti_kernel(Tensor<T>::from(dn, std::vector<T>(av.begin(), av.begin() + step_dn)),
                   Tensor<T>::from(dn, std::vector<T>(bv.begin(), bv.begin() + step_dn)),
                   Tensor<T>::from({e.state}, std::vector<T>(cv.begin(), cv.begin() + e.state)), e.length);
    const auto kv = kernel.data();
    const auto xv = x.data();
    const auto dv = d_skip.data();
    std::vector<T> y(x.numel());
    for (std::int64_t bi = 0; bi < e.batch; ++bi) {
        for (std::int64_t t = 0; t < e.length; ++t) {
            for (std::int64_t ch = 0; ch < e.channels; ++ch) {
                T acc = 0;
                for (std::int64_t j = 0; j <= t; ++j) {
                    acc += kv[static_cast<std::size_t>(ch * e.length + j)] *
                           xv[static_cast<std::size_t>(((bi * e.length) + t - j) * e.channels + ch)];
                }
                const auto idx = static_cast<std::size_t>((bi * e.length + t) * e.channels + ch);
                y[idx] = acc + dv[static_cast<std::size_t>(ch)] * xv[idx];
            }
        }
    }
    return Tensor<T>::from(x.shape(), std::move(y));
}

template <typename T>
Tensor<T> selective_scan(const Tensor<T>& x, const Tensor<T>& delta, const Tensor<T>& a, const Tensor<T>& b,
                         const Tensor<T>& c, const Tensor<T>& d_skip) {
    if (x.rank() != 3 || a.rank() != 2) {
        throw DimensionError("selective_scan: x " + shape_str(x.shape()) + ", a " + shape_str(a.shape()));
    }
    const ScanExtents e{x.dim(0), x.dim(1), x.dim(2), a.dim(1)};
    const Shape bc_shape{e.batch, e.length, e.state};
    if (delta.shape() != x.shape() || a.dim(0) != e.channels || b.shape() != bc_shape || c.shape() != bc_shape ||
        d_skip.shape() != Shape{e.channels}) {
        std::ostringstream os;
        os << "selective_scan: x " << shape_str(x.shape()) << ", delta " << shape_str(delta.shape()) << ", a "
           << shape_str(a.shape()) << ", b " << shape_str(b.shape()) << ", c " << shape_str(c.shape()) << ", d "
           << shape_str(d_skip.shape());
        throw DimensionError(os.str());
    }
    const T* xv = x.data().data();
    const T* dtv = delta.data().data();
    const T* av = a.data().data();
    const T* bv = b.data().data();
    const T* cv = c.data().data();
    const T* dv = d_skip.data().data();
    std::vector<T> y(x.numel());
    std::vector<T> h(static_cast<std::size_t>(e.channels * e.state));
    for (std::int64_t bi = 0; bi < e.batch; ++bi) {
        std::fill(h.begin(), h.end(), T(0));
        for (std::int64_t t = 0; t < e.length; ++t) {
            const std::int64_t row = bi * e.length + t;
            const T* bt = bv + row * e.state;
            const T* ct = cv + row * e.state;
            for (std::int64_t ch = 0; ch < e.channels; ++ch) {
                const T xt = xv[row * e.channels + ch];
                const T dt = dtv[row * e.channels + ch];
                const T* ac = av + ch * e.state;
                T* hc = h.data() + ch * e.state;
                T acc = 0;
                for (std::int64_t k = 0; k < e.state; ++k) {
                    const auto z = zoh_factors(ac[k], dt);
                    hc[k] = z.a_bar * hc[k] + z.f * bt[k] * xt;
                    acc += ct[k] * hc[k];
                }
                y[static_cast<std::size_t>(row * e.channels + ch)] = acc + dv[ch] * xt;
            }
        }
    }
    return detail::make_result<T>(
        x.shape(), std::move(y), "selective_scan", {x, delta, a, b, c, d_skip},
        [e](std::span<const T> gy, std::vector<std::shared_ptr<TensorImpl<T>>>& in) {
            auto grad = [&](std::size_t i) { return in[i]->requires_grad ? in[i]->grad_span() : std::span<T>{}; };
            auto gx = grad(0);
            auto gdelta = grad(1);
            auto ga = grad(2);
            auto gb = grad(3);
            auto gc = grad(4);
            auto gd = grad(5);
            const T* xv = in[0]->data.data();
            const T* dtv = in[1]->data.data();
            const T* av = in[2]->data.data();
            const T* bv = in[3]->data.data();
            const T* cv = in[4]->data.data();
            const T* dv = in[5]->data.data();
            const std::int64_t dn = e.channels * e.state;
            // states of one batch element: [L, d, N]
            std::vector<T> hs(static_cast<std::size_t>(e.length * dn));
            std::vector<T> carry(static_cast<std::size_t>(dn));
            for (std::int64_t bi = 0; bi < e.batch; ++bi) {
                for (std::int64_t t = 0; t < e.length; ++t) {
                    const std::int64_t row = bi * e.length + t;
                    const T* bt = bv + row * e.state;
                    for (std::int64_t ch = 0; ch < e.channels; ++ch) {
                        const T xt = xv[row * e.channels + ch];
                        const T dt = dtv[row * e.channels + ch];
                        T* hcur = hs.data() + t * dn + ch * e.state;
                        const T* hprev = t > 0 ? hs.data() + (t - 1) * dn + ch * e.state : nullptr;
                        for (std::int64_t k = 0; k < e.state; ++k) {
                            const auto z = zoh_factors(av[ch * e.state + k], dt);
                            hcur[k] = (hprev ? z.a_bar * hprev[k] : T(0)) + z.f * bt[k] * xt;
                        }
                    }
                }
                std::fill(carry.begin(), carry.end(), T(0));
                for (std::int64_t t = e.length; t-- > 0;) {
                    const std::int64_t row = bi * e.length + t;
                    const T* bt = bv + row * e.state;
                    const T* ct = cv + row * e.state;
                    for (std::int64_t ch = 0; ch < e.channels; ++ch) {
                        const auto xi = static_cast<std::size_t>(row * e.channels + ch);
                        const T g = gy[xi];
                        const T xt = xv[xi];
                        const T dt = dtv[xi];
                        const T* hcur = hs.data() + t * dn + ch * e.state;
                        const T* hprev = t > 0 ? hs.data() + (t - 1) * dn + ch * e.state : nullptr;
                        T* cc = carry.data() + ch * e.state;
                        T gxt = dv[ch] * g;
                        T gdt = 0;
                        if (!gd.empty()) {
                            gd[static_cast<std::size_t>(ch)] += g * xt;
                        }
                        for (std::int64_t k = 0; k < e.state; ++k) {
                            const T ak = av[ch * e.state + k];
                            const auto z = zoh_factors(ak, dt);
                            const T dh = ct[k] * g + cc[k];
                            if (!gc.empty()) {
                                gc[static_cast<std::size_t>(row * e.state + k)] += g * hcur[k];
                            }
                            const T hp = hprev ? hprev[k] : T(0);
                            const T d_abar = dh * hp;
                            const T d_bbar = dh * xt;
                            gxt += dh * z.f * bt[k];
                            cc[k] = dh * z.a_bar;
                            // d a_bar / d dt = a a_bar; d f / d dt = a_bar
                            gdt += (d_abar * ak + d_bbar * bt[k]) * z.a_bar;
                            if (!ga.empty()) {
                                ga[static_cast<std::size_t>(ch * e.state + k)] +=
                                    d_abar * dt * z.a_bar + d_bbar * bt[k] * dt * dt * dphi_dz(dt * ak);
                            }
                            if (!gb.empty()) {
                                gb[static_cast<std::size_t>(row * e.state + k)] += d_bbar * z.f;
                            }
                        }
                        if (!gx.empty()) {
                            gx[xi] += gxt;
                        }
                        if (!gdelta.empty()) {
                            gdelta[xi] += gdt;
                        }
                    }
                }
            }
        });
}

template <typename T>
SelectiveSSMParams<T> SelectiveSSMParams<T>::init(std::int64_t channels, std::int64_t state_size, Rng& rng) {
    if (channels < 1 || state_size < 1) {
        throw ConfigError("SelectiveSSMParams: channels and state size must be positive");
    }
    auto trunc = [&rng](Shape shape) {
        auto t = Tensor<T>::zeros(std::move(shape));
        for (auto& v : t.mutable_data()) {
            v = static_cast<T>(rng.truncated_normal(0.02));
        }
        return t;
    };
    SelectiveSSMParams p;
    p.delta_weight = trunc({channels, channels});
    p.b_weight = trunc({state_size, channels});
    p.c_weight = trunc({state_size, channels});
    p.delta_bias = Tensor<T>::zeros({channels});
    for (auto& v : p.delta_bias.mutable_data()) {
        const double dt = std::exp(rng.uniform(std::log(1e-3), std::log(1e-1)));
        v = static_cast<T>(dt + std::log(-std::expm1(-dt)));  // softplus^-1
    }
    p.a_log = Tensor<T>::zeros({channels, state_size});
    auto al = p.a_log.mutable_data();
    for (std::int64_t ch = 0; ch < channels; ++ch) {
        for (std::int64_t k = 0; k < state_size; ++k) {
            al[static_cast<std::size_t>(ch * state_size + k)] = static_cast<T>(std::log(static_cast<double>(k + 1)));
        }
    }
    p.d_skip = Tensor<T>::full({channels}, T(1));
    for (auto* t : {&p.delta_weight, &p.delta_bias, &p.b_weight, &p.c_weight, &p.a_log, &p.d_skip}) {
        t->set_requires_grad(true);
    }
    return p;
}

template <typename T>
std::vector<std::pair<std::string, Tensor<T>*>> SelectiveSSMParams<T>::named() {
    return {{"delta_proj.weight", &delta_weight}, {"delta_proj.bias", &delta_bias}, {"b_proj.weight", &b_weight},
            {"c_proj.weight", &c_weight},         {"A_log", &a_log},                {"D", &d_skip}};
}

template <typename T>
Tensor<T> s6_forward(const Tensor<T>& x, const SelectiveSSMParams<T>& params) {
    if (x.rank() == 2) {
        const auto y = s6_forward(reshape(x, {1, x.dim(0), x.dim(1)}), params);
        return reshape(y, x.shape());
    }
    if (x.rank() != 3 || x.dim(2) != params.channels()) {
        throw DimensionError("s6_forward: x " + shape_str(x.shape()) + " vs " + std::to_string(params.channels()) +
                             " channels");
    }
    const auto delta = softplus(linear(x, params.delta_weight, params.delta_bias));
    const auto b = linear(x, params.b_weight);
    const auto c = linear(x, params.c_weight);
    const auto a = neg(exp(params.a_log));
    return selective_scan(x, delta, a, b, c, params.d_skip);
}

#define MEDMAMBA_INSTANTIATE_SSM(T)                                                                                \
    template ZohStep<T> zoh_discretize(T, T, T);                                                                    \
    template DiscreteSSM<T> zoh_discretize(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);                   \
    template Tensor<T> recurrent_scan(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,       \
                                      const Tensor<T>&);                                                            \
    template Tensor<T> lti_kernel(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, std::int64_t);              \
    template Tensor<T> lti_conv_scan(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,        \
                                     const Tensor<T>&);                                                             \
    template Tensor<T> selective_scan(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,       \
                                      const Tensor<T>&, const Tensor<T>&);                                          \
    template struct SelectiveSSMParams<T>;                                                                          \
    template Tensor<T> s6_forward(const Tensor<T>&, const SelectiveSSMParams<T>&);

MEDMAMBA_INSTANTIATE_SSM(float)
MEDMAMBA_INSTANTIATE_SSM(double)

} // namespace medmamba
