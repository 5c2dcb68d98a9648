#include "grad_check.hpp"

#include "medmamba/errors.hpp"
#include "medmamba/ops.hpp"
#include "medmamba/ssm.hpp"

#include <doctest.h>

#include <cmath>

using namespace medmamba;
using testing::random_tensor;

namespace {

// Literal per-timestep evaluation of the selective recurrence.
std::vector<double> loop_oracle(const Tensor<double>& x, const Tensor<double>& delta, const Tensor<double>& a,
                                const Tensor<double>& b, const Tensor<double>& c, const Tensor<double>& dskip) {
    const auto bsz = x.dim(0), len = x.dim(1), d = x.dim(2), n = a.dim(1);
    std::vector<double> y;
    for (std::int64_t bi = 0; bi < bsz; ++bi) {
        std::vector<double> h(static_cast<std::size_t>(d * n), 0.0);
        for (std::int64_t t = 0; t < len; ++t) {
            for (std::int64_t ch = 0; ch < d; ++ch) {
                double acc = 0;
                const double dt = delta.at({bi, t, ch});
                for (std::int64_t k = 0; k < n; ++k) {
                    const double av = a.at({ch, k});
                    const double abar = std::exp(dt * av);
                    const double bbar = (abar - 1.0) / (dt * av) * dt * b.at({bi, t, k});
                    auto& hv = h[static_cast<std::size_t>(ch * n + k)];
                    hv = abar * hv + bbar * x.at({bi, t, ch});
                    acc += c.at({bi, t, k}) * hv;
                }
                y.push_back(acc + dskip.at({ch}) * x.at({bi, t, ch}));
            }
        }
    }
    return y;
}

struct Lti {
    Tensor<double> x, a_bar, b_bar, c, d;
};

// Time-invariant system broadcast over L steps.
Lti random_lti(Rng& rng, std::int64_t len, std::int64_t d, std::int64_t n) {
    std::vector<double> ab(static_cast<std::size_t>(d * n)), bb(ab.size()), cc(static_cast<std::size_t>(n));
    for (std::size_t i = 0; i < ab.size(); ++i) {
        const auto z = zoh_discretize(-rng.uniform(0.1, 2.0), rng.uniform(-1, 1), rng.uniform(0.01, 1.0));
        ab[i] = z.a_bar;
        bb[i] = z.b_bar;
    }
    for (auto& v : cc) v = rng.uniform(-1, 1);
    std::vector<double> abt, bbt, ct;
    for (std::int64_t t = 0; t < len; ++t) {
        abt.insert(abt.end(), ab.begin(), ab.end());
        bbt.insert(bbt.end(), bb.begin(), bb.end());
        ct.insert(ct.end(), cc.begin(), cc.end());
    }
    return {random_tensor({len, d}, rng), Tensor<double>::from({len, d, n}, abt), Tensor<double>::from({len, d, n}, bbt),
            Tensor<double>::from({len, n}, ct), random_tensor({d}, rng)};
}

} // namespace

TEST_CASE("zoh closed forms") {
    const auto z = zoh_discretize(-1.0, 1.0, std::log(2.0));
    CHECK(std::abs(z.a_bar - 0.5) < 1e-12);
    CHECK(std::abs(z.b_bar - 0.5) < 1e-12);
    const auto w = zoh_discretize(-2.0, 3.0, 1.0);
    CHECK(w.a_bar == doctest::Approx(std::exp(-2.0)).epsilon(1e-14));
    CHECK(w.b_bar == doctest::Approx((1 - std::exp(-2.0)) * 3.0 / 2.0).epsilon(1e-14));
    const auto s = zoh_discretize(-1.0, 2.0, 1e-12);
    CHECK(std::abs(s.a_bar - 1.0) < 1e-11);
    CHECK(std::abs(s.b_bar - 2e-12) < 1e-20);
    CHECK_THROWS_AS(zoh_discretize(-1.0, 1.0, 0.0), DomainError);
    CHECK_THROWS_AS(zoh_discretize(-1.0, 1.0, -1e-3), DomainError);
}

TEST_CASE("zoh is continuous across the small-argument switch") {
    const double below = zoh_discretize(-1.0, 1.0, std::nextafter(kZohLimitThreshold, 0.0)).b_bar;
    const double above = zoh_discretize(-1.0, 1.0, std::nextafter(kZohLimitThreshold, 1.0)).b_bar;
    CHECK(std::abs(above - below) < 1e-9);
}

TEST_CASE("zoh keeps a_bar in (0,1) for stable dynamics") {
    Rng rng(1);
    for (int i = 0; i < 200; ++i) {
        const auto z = zoh_discretize(-rng.uniform(1e-3, 10.0), 1.0, rng.uniform(1e-4, 5.0));
        CHECK(z.a_bar > 0.0);
        CHECK(z.a_bar < 1.0);
    }
}

TEST_CASE("tensor zoh matches the scalar form") {
    Rng rng(2);
    const auto a = random_tensor({3, 4}, rng, -2, -0.1);
    const auto b = random_tensor({2, 5, 4}, rng);
    const auto delta = random_tensor({2, 5, 3}, rng, 0.01, 1);
    const auto dz = zoh_discretize(a, b, delta);
    CHECK(dz.a_bar.shape() == Shape{2, 5, 3, 4});
    const auto s = zoh_discretize(a.at({2, 1}), b.at({1, 3, 1}), delta.at({1, 3, 2}));
    CHECK(dz.a_bar.at({1, 3, 2, 1}) == doctest::Approx(s.a_bar).epsilon(1e-15));
    CHECK(dz.b_bar.at({1, 3, 2, 1}) == doctest::Approx(s.b_bar).epsilon(1e-15));
    CHECK_THROWS_AS(zoh_discretize(a, b, scale(delta, -1.0)), DomainError);
}

TEST_CASE("recurrent_scan hand examples") {
    const auto y = recurrent_scan(Tensor<double>::from({1, 1}, {2.0}), Tensor<double>::from({1, 1, 1}, {0.5}),
                                  Tensor<double>::from({1, 1, 1}, {0.5}), Tensor<double>::from({1, 1}, {1.0}),
                                  Tensor<double>::from({1}, {1.0}));
    CHECK(y.item() == 3.0);
    Rng rng(3);
    const auto sys = random_lti(rng, 6, 2, 3);
    const auto zero = recurrent_scan(Tensor<double>::zeros({6, 2}), sys.a_bar, sys.b_bar, sys.c, sys.d);
    for (double v : zero.data()) CHECK(v == 0.0);
    CHECK_THROWS_AS(recurrent_scan(Tensor<double>::zeros({5, 2}), sys.a_bar, sys.b_bar, sys.c, sys.d),
                    DimensionError);
}

TEST_CASE("a_bar = 1 turns the scan into a weighted prefix sum") {
    Rng rng(4);
    const std::int64_t len = 9;
    const double delta = 0.3;
    std::vector<double> bvals, ab(len, 1.0), bb, cs(len, 1.0);
    for (std::int64_t t = 0; t < len; ++t) {
        bvals.push_back(rng.uniform(-1, 1));
        bb.push_back(delta * bvals.back());
    }
    const auto x = random_tensor({len, 1}, rng);
    const auto y = recurrent_scan(x, Tensor<double>::from({len, 1, 1}, ab), Tensor<double>::from({len, 1, 1}, bb),
                                  Tensor<double>::from({len, 1}, cs), Tensor<double>::zeros({1}));
    double prefix = 0;
    for (std::int64_t t = 0; t < len; ++t) {
        prefix += delta * bvals[static_cast<std::size_t>(t)] * x.at({t, 0});
        CHECK(y.at({t, 0}) == doctest::Approx(prefix).epsilon(1e-13));
    }
}

TEST_CASE("lti kernel entries") {
    const auto ab = Tensor<double>::from({1, 2}, {0.5, 0.25});
    const auto bb = Tensor<double>::from({1, 2}, {2.0, 4.0});
    const auto c = Tensor<double>::from({2}, {1.0, 3.0});
    const auto k = lti_kernel(ab, bb, c, 2);
    CHECK(k.at({0, 0}) == 1.0 * 2.0 + 3.0 * 4.0);
    CHECK(k.at({0, 1}) == 1.0 * 0.5 * 2.0 + 3.0 * 0.25 * 4.0);
    const auto z = lti_kernel(Tensor<double>::zeros({1, 2}), bb, c, 4);
    CHECK(z.at({0, 0}) == 14.0);
    CHECK(z.at({0, 1}) == 0.0);
    CHECK(z.at({0, 3}) == 0.0);
}

TEST_CASE("convolution and recurrence agree on random LTI systems") {
    Rng rng(5);
    for (std::int64_t len : {1, 7, 32, 256}) {
        const auto s = random_lti(rng, len, 4, 8);
        const auto r = recurrent_scan(s.x, s.a_bar, s.b_bar, s.c, s.d);
        const auto v = lti_conv_scan(s.x, s.a_bar, s.b_bar, s.c, s.d);
        CHECK(testing::max_abs_diff(r.data(), v.data()) < 1e-10);
    }
}

TEST_CASE("lti_conv_scan rejects time-varying parameters") {
    Rng rng(6);
    auto s = random_lti(rng, 4, 2, 2);
    auto ab = s.a_bar.clone();
    ab.mutable_data()[ab.numel() - 1] *= 0.5;
    CHECK_THROWS_AS(lti_conv_scan(s.x, ab, s.b_bar, s.c, s.d), ContractError);
    auto c = s.c.clone();
    c.mutable_data()[c.numel() - 1] += 1.0;
    CHECK_THROWS_AS(lti_conv_scan(s.x, s.a_bar, s.b_bar, c, s.d), ContractError);
}

TEST_CASE("selective scan matches the loop oracle and is causal") {
    Rng rng(7);
    const auto x = random_tensor({2, 11, 3}, rng);
    const auto delta = random_tensor({2, 11, 3}, rng, 0.01, 0.8);
    const auto a = random_tensor({3, 4}, rng, -2, -0.1);
    const auto b = random_tensor({2, 11, 4}, rng);
    const auto c = random_tensor({2, 11, 4}, rng);
    const auto d = random_tensor({3}, rng);
    const auto y = selective_scan(x, delta, a, b, c, d);
    const auto ref = loop_oracle(x, delta, a, b, c, d);
    CHECK(testing::max_abs_diff(y.data(), ref) < 1e-12);

    auto x2 = x.clone();
    x2.mutable_data()[(1 * 11 + 6) * 3 + 1] += 5.0;  // batch 1, t = 6
    const auto y2 = selective_scan(x2, delta, a, b, c, d);
    for (std::int64_t t = 0; t < 11; ++t) {
        for (std::int64_t ch = 0; ch < 3; ++ch) {
            CHECK(y2.at({0, t, ch}) == y.at({0, t, ch}));
            if (t < 6) {
                CHECK(y2.at({1, t, ch}) == y.at({1, t, ch}));
            }
        }
    }
    CHECK(y2.at({1, 6, 1}) != y.at({1, 6, 1}));
}

TEST_CASE("selective scan gradients") {
    Rng rng(8);
    const auto x = random_tensor({2, 6, 3}, rng);
    const auto delta = random_tensor({2, 6, 3}, rng, 0.05, 0.8);
    const auto a = random_tensor({3, 4}, rng, -2, -0.1);
    const auto b = random_tensor({2, 6, 4}, rng);
    const auto c = random_tensor({2, 6, 4}, rng);
    const auto d = random_tensor({3}, rng);
    CHECK(testing::gradient_error(
              [](auto& in) { return selective_scan(in[0], in[1], in[2], in[3], in[4], in[5]); },
              {x, delta, a, b, c, d}) < 1e-7);
}

TEST_CASE("selective scan gradient near the zoh limit") {
    Rng rng(9);
    const auto x = random_tensor({1, 5, 2}, rng);
    const auto delta = random_tensor({1, 5, 2}, rng, 1e-5, 1e-4);
    const auto a = random_tensor({2, 3}, rng, -1e-3, -1e-4);
    const auto b = random_tensor({1, 5, 3}, rng);
    const auto c = random_tensor({1, 5, 3}, rng);
    const auto d = random_tensor({2}, rng);
    CHECK(testing::gradient_error(
              [](auto& in) { return selective_scan(in[0], in[1], in[2], in[3], in[4], in[5]); },
              {x, delta, a, b, c, d}, 3, 1e-8) < 1e-5);
}

TEST_CASE("hidden state stays bounded over long sequences") {
    Rng rng(10);
    const std::int64_t len = 10000;
    const auto x = random_tensor({1, len, 2}, rng, -1, 1);
    const auto delta = random_tensor({1, len, 2}, rng, 0.01, 0.5);
    const auto a = random_tensor({2, 4}, rng, -1.5, -0.2);
    const auto b = random_tensor({1, len, 4}, rng, -1, 1);
    const auto c = Tensor<double>::full({1, len, 4}, 1.0);
    const auto y = selective_scan(x, delta, a, b, c, Tensor<double>::zeros({2}));
    // |h| <= max|b_bar x| / (1 - max a_bar); with these ranges b_bar <= delta*|b| <= 0.5.
    const double a_bar_max = std::exp(0.01 * -0.2);
    const double bound = 4 * 0.5 / (1 - a_bar_max);
    for (double v : y.data()) {
        CHECK(std::isfinite(v));
        CHECK(std::abs(v) <= bound);
    }
}

TEST_CASE("s6 block") {
    Rng rng(11);
    for (auto [len, d] : {std::pair<std::int64_t, std::int64_t>{7, 4}, {16, 8}}) {
        auto p = SelectiveSSMParams<double>::init(d, 4, rng);
        const auto x = random_tensor({len, d}, rng);
        CHECK(s6_forward(x, p).shape() == x.shape());
        const auto zero = s6_forward(Tensor<double>::zeros({len, d}), p);
        for (double v : zero.data()) CHECK(v == 0.0);
    }
    auto p = SelectiveSSMParams<double>::init(4, 4, rng);
    for (double v : p.delta_bias.data()) {
        const double dt = std::log1p(std::exp(v));
        CHECK(dt >= 1e-3 * (1 - 1e-9));
        CHECK(dt <= 1e-1 * (1 + 1e-9));
    }
    CHECK(p.a_log.at({2, 3}) == doctest::Approx(std::log(4.0)));
    CHECK(p.d_skip.at({1}) == 1.0);
    CHECK(p.named().size() == 6);

    // Literal composition: softplus projection, projections, loop oracle.
    const auto x = random_tensor({2, 8, 4}, rng);
    const auto delta = softplus(linear(x, p.delta_weight, p.delta_bias));
    const auto b = linear(x, p.b_weight);
    const auto c = linear(x, p.c_weight);
    const auto a = scale(exp(p.a_log), -1.0);
    const auto ref = loop_oracle(x, delta, a, b, c, p.d_skip);
    CHECK(testing::max_abs_diff(s6_forward(x, p).data(), ref) < 1e-10);

    // Larger weights make every parameter matter in the gradient check.
    for (auto& [name, t] : p.named()) {
        for (auto& v : t->mutable_data()) v += rng.uniform(-0.3, 0.3);
    }
    const auto xs = random_tensor({1, 8, 4}, rng);
    CHECK(testing::gradient_error(
              [&p](auto& in) {
                  SelectiveSSMParams<double> q = p;
                  q.delta_weight = in[1];
                  q.b_weight = in[2];
                  q.c_weight = in[3];
                  q.a_log = in[4];
                  q.d_skip = in[5];
                  q.delta_bias = in[6];
                  return s6_forward(in[0], q);
              },
              {xs, p.delta_weight.clone(), p.b_weight.clone(), p.c_weight.clone(), p.a_log.clone(),
               p.d_skip.clone(), p.delta_bias.clone()}) < 1e-4);
}
