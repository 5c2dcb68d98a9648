#include "medmamba/cli/tasks.hpp"

#include "medmamba/errors.hpp"
#include "medmamba/ops.hpp"
#include "medmamba/rng.hpp"
#include "medmamba/ssm.hpp"
#include "medmamba/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <iomanip>
#include <numbers>
#include <ostream>

namespace medmamba::cli {

PackedDataset synthesize_stripes(const SynthOptions& o) {
    if (o.count < 10 || o.size < 4) {
        throw ConfigError("synth: need count >= 10 and size >= 4");
    }
    Rng rng(o.seed);
    PackedDataset d;
    d.height = static_cast<std::uint32_t>(o.size);
    d.width = static_cast<std::uint32_t>(o.size);
    d.channels = 1;
    d.num_classes = 2;
    const auto n = o.count;
    const auto n_train = n * 7 / 10;
    const auto n_val = n / 10;
    const double two_pi = 2.0 * std::numbers::pi;
    // Labels alternate so every split stays balanced; order within a split is shuffled.
    std::vector<std::int64_t> order(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) {
        order[static_cast<std::size_t>(i)] = i;
    }
    rng.shuffle(order.begin(), order.begin() + n_train);
    rng.shuffle(order.begin() + n_train, order.begin() + n_train + n_val);
    rng.shuffle(order.begin() + n_train + n_val, order.end());
    for (std::int64_t pos = 0; pos < n; ++pos) {
        const auto label = order[static_cast<std::size_t>(pos)] % 2;
        const std::uint8_t split = pos < n_train ? 0 : (pos < n_train + n_val ? 1 : 2);
        d.splits.push_back(split);
        d.labels.push_back(static_cast<std::uint8_t>(label));
        const double freq = rng.uniform(2.0, 6.0);
        const double phase = rng.uniform(0.0, two_pi);
        const double amp = rng.uniform(0.25, 0.45);
        const double bias = rng.uniform(0.4, 0.6);
        for (std::int64_t y = 0; y < o.size; ++y) {
            for (std::int64_t x = 0; x < o.size; ++x) {
                const double t = static_cast<double>(label == 0 ? y : x);
                double v = bias + amp * std::sin(two_pi * freq * t / static_cast<double>(o.size) + phase) +
                           0.08 * rng.normal();
                v = std::clamp(v, 0.0, 1.0);
                d.pixels.push_back(static_cast<std::uint8_t>(std::lround(v * 255.0)));
            }
        }
    }
    return d;
}

double relative_error(double analytic, double numeric) {
    const double den = std::max({std::abs(analytic), std::abs(numeric), kRelativeErrorFloor});
    return std::abs(analytic - numeric) / den;
}

GradcheckReport gradcheck(const GradcheckOptions& o) {
    o.config.validate();
    if (o.samples < 1 || !(o.epsilon > 0) || o.batch < 1) {
        throw ConfigError("gradcheck: samples, epsilon and batch must be positive");
    }
    MedMamba<double> model(o.config, o.seed);
    GradcheckReport report;
    report.threshold = o.threshold;
    report.parameter_count = model.parameter_count();
    if (report.parameter_count >= kGradcheckMaxParameters) {
        throw ConfigError("gradcheck: model has " + std::to_string(report.parameter_count) +
                          " parameters; only configs below " + std::to_string(kGradcheckMaxParameters) +
                          " are checked");
    }
    Rng rng(o.seed + 1);
    const auto s = o.config.input_size;
    std::vector<double> pixels(static_cast<std::size_t>(o.batch * 3 * s * s));
    for (auto& v : pixels) {
        v = rng.normal();
    }
    const auto image = Tensor<double>::from({o.batch, 3, s, s}, std::move(pixels));
    std::vector<std::int64_t> labels;
    for (std::int64_t i = 0; i < o.batch; ++i) {
        labels.push_back(i % o.config.num_classes);
    }
    // Loss value plus the relu sign fingerprint of the forward pass.
    auto loss_value = [&] {
        NoGradGuard guard;
        KinkProbe probe;
        const double loss = cross_entropy(model.forward(image, NormMode::train), labels).item();
        return std::pair{loss, probe.fingerprint()};
    };
    const auto base_fingerprint = loss_value().second;

    auto named = model.parameters();
    model.zero_grad();
    set_gradient_fault(o.fault);
    try {
        cross_entropy(model.forward(image, NormMode::train), labels).backward();
    } catch (...) {
        set_gradient_fault("");
        throw;
    }
    set_gradient_fault("");

    const auto total = std::max<std::int64_t>(o.samples, static_cast<std::int64_t>(named.size()));
    constexpr int kDrawsPerTensor = 20;
    std::size_t cursor = 0;
    std::int64_t exhausted = 0;
    while (static_cast<std::int64_t>(report.entries.size()) < total) {
        auto& [name, tensor] = named[cursor % named.size()];
        ++cursor;
        bool found = false;
        for (int draw = 0; draw < kDrawsPerTensor && !found; ++draw) {
            const auto idx = static_cast<std::size_t>(rng.below(static_cast<std::uint64_t>(tensor->numel())));
            auto data = tensor->mutable_data();
            const double saved = data[idx];
            data[idx] = saved + o.epsilon;
            const auto up = loss_value();
            data[idx] = saved - o.epsilon;
            const auto down = loss_value();
            data[idx] = saved;
            // A stencil that crosses a relu kink measures no derivative; draw another entry.
            if (up.second != base_fingerprint || down.second != base_fingerprint) {
                ++report.skipped_at_kinks;
                continue;
            }
            GradcheckEntry e;
            e.name = name;
            e.index = static_cast<std::int64_t>(idx);
            e.analytic = tensor->grad()[idx];
            e.numeric = (up.first - down.first) / (2.0 * o.epsilon);
            e.rel_error = relative_error(e.analytic, e.numeric);
            report.entries.push_back(e);
            found = true;
        }
        exhausted = found ? 0 : exhausted + 1;
        if (exhausted >= static_cast<std::int64_t>(named.size())) {
            throw StateError("gradcheck: every parameter tensor straddles a relu kink at this step size");
        }
    }
    std::stable_sort(report.entries.begin(), report.entries.end(),
                     [](const GradcheckEntry& a, const GradcheckEntry& b) { return a.rel_error > b.rel_error; });
    report.max_rel_error = report.entries.front().rel_error;
    report.passed = report.max_rel_error <= o.threshold;
    return report;
}

void print_gradcheck(std::ostream& os, const GradcheckReport& r, std::size_t worst) {
    os << "parameters: " << r.parameter_count << "\n";
    os << "checked: " << r.entries.size() << "\n";
    os << "skipped_at_relu_kinks: " << r.skipped_at_kinks << "\n";
    os << "max_relative_error: " << std::scientific << std::setprecision(3) << r.max_rel_error << "\n";
    os << "worst " << std::min(worst, r.entries.size()) << ":\n";
    for (std::size_t i = 0; i < worst && i < r.entries.size(); ++i) {
        const auto& e = r.entries[i];
        os << "  " << e.name << "[" << e.index << "] analytic=" << e.analytic << " numeric=" << e.numeric
           << " rel=" << e.rel_error << "\n";
    }
    os << std::defaultfloat;
    os << (r.passed ? "PASS" : "FAIL") << " (threshold " << r.threshold << ")\n";
}

BenchResult bench_scan(const BenchOptions& o) {
    if (o.lengths.empty() || o.repeats < 1 || !std::is_sorted(o.lengths.begin(), o.lengths.end()) ||
        o.lengths.front() < 1) {
        throw ConfigError("bench-scan: lengths must be positive and ascending, repeats >= 1");
    }
    const auto d = o.channels;
    const auto n = o.state_size;
    Rng rng(o.seed);
    auto random = [&](Shape shape, double lo, double hi) {
        std::vector<float> v(static_cast<std::size_t>(shape_numel(shape)));
        for (auto& x : v) {
            x = static_cast<float>(rng.uniform(lo, hi));
        }
        return Tensor<float>::from(std::move(shape), std::move(v));
    };
    const auto a = random({d, n}, -2.0, -0.1);
    const auto d_skip = random({d}, -1.0, 1.0);
    NoGradGuard guard;
    BenchResult result;
    for (const auto len : o.lengths) {
        const auto x = random({1, len, d}, -1.0, 1.0);
        const auto delta = random({1, len, d}, 0.001, 0.1);
        const auto b = random({1, len, n}, -1.0, 1.0);
        const auto c = random({1, len, n}, -1.0, 1.0);
        (void)selective_scan(x, delta, a, b, c, d_skip);
        BenchRow row;
        row.length = len;
        for (std::int64_t r = 0; r < o.repeats; ++r) {
            const auto t0 = std::chrono::steady_clock::now();
            const auto y = selective_scan(x, delta, a, b, c, d_skip);
            const auto t1 = std::chrono::steady_clock::now();
            row.seconds.push_back(std::chrono::duration<double>(t1 - t0).count());
        }
        auto sorted = row.seconds;
        std::sort(sorted.begin(), sorted.end());
        const auto m = sorted.size();
        row.median_seconds = m % 2 ? sorted[m / 2] : 0.5 * (sorted[m / 2 - 1] + sorted[m / 2]);
        result.rows.push_back(row);
    }
    for (std::size_t i = 1; i < result.rows.size(); ++i) {
        result.ratios.push_back(result.rows[i].median_seconds / result.rows[i - 1].median_seconds);
    }
    return result;
}

void write_bench_csv(std::ostream& os, const BenchResult& r) {
    os << "length,median_seconds,ratio_to_previous\n";
    char buf[64];
    for (std::size_t i = 0; i < r.rows.size(); ++i) {
        os << r.rows[i].length << ',';
        std::snprintf(buf, sizeof buf, "%.9g", r.rows[i].median_seconds);
        os << buf << ',';
        if (i > 0) {
            std::snprintf(buf, sizeof buf, "%.6g", r.ratios[i - 1]);
            os << buf;
        }
        os << '\n';
    }
}

} // namespace medmamba::cli
