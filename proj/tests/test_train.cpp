#include "grad_check.hpp"

#include "medmamba/errors.hpp"
#include "medmamba/ops.hpp"
#include "medmamba/train.hpp"

#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

using namespace medmamba;

namespace {

// Class 0 is bright in the top half, class 1 in the bottom half.
PreparedData toy_dataset(std::int64_t n, std::uint64_t seed) {
    Rng rng(seed);
    PreparedData d;
    d.size = 16;
    d.num_classes = 2;
    for (std::int64_t i = 0; i < n; ++i) {
        const auto label = i % 2;
        std::vector<float> img(3 * 16 * 16);
        for (std::int64_t c = 0; c < 3; ++c)
            for (std::int64_t y = 0; y < 16; ++y)
                for (std::int64_t x = 0; x < 16; ++x) {
                    const bool bright = (y < 8) == (label == 0);
                    img[static_cast<std::size_t>((c * 16 + y) * 16 + x)] =
                        static_cast<float>((bright ? 0.6 : -0.6) + 0.2 * rng.normal());
                }
        d.images.push_back(std::move(img));
        d.labels.push_back(label);
        d.splits.push_back(Split::train);
    }
    return d;
}

std::vector<std::int64_t> all_indices(const PreparedData& d) {
    std::vector<std::int64_t> v(d.count());
    std::iota(v.begin(), v.end(), 0);
    return v;
}

TrainSchedule quick_schedule(std::int64_t epochs) {
    TrainSchedule s;
    s.epochs = epochs;
    s.batch_size = 8;
    s.patience = std::max<std::int64_t>(epochs, 1);
    return s;
}

} // namespace

TEST_CASE("cross entropy values") {
    const std::vector<std::int64_t> l0{0};
    const auto uniform = cross_entropy(Tensor<double>::zeros({1, 4}), std::span<const std::int64_t>(l0));
    CHECK(uniform.item() == doctest::Approx(std::log(4.0)).epsilon(1e-12));
    const std::vector<std::int64_t> l2{2};
    const auto sat = cross_entropy(Tensor<double>::from({1, 3}, {0, 0, 30}), std::span<const std::int64_t>(l2));
    CHECK(sat.item() < 1e-9);
    const std::vector<std::int64_t> bad{3};
    CHECK_THROWS_AS(cross_entropy(Tensor<double>::zeros({1, 3}), std::span<const std::int64_t>(bad)), DomainError);
    CHECK_THROWS_AS(cross_entropy(Tensor<double>::zeros({2, 3}), std::span<const std::int64_t>(l0)),
                    DimensionError);
}

TEST_CASE("cross entropy gradient is softmax minus one-hot") {
    Rng rng(1);
    auto logits = testing::random_tensor({1, 3}, rng, -2, 2);
    logits.set_requires_grad(true);
    const std::vector<std::int64_t> label{1};
    cross_entropy(logits, std::span<const std::int64_t>(label)).backward();
    double z = 0;
    for (double v : logits.data()) z += std::exp(v);
    for (std::int64_t k = 0; k < 3; ++k) {
        const double expect = std::exp(logits.data()[k]) / z - (k == 1 ? 1.0 : 0.0);
        CHECK(logits.grad()[k] == doctest::Approx(expect).epsilon(1e-12));
    }
}

TEST_CASE("cross entropy is shift invariant") {
    Rng rng(2);
    for (int trial = 0; trial < 20; ++trial) {
        const auto logits = testing::random_tensor({4, 5}, rng, -3, 3);
        std::vector<std::int64_t> labels;
        for (int i = 0; i < 4; ++i) labels.push_back(static_cast<std::int64_t>(rng.below(5)));
        const double shift = rng.uniform(-50, 50);
        const auto shifted = add(logits, Tensor<double>::full({4, 5}, shift));
        const std::span<const std::int64_t> s(labels);
        CHECK(std::abs(cross_entropy(logits, s).item() - cross_entropy(shifted, s).item()) < 1e-6);
    }
}

TEST_CASE("adam closed forms") {
    auto p = Tensor<double>::from({1}, {0.5});
    p.set_requires_grad(true);
    AdamOptions opt;
    opt.weight_decay = 0;
    std::vector<Tensor<double>*> params{&p};
    auto state = OptimizerState<double>::create(params, opt);
    CHECK(state.step == 0);
    sum(p).backward();  // g = 1
    adam_step(params, state);
    CHECK(state.step == 1);
    CHECK(p.data()[0] == doctest::Approx(0.5 - 0.001 / (1 + 1e-8)).epsilon(1e-14));
    adam_step(params, state);  // same gradient again
    CHECK(state.step == 2);
    // m_hat = g and v_hat = g^2 for a constant gradient.
    CHECK(state.m[0][0] == doctest::Approx(1 - 0.9 * 0.9).epsilon(1e-14));
    CHECK(state.v[0][0] == doctest::Approx(1 - 0.999 * 0.999).epsilon(1e-14));
    CHECK(p.data()[0] == doctest::Approx(0.5 - 2 * 0.001 / (1 + 1e-8)).epsilon(1e-14));

    auto q = Tensor<double>::from({1}, {1.0});
    q.set_requires_grad(true);
    std::vector<Tensor<double>*> qs{&q};
    auto qstate = OptimizerState<double>::create(qs);
    scale(sum(q), 0.0).backward();
    adam_step(qs, qstate);
    CHECK(q.data()[0] == doctest::Approx(0.9999999).epsilon(1e-15));

    auto other = Tensor<double>::zeros({2});
    std::vector<Tensor<double>*> wrong{&other};
    CHECK_THROWS_AS(adam_step(wrong, qstate), DimensionError);
}

TEST_CASE("confusion matrix metrics") {
    const auto cm = ConfusionMatrix::from_counts(2, {8, 2, 3, 7});
    CHECK(cm.total() == 20);
    CHECK(cm.trace() == 15);
    std::vector<double> scores;
    std::vector<std::int64_t> labels;
    for (std::int64_t t = 0; t < 2; ++t)
        for (std::int64_t p = 0; p < 2; ++p)
            for (std::int64_t i = 0; i < cm.at(t, p); ++i) {
                scores.push_back(p == 0 ? 0.7 : 0.3);
                scores.push_back(p == 0 ? 0.3 : 0.7);
                labels.push_back(t);
            }
    const auto r = compute_metrics(cm, scores, labels, 2);
    CHECK(r.fold == 2);
    CHECK(r.accuracy == 15.0 / 20.0);
    const auto& c0 = r.per_class[0];
    CHECK(c0.precision == doctest::Approx(8.0 / 11.0));
    CHECK(c0.sensitivity == doctest::Approx(8.0 / 10.0));
    CHECK(c0.specificity == doctest::Approx(7.0 / 10.0));
    const double f1 = 2 * (8.0 / 11.0) * 0.8 / (8.0 / 11.0 + 0.8);
    CHECK(c0.f1 == doctest::Approx(f1));
    CHECK(r.per_class[0].sensitivity == r.per_class[1].specificity);
    CHECK(r.per_class[1].sensitivity == r.per_class[0].specificity);
    CHECK(r.macro.precision == doctest::Approx((8.0 / 11.0 + 7.0 / 9.0) / 2));
    CHECK_THROWS_AS(compute_metrics(cm, std::span<const double>(scores).first(10), labels), StateError);

    const auto perfect = ConfusionMatrix::from_counts(2, {1, 0, 0, 1});
    const std::vector<double> ps{0.9, 0.1, 0.2, 0.8};
    const std::vector<std::int64_t> pl{0, 1};
    const auto pr = compute_metrics(perfect, ps, pl);
    for (const auto& [name, v] : pr.named()) CHECK(v == 1.0);
}

TEST_CASE("zero denominators are zero") {
    const auto cm = ConfusionMatrix::from_counts(3, {2, 0, 0, 1, 0, 0, 0, 0, 1});
    const std::vector<double> s(12, 1.0 / 3.0);
    const std::vector<std::int64_t> l{0, 0, 1, 2};
    const auto r = compute_metrics(cm, s, l);
    CHECK(r.per_class[1].precision == 0.0);
    CHECK(r.per_class[1].sensitivity == 0.0);
    CHECK(r.per_class[1].f1 == 0.0);
}

TEST_CASE("auc") {
    const std::vector<double> equal(10, 0.4);
    const std::vector<bool> pos{true, false, true, false, true, false, false, false, true, true};
    const std::vector<char> posc(pos.begin(), pos.end());
    const std::span<const bool> ps(reinterpret_cast<const bool*>(posc.data()), posc.size());
    CHECK(roc_auc(equal, ps) == 0.5);
    const std::vector<double> ranked{0.9, 0.1, 0.8, 0.2, 0.7, 0.3, 0.4, 0.5, 0.6, 0.65};
    CHECK(roc_auc(ranked, ps) == 1.0);

    Rng rng(3);
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<double> sc(30);
        std::vector<char> lab(30);
        for (std::size_t i = 0; i < sc.size(); ++i) {
            sc[i] = std::round(rng.uniform(0, 1) * 10) / 10;  // ties included
            lab[i] = rng.uniform(0, 1) < 0.4;
        }
        lab[0] = 1;
        lab[1] = 0;
        const std::span<const bool> ls(reinterpret_cast<const bool*>(lab.data()), lab.size());
        // Pairwise oracle with half credit for ties.
        double wins = 0, pairs = 0;
        for (std::size_t i = 0; i < sc.size(); ++i)
            for (std::size_t j = 0; j < sc.size(); ++j)
                if (lab[i] && !lab[j]) {
                    pairs += 1;
                    wins += sc[i] > sc[j] ? 1.0 : sc[i] == sc[j] ? 0.5 : 0.0;
                }
        const double a = roc_auc(sc, ls);
        CHECK(a == doctest::Approx(wins / pairs).epsilon(1e-12));
        std::vector<double> tr(sc.size());
        std::transform(sc.begin(), sc.end(), tr.begin(), [](double v) { return std::exp(3 * v) - 7; });
        CHECK(roc_auc(tr, ls) == a);
    }
}

TEST_CASE("uniform scores give macro auc one half") {
    auto cm = ConfusionMatrix(3);
    std::vector<std::int64_t> labels{0, 1, 2, 0, 1, 2};
    for (auto l : labels) cm.add(l, 0);
    const std::vector<double> s(18, 1.0 / 3.0);
    const auto r = compute_metrics(cm, s, labels);
    for (const auto& c : r.per_class) CHECK(c.auc == 0.5);
    CHECK(r.macro.auc == 0.5);
}

TEST_CASE("fold aggregation") {
    MetricsReport a, b;
    a.accuracy = a.macro.accuracy = 0.8;
    b.accuracy = b.macro.accuracy = 0.9;
    const std::vector<MetricsReport> two{a, b};
    const auto s = aggregate_folds(two);
    REQUIRE(s[0].name == "accuracy");
    CHECK(s[0].mean == doctest::Approx(0.85));
    CHECK(s[0].stddev == doctest::Approx(0.05));
    CHECK(format_mean_std(s[0]) == "0.8500 ± 0.0500");
    const std::vector<MetricsReport> same(5, a);
    const auto z = aggregate_folds(same);
    CHECK(z.size() == 6);
    for (const auto& m : z) CHECK(m.stddev == 0.0);
    CHECK_THROWS_AS(aggregate_folds(std::span<const MetricsReport>(two).first(1)), ConfigError);
    std::ostringstream os;
    write_summary_csv(os, z);
    CHECK(os.str().rfind("metric,mean,std,summary\n", 0) == 0);
}

TEST_CASE("zero-epoch schedule returns the initial model") {
    const auto data = toy_dataset(8, 4);
    const auto idx = all_indices(data);
    const auto out = train_fold(ModelConfig::tiny(), data, idx, idx, quick_schedule(0), 1);
    CHECK(out.history.empty());
    CHECK(out.best_epoch == 0);
    MedMamba<float> fresh(ModelConfig::tiny(), 0);
    auto m = out.model;
    CHECK(m.snapshot() == fresh.snapshot());
}

TEST_CASE("separable toy data is fitted and runs are reproducible") {
    const auto data = toy_dataset(32, 5);
    const auto idx = all_indices(data);
    auto sched = quick_schedule(20);
    const auto a = train_fold(ModelConfig::tiny(), data, idx, idx, sched, 1);
    const auto b = train_fold(ModelConfig::tiny(), data, idx, idx, sched, 1);
    double best = 0;
    for (const auto& e : a.history) best = std::max(best, e.train_acc);
    CHECK(best == 1.0);
    REQUIRE(a.history.size() == b.history.size());
    for (std::size_t i = 0; i < a.history.size(); ++i) {
        CHECK(a.history[i].train_loss == b.history[i].train_loss);
        CHECK(a.history[i].val_loss == b.history[i].val_loss);
    }
    std::ostringstream os;
    write_history_csv(os, a.history);
    CHECK(os.str().rfind("fold,epoch,train_loss,train_acc,val_loss,val_acc\n", 0) == 0);
}

TEST_CASE("early stopping keeps the best validation loss") {
    auto data = toy_dataset(24, 6);
    Rng rng(6);
    std::vector<std::int64_t> train_idx, val_idx;
    for (std::int64_t i = 0; i < 24; ++i) {
        (i < 16 ? train_idx : val_idx).push_back(i);
        if (i >= 16) data.labels[static_cast<std::size_t>(i)] = static_cast<std::int64_t>(rng.below(2));
    }
    auto sched = quick_schedule(15);
    sched.patience = 2;
    const auto out = train_fold(ModelConfig::tiny(), data, train_idx, val_idx, sched, 1);
    double lowest = 1e300;
    for (const auto& e : out.history) lowest = std::min(lowest, e.val_loss);
    REQUIRE(out.best_epoch >= 1);
    CHECK(out.history[static_cast<std::size_t>(out.best_epoch - 1)].val_loss == lowest);
    CHECK(out.best_val_loss == lowest);
    if (static_cast<std::int64_t>(out.history.size()) < sched.epochs) {
        CHECK(static_cast<std::int64_t>(out.history.size()) == out.best_epoch + sched.patience);
    }
    auto model = out.model;
    CHECK(evaluate(model, data, val_idx, 8).loss == doctest::Approx(lowest).epsilon(1e-12));
    CHECK_THROWS_AS(evaluate(model, data, {}, 8), ConfigError);
}
