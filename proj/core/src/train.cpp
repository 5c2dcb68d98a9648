#include "medmamba/train.hpp"

#include "medmamba/errors.hpp"
#include "medmamba/ops.hpp"
#include "medmamba/rng.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <iomanip>
#include <limits>
#include <numeric>
#include <ostream>
#include <sstream>

namespace medmamba {

namespace {

std::uint64_t splitmix(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ull;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
    return x ^ (x >> 31);
}

double safe_div(double num, double den) { return den == 0.0 ? 0.0 : num / den; }

std::string fmt(double v, int precision = 4) {
    std::ostringstream os;
    os << std::fixed << std::setprecision(precision) << v;
    return os.str();
}

std::string csv_number(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

} // namespace

template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const std::int64_t> labels) {
    if (logits.rank() != 2) {
        throw DimensionError("cross_entropy: logits must be [N,K], got " + shape_str(logits.shape()));
    }
    const auto n = logits.dim(0);
    const auto k = logits.dim(1);
    if (static_cast<std::int64_t>(labels.size()) != n || n == 0) {
        throw DimensionError("cross_entropy: " + std::to_string(labels.size()) + " labels for " + std::to_string(n) +
                             " rows");
    }
    for (auto y : labels) {
        if (y < 0 || y >= k) {
            throw DomainError("cross_entropy: label " + std::to_string(y) + " outside [0, " + std::to_string(k) + ")");
        }
    }
    const auto v = logits.data();
    std::vector<T> probs(static_cast<std::size_t>(n * k));
    T total = 0;
    for (std::int64_t i = 0; i < n; ++i) {
        const T* row = v.data() + i * k;
        const T mx = *std::max_element(row, row + k);
        T z = 0;
        for (std::int64_t j = 0; j < k; ++j) {
            z += std::exp(row[j] - mx);
        }
        const T log_z = std::log(z) + mx;
        for (std::int64_t j = 0; j < k; ++j) {
            probs[static_cast<std::size_t>(i * k + j)] = std::exp(row[j] - log_z);
        }
        total += log_z - row[labels[static_cast<std::size_t>(i)]];
    }
    std::vector<std::int64_t> ys(labels.begin(), labels.end());
    return detail::make_result<T>(
        {1}, {total / static_cast<T>(n)}, "cross_entropy", {logits},
        [probs = std::move(probs), ys = std::move(ys), n, k](std::span<const T> g, std::vector<std::shared_ptr<TensorImpl<T>>>& in) {
            if (!in[0]->requires_grad) {
                return;
            }
            auto gi = in[0]->grad_span();
            const T s = g[0] / static_cast<T>(n);
            for (std::int64_t i = 0; i < n; ++i) {
                for (std::int64_t j = 0; j < k; ++j) {
                    const T onehot = ys[static_cast<std::size_t>(i)] == j ? T(1) : T(0);
                    gi[static_cast<std::size_t>(i * k + j)] += s * (probs[static_cast<std::size_t>(i * k + j)] - onehot);
                }
            }
        });
}

template <typename T>
OptimizerState<T> OptimizerState<T>::create(const std::vector<Tensor<T>*>& params, AdamOptions options) {
    OptimizerState<T> s;
    s.options = options;
    for (const auto* p : params) {
        s.m.emplace_back(static_cast<std::size_t>(p->numel()), T(0));
        s.v.emplace_back(static_cast<std::size_t>(p->numel()), T(0));
    }
    return s;
}

template <typename T>
void adam_step(const std::vector<Tensor<T>*>& params, OptimizerState<T>& state) {
    if (params.size() != state.m.size() || params.size() != state.v.size()) {
        throw DimensionError("adam_step: " + std::to_string(params.size()) + " parameters but state for " +
                             std::to_string(state.m.size()));
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
        const auto n = static_cast<std::size_t>(params[i]->numel());
        if (state.m[i].size() != n || state.v[i].size() != n) {
            throw DimensionError("adam_step: moment extents do not match parameter " + std::to_string(i));
        }
        if (!params[i]->has_grad()) {
            throw StateError("adam_step: parameter " + std::to_string(i) + " has no gradient");
        }
    }
    const auto& o = state.options;
    state.step += 1;
    const double bc1 = 1.0 - std::pow(o.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(o.beta2, static_cast<double>(state.step));
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto theta = params[i]->mutable_data();
        const auto grad = params[i]->grad();
        auto& m = state.m[i];
        auto& v = state.v[i];
        for (std::size_t j = 0; j < theta.size(); ++j) {
            double t = static_cast<double>(theta[j]);
            const double g = static_cast<double>(grad[j]);
            t -= o.lr * o.weight_decay * t;
            const double mj = o.beta1 * static_cast<double>(m[j]) + (1.0 - o.beta1) * g;
            const double vj = o.beta2 * static_cast<double>(v[j]) + (1.0 - o.beta2) * g * g;
            m[j] = static_cast<T>(mj);
            v[j] = static_cast<T>(vj);
            t -= o.lr * (mj / bc1) / (std::sqrt(vj / bc2) + o.eps);
            theta[j] = static_cast<T>(t);
        }
    }
}

template <typename T>
std::vector<Tensor<T>*> tensors_of(const NamedTensors<T>& named) {
    std::vector<Tensor<T>*> out;
    out.reserve(named.size());
    for (const auto& [name, t] : named) {
        out.push_back(t);
    }
    return out;
}

ConfusionMatrix::ConfusionMatrix(std::int64_t k) : classes(k), counts(static_cast<std::size_t>(k * k), 0) {
    if (k < 0) {
        throw ConfigError("ConfusionMatrix: negative class count");
    }
}

ConfusionMatrix ConfusionMatrix::from_counts(std::int64_t k, std::vector<std::int64_t> counts) {
    if (static_cast<std::int64_t>(counts.size()) != k * k) {
        throw DimensionError("ConfusionMatrix: expected " + std::to_string(k * k) + " counts");
    }
    for (auto c : counts) {
        if (c < 0) {
            throw DomainError("ConfusionMatrix: negative count");
        }
    }
    ConfusionMatrix m(k);
    m.counts = std::move(counts);
    return m;
}

void ConfusionMatrix::add(std::int64_t truth, std::int64_t predicted) {
    if (truth < 0 || truth >= classes || predicted < 0 || predicted >= classes) {
        throw DomainError("ConfusionMatrix: class index out of range");
    }
    ++counts[static_cast<std::size_t>(truth * classes + predicted)];
}

std::int64_t ConfusionMatrix::at(std::int64_t truth, std::int64_t predicted) const {
    return counts.at(static_cast<std::size_t>(truth * classes + predicted));
}

std::int64_t ConfusionMatrix::total() const { return std::accumulate(counts.begin(), counts.end(), std::int64_t{0}); }

std::int64_t ConfusionMatrix::trace() const {
    std::int64_t t = 0;
    for (std::int64_t i = 0; i < classes; ++i) {
        t += at(i, i);
    }
    return t;
}

std::vector<std::pair<std::string, double>> MetricsReport::named() const {
    return {{"accuracy", accuracy},          {"precision", macro.precision}, {"sensitivity", macro.sensitivity},
            {"specificity", macro.specificity}, {"f1", macro.f1},              {"auc", macro.auc}};
}

double roc_auc(std::span<const double> scores, std::span<const bool> positive) {
    if (scores.size() != positive.size()) {
        throw DimensionError("roc_auc: scores and labels differ in length");
    }
    const std::size_t n = scores.size();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
    // Mann-Whitney statistic with average ranks over tied groups.
    double rank_sum = 0;
    std::size_t pos = 0;
    for (std::size_t i = 0; i < n;) {
        std::size_t j = i;
        while (j < n && scores[order[j]] == scores[order[i]]) {
            ++j;
        }
        const double avg_rank = 0.5 * static_cast<double>(i + 1 + j);
        for (std::size_t q = i; q < j; ++q) {
            if (positive[order[q]]) {
                rank_sum += avg_rank;
                ++pos;
            }
        }
        i = j;
    }
    const std::size_t neg = n - pos;
    if (pos == 0 || neg == 0) {
        return 0.0;
    }
    const double p = static_cast<double>(pos);
    return (rank_sum - p * (p + 1.0) / 2.0) / (p * static_cast<double>(neg));
}

MetricsReport compute_metrics(const ConfusionMatrix& confusion, std::span<const double> scores,
                              std::span<const std::int64_t> labels, int fold) {
    const auto k = confusion.classes;
    const auto total = confusion.total();
    if (static_cast<std::int64_t>(labels.size()) != total ||
        static_cast<std::int64_t>(scores.size()) != total * k) {
        throw StateError("compute_metrics: confusion total " + std::to_string(total) + " inconsistent with " +
                         std::to_string(labels.size()) + " labels and " + std::to_string(scores.size()) + " scores");
    }
    MetricsReport r;
    r.fold = fold;
    r.samples = total;
    r.accuracy = safe_div(static_cast<double>(confusion.trace()), static_cast<double>(total));
    std::vector<double> column(labels.size());
    std::unique_ptr<bool[]> positive(new bool[labels.size()]);
    for (std::int64_t c = 0; c < k; ++c) {
        std::int64_t tp = confusion.at(c, c);
        std::int64_t fn = 0;
        std::int64_t fp = 0;
        for (std::int64_t j = 0; j < k; ++j) {
            if (j != c) {
                fn += confusion.at(c, j);
                fp += confusion.at(j, c);
            }
        }
        const std::int64_t tn = total - tp - fn - fp;
        ClassMetrics m;
        m.accuracy = safe_div(static_cast<double>(tp + tn), static_cast<double>(total));
        m.precision = safe_div(static_cast<double>(tp), static_cast<double>(tp + fp));
        m.sensitivity = safe_div(static_cast<double>(tp), static_cast<double>(tp + fn));
        m.specificity = safe_div(static_cast<double>(tn), static_cast<double>(tn + fp));
        m.f1 = safe_div(2.0 * m.precision * m.sensitivity, m.precision + m.sensitivity);
        for (std::size_t i = 0; i < labels.size(); ++i) {
            column[i] = scores[i * static_cast<std::size_t>(k) + static_cast<std::size_t>(c)];
            positive[i] = labels[i] == c;
        }
        m.auc = roc_auc(column, std::span<const bool>(positive.get(), labels.size()));
        r.per_class.push_back(m);
    }
    if (k > 0) {
        const double kk = static_cast<double>(k);
        for (const auto& m : r.per_class) {
            r.macro.precision += m.precision / kk;
            r.macro.sensitivity += m.sensitivity / kk;
            r.macro.specificity += m.specificity / kk;
            r.macro.f1 += m.f1 / kk;
            r.macro.auc += m.auc / kk;
        }
    }
    r.macro.accuracy = r.accuracy;
    return r;
}

std::vector<MetricSummary> aggregate_folds(std::span<const MetricsReport> reports) {
    if (reports.size() < 2) {
        throw ConfigError("aggregate_folds: need at least 2 reports, got " + std::to_string(reports.size()));
    }
    std::vector<MetricSummary> out;
    const auto names = reports[0].named();
    const double n = static_cast<double>(reports.size());
    for (std::size_t m = 0; m < names.size(); ++m) {
        MetricSummary s;
        s.name = names[m].first;
        for (const auto& r : reports) {
            s.mean += r.named()[m].second;
        }
        s.mean /= n;
        double var = 0;
        for (const auto& r : reports) {
            const double d = r.named()[m].second - s.mean;
            var += d * d;
        }
        s.stddev = std::sqrt(var / n);
        out.push_back(s);
    }
    return out;
}

std::string format_mean_std(const MetricSummary& s, int precision) {
    return fmt(s.mean, precision) + " ± " + fmt(s.stddev, precision);
}

void write_metrics_csv(std::ostream& os, std::span<const MetricsReport> reports,
                       const std::vector<std::string>& class_names) {
    os << "fold,scope,samples,accuracy,precision,sensitivity,specificity,f1,auc\n";
    auto row = [&](int fold, const std::string& scope, std::int64_t n, const ClassMetrics& m) {
        os << fold << ',' << scope << ',' << n << ',' << csv_number(m.accuracy) << ',' << csv_number(m.precision) << ','
           << csv_number(m.sensitivity) << ',' << csv_number(m.specificity) << ',' << csv_number(m.f1) << ','
           << csv_number(m.auc) << '\n';
    };
    for (const auto& r : reports) {
        row(r.fold, "macro", r.samples, r.macro);
        for (std::size_t c = 0; c < r.per_class.size(); ++c) {
            const auto name = c < class_names.size() ? class_names[c] : "class" + std::to_string(c);
            row(r.fold, name, r.samples, r.per_class[c]);
        }
    }
}

void write_metrics_table(std::ostream& os, std::span<const MetricsReport> reports,
                         const std::vector<std::string>& class_names) {
    auto line = [&](const std::string& a, const std::string& b, const ClassMetrics& m) {
        os << std::left << std::setw(6) << a << std::setw(14) << b << std::right;
        for (double v : {m.accuracy, m.precision, m.sensitivity, m.specificity, m.f1, m.auc}) {
            os << std::setw(8) << fmt(v);
        }
        os << '\n';
    };
    os << std::left << std::setw(6) << "fold" << std::setw(14) << "scope" << std::right;
    for (const char* h : {"acc", "prec", "sens", "spec", "f1", "auc"}) {
        os << std::setw(8) << h;
    }
    os << '\n';
    for (const auto& r : reports) {
        line(std::to_string(r.fold), "macro", r.macro);
        for (std::size_t c = 0; c < r.per_class.size(); ++c) {
            line("", c < class_names.size() ? class_names[c] : "class" + std::to_string(c), r.per_class[c]);
        }
    }
}

void write_summary_csv(std::ostream& os, std::span<const MetricSummary> summary) {
    os << "metric,mean,std,summary\n";
    for (const auto& s : summary) {
        os << s.name << ',' << csv_number(s.mean) << ',' << csv_number(s.stddev) << ',' << format_mean_std(s) << '\n';
    }
}

Tensor<float> PreparedData::batch(std::span<const std::int64_t> indices) const {
    const auto per = static_cast<std::size_t>(3 * size * size);
    std::vector<float> out(indices.size() * per);
    for (std::size_t i = 0; i < indices.size(); ++i) {
        const auto& img = images.at(static_cast<std::size_t>(indices[i]));
        std::copy(img.begin(), img.end(), out.begin() + static_cast<std::ptrdiff_t>(i * per));
    }
    return Tensor<float>::from({static_cast<std::int64_t>(indices.size()), 3, size, size}, std::move(out));
}

PreparedData prepare(const SampleSet& set, std::int64_t input_size) {
    PreparedData d;
    d.size = input_size;
    d.num_classes = set.num_classes();
    for (const auto& s : set.samples) {
        auto img = normalize(resize_bilinear(s.image, input_size));
        d.images.emplace_back(img.data().begin(), img.data().end());
        d.labels.push_back(s.label);
        d.splits.push_back(s.split);
    }
    return d;
}

void write_history_csv(std::ostream& os, std::span<const EpochRecord> history) {
    os << "fold,epoch,train_loss,train_acc,val_loss,val_acc\n";
    for (const auto& e : history) {
        os << e.fold << ',' << e.epoch << ',' << csv_number(e.train_loss) << ',' << csv_number(e.train_acc) << ','
           << csv_number(e.val_loss) << ',' << csv_number(e.val_acc) << '\n';
    }
}

MetricsReport Evaluation::report(int fold) const { return compute_metrics(confusion, scores, labels, fold); }

Evaluation evaluate(MedMamba<float>& model, const PreparedData& data, std::span<const std::int64_t> indices,
                    std::int64_t batch_size) {
    if (indices.empty()) {
        throw ConfigError("evaluate: no samples to evaluate");
    }
    if (batch_size < 1) {
        throw ConfigError("evaluate: batch size must be positive");
    }
    const auto k = model.config().num_classes;
    Evaluation ev;
    ev.confusion = ConfusionMatrix(k);
    NoGradGuard guard;
    double loss = 0;
    for (std::size_t start = 0; start < indices.size(); start += static_cast<std::size_t>(batch_size)) {
        const auto n = std::min(indices.size() - start, static_cast<std::size_t>(batch_size));
        const auto idx = indices.subspan(start, n);
        const auto logits = model.forward(data.batch(idx), NormMode::eval);
        const auto v = logits.data();
        for (std::size_t i = 0; i < n; ++i) {
            const float* row = v.data() + i * static_cast<std::size_t>(k);
            const double mx = *std::max_element(row, row + k);
            double z = 0;
            for (std::int64_t j = 0; j < k; ++j) {
                z += std::exp(static_cast<double>(row[j]) - mx);
            }
            const auto label = data.labels.at(static_cast<std::size_t>(idx[i]));
            if (label < 0 || label >= k) {
                throw DomainError("evaluate: label " + std::to_string(label) + " outside the model's classes");
            }
            loss += std::log(z) + mx - static_cast<double>(row[label]);
            std::int64_t best = 0;
            for (std::int64_t j = 0; j < k; ++j) {
                ev.scores.push_back(std::exp(static_cast<double>(row[j]) - mx) / z);
                if (row[j] > row[best]) {
                    best = j;
                }
            }
            ev.labels.push_back(label);
            ev.predictions.push_back(best);
            ev.confusion.add(label, best);
        }
    }
    ev.loss = loss / static_cast<double>(indices.size());
    ev.accuracy = static_cast<double>(ev.confusion.trace()) / static_cast<double>(indices.size());
    return ev;
}

FoldOutcome train_fold(const ModelConfig& config, const PreparedData& data, std::span<const std::int64_t> train_idx,
                       std::span<const std::int64_t> val_idx, const TrainSchedule& schedule, int fold,
                       const EpochCallback& on_epoch) {
    if (train_idx.size() < 2 || val_idx.empty()) {
        throw ConfigError("train_fold: fold " + std::to_string(fold) + " has " + std::to_string(train_idx.size()) +
                          " training and " + std::to_string(val_idx.size()) + " validation samples");
    }
    if (schedule.batch_size < 2) {
        throw ConfigError("train_fold: batch size must be at least 2");
    }
    if (schedule.epochs < 0 || schedule.patience < 1) {
        throw ConfigError("train_fold: epochs must be >= 0 and patience >= 1");
    }
    if (data.num_classes != config.num_classes) {
        throw ConfigError("train_fold: dataset has " + std::to_string(data.num_classes) + " classes, model expects " +
                          std::to_string(config.num_classes));
    }
    FoldOutcome out{MedMamba<float>(config, schedule.seed), {}, 0, std::numeric_limits<double>::infinity()};
    auto& model = out.model;
    const auto params = tensors_of(model.parameters());
    auto opt = OptimizerState<float>::create(params, schedule.adam);
    Rng rng(splitmix(schedule.seed ^ splitmix(static_cast<std::uint64_t>(fold) + 1)));
    std::vector<std::int64_t> order(train_idx.begin(), train_idx.end());
    std::vector<std::vector<float>> best;
    std::int64_t stale = 0;

    for (std::int64_t epoch = 1; epoch <= schedule.epochs; ++epoch) {
        rng.shuffle(order.begin(), order.end());
        double loss_sum = 0;
        std::int64_t correct = 0;
        std::int64_t seen = 0;
        for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(schedule.batch_size)) {
            const auto n = std::min(order.size() - start, static_cast<std::size_t>(schedule.batch_size));
            if (n < 2) {
                break;
            }
            const std::span<const std::int64_t> idx(order.data() + start, n);
            std::vector<std::int64_t> labels;
            for (auto i : idx) {
                labels.push_back(data.labels[static_cast<std::size_t>(i)]);
            }
            model.zero_grad();
            const auto logits = model.forward(data.batch(idx), NormMode::train);
            auto loss = cross_entropy(logits, labels);
            loss.backward();
            adam_step(params, opt);

            loss_sum += static_cast<double>(loss.item()) * static_cast<double>(n);
            const auto k = config.num_classes;
            const auto v = logits.data();
            for (std::size_t i = 0; i < n; ++i) {
                const float* row = v.data() + i * static_cast<std::size_t>(k);
                if (std::max_element(row, row + k) - row == labels[i]) {
                    ++correct;
                }
            }
            seen += static_cast<std::int64_t>(n);
        }
        const auto val = evaluate(model, data, val_idx, schedule.batch_size);
        EpochRecord rec{fold,
                        epoch,
                        loss_sum / static_cast<double>(seen),
                        static_cast<double>(correct) / static_cast<double>(seen),
                        val.loss,
                        val.accuracy};
        out.history.push_back(rec);
        if (on_epoch) {
            on_epoch(rec);
        }
        if (val.loss < out.best_val_loss - schedule.min_delta) {
            out.best_val_loss = val.loss;
            out.best_epoch = epoch;
            best = model.snapshot();
            stale = 0;
        } else if (++stale >= schedule.patience) {
            break;
        }
    }
    if (!best.empty()) {
        model.restore(best);
    }
    model.zero_grad();
    return out;
}

std::vector<FoldResult> cross_validate(const ModelConfig& config, const PreparedData& data,
                                       const TrainSchedule& schedule, const FoldCallback& on_fold,
                                       const EpochCallback& on_epoch) {
    const auto folds = stratified_folds(data.labels, static_cast<int>(schedule.folds), schedule.seed);
    std::vector<FoldResult> results;
    for (std::size_t f = 0; f < folds.size(); ++f) {
        std::vector<std::int64_t> train_idx;
        for (std::size_t g = 0; g < folds.size(); ++g) {
            if (g != f) {
                train_idx.insert(train_idx.end(), folds[g].begin(), folds[g].end());
            }
        }
        std::sort(train_idx.begin(), train_idx.end());
        const int fold = static_cast<int>(f) + 1;
        auto outcome = train_fold(config, data, train_idx, folds[f], schedule, fold, on_epoch);
        FoldResult r;
        r.fold = fold;
        r.history = std::move(outcome.history);
        r.best_epoch = outcome.best_epoch;
        r.report = evaluate(outcome.model, data, folds[f], schedule.batch_size).report(fold);
        if (on_fold) {
            on_fold(r, outcome.model);
        }
        results.push_back(std::move(r));
    }
    return results;
}

FoldResult train_holdout(const ModelConfig& config, const PreparedData& data, const TrainSchedule& schedule,
                         const FoldCallback& on_fold, const EpochCallback& on_epoch) {
    std::vector<std::int64_t> parts[3];
    for (std::size_t i = 0; i < data.count(); ++i) {
        parts[static_cast<int>(data.splits[i])].push_back(static_cast<std::int64_t>(i));
    }
    if (parts[2].empty()) {
        throw ConfigError("train_holdout: dataset declares no test samples");
    }
    // Without a declared validation split the test split doubles as validation.
    const auto& val = parts[1].empty() ? parts[2] : parts[1];
    auto outcome = train_fold(config, data, parts[0], val, schedule, 0, on_epoch);
    FoldResult r;
    r.fold = 0;
    r.history = std::move(outcome.history);
    r.best_epoch = outcome.best_epoch;
    r.report = evaluate(outcome.model, data, parts[2], schedule.batch_size).report(0);
    if (on_fold) {
        on_fold(r, outcome.model);
    }
    return r;
}

template Tensor<float> cross_entropy(const Tensor<float>&, std::span<const std::int64_t>);
template Tensor<double> cross_entropy(const Tensor<double>&, std::span<const std::int64_t>);
template struct OptimizerState<float>;
template struct OptimizerState<double>;
template void adam_step(const std::vector<Tensor<float>*>&, OptimizerState<float>&);
template void adam_step(const std::vector<Tensor<double>*>&, OptimizerState<double>&);
template std::vector<Tensor<float>*> tensors_of(const NamedTensors<float>&);
template std::vector<Tensor<double>*> tensors_of(const NamedTensors<double>&);

} // namespace medmamba
