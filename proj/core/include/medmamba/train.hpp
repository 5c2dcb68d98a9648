#pragma once

#include "medmamba/data.hpp"
#include "medmamba/model.hpp"
#include "medmamba/tensor.hpp"

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

namespace medmamba {

/// Mean over the batch of -log softmax(logits)[label], max-shifted.
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const std::int64_t> labels);

struct AdamOptions {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 1e-4;
};

template <typename T>
struct OptimizerState {
    AdamOptions options;
    std::int64_t step = 0;
    std::vector<std::vector<T>> m;
    std::vector<std::vector<T>> v;

    static OptimizerState create(const std::vector<Tensor<T>*>& params, AdamOptions options = {});
};

/// One Adam update with bias correction. Weight decay is decoupled:
/// theta -= lr * wd * theta happens before the adaptive step.
template <typename T>
void adam_step(const std::vector<Tensor<T>*>& params, OptimizerState<T>& state);

template <typename T>
std::vector<Tensor<T>*> tensors_of(const NamedTensors<T>& named);

/// Counts with rows = true class, columns = predicted class.
struct ConfusionMatrix {
    std::int64_t classes = 0;
    std::vector<std::int64_t> counts;

    explicit ConfusionMatrix(std::int64_t k = 0);
    static ConfusionMatrix from_counts(std::int64_t k, std::vector<std::int64_t> counts);

    void add(std::int64_t truth, std::int64_t predicted);
    std::int64_t at(std::int64_t truth, std::int64_t predicted) const;
    std::int64_t total() const;
    std::int64_t trace() const;
};

struct ClassMetrics {
    double accuracy = 0;
    double precision = 0;
    double sensitivity = 0;
    double specificity = 0;
    double f1 = 0;
    double auc = 0;
};

struct MetricsReport {
    int fold = -1;
    std::int64_t samples = 0;
    double accuracy = 0;  // trace / total
    std::vector<ClassMetrics> per_class;
    ClassMetrics macro;   // unweighted mean of per_class; macro.accuracy is the overall accuracy

    // accuracy, precision, sensitivity, specificity, f1, auc
    std::vector<std::pair<std::string, double>> named() const;
};

// One-vs-rest area under the ROC curve with ties counted as one half.
// Returns 0 when either class is absent.
double roc_auc(std::span<const double> scores, std::span<const bool> positive);

/// Per-class one-vs-rest metrics, macro averaged. `scores` is row-major
/// [N, K] class probabilities, `labels` the N true classes.
MetricsReport compute_metrics(const ConfusionMatrix& confusion, std::span<const double> scores,
                              std::span<const std::int64_t> labels, int fold = -1);

struct MetricSummary {
    std::string name;
    double mean = 0;
    double stddev = 0;  // population
};

std::vector<MetricSummary> aggregate_folds(std::span<const MetricsReport> reports);
std::string format_mean_std(const MetricSummary& s, int precision = 4);

void write_metrics_csv(std::ostream& os, std::span<const MetricsReport> reports,
                       const std::vector<std::string>& class_names);
void write_metrics_table(std::ostream& os, std::span<const MetricsReport> reports,
                         const std::vector<std::string>& class_names);
void write_summary_csv(std::ostream& os, std::span<const MetricSummary> summary);

/// Images resized to the model input and normalized, kept as [3, S, S] each.
struct PreparedData {
    std::int64_t size = 0;
    std::vector<std::vector<float>> images;
    std::vector<std::int64_t> labels;
    std::vector<Split> splits;
    std::int64_t num_classes = 0;

    std::size_t count() const { return labels.size(); }
    Tensor<float> batch(std::span<const std::int64_t> indices) const;
};

PreparedData prepare(const SampleSet& set, std::int64_t input_size);

struct TrainSchedule {
    std::int64_t epochs = 100;
    std::int64_t batch_size = 64;
    std::int64_t patience = 10;
    double min_delta = 0.0;
    std::int64_t folds = 5;
    std::uint64_t seed = 0;
    AdamOptions adam;
};

struct EpochRecord {
    int fold = 0;
    std::int64_t epoch = 0;  // 1-based
    double train_loss = 0;
    double train_acc = 0;
    double val_loss = 0;
    double val_acc = 0;
};

void write_history_csv(std::ostream& os, std::span<const EpochRecord> history);

struct Evaluation {
    double loss = 0;
    double accuracy = 0;
    ConfusionMatrix confusion;
    std::vector<double> scores;  // softmax, [N, K]
    std::vector<std::int64_t> labels;
    std::vector<std::int64_t> predictions;

    MetricsReport report(int fold = -1) const;
};

/// Eval-mode inference over `indices` without recording gradients.
Evaluation evaluate(MedMamba<float>& model, const PreparedData& data, std::span<const std::int64_t> indices,
                    std::int64_t batch_size);

struct FoldOutcome {
    MedMamba<float> model;  // restored to the best validation loss
    std::vector<EpochRecord> history;
    std::int64_t best_epoch = 0;  // 0 when no epoch ran
    double best_val_loss = 0;
};

using EpochCallback = std::function<void(const EpochRecord&)>;

/// Trains a fresh model on `train_idx`, early stopping on the validation loss
/// of `val_idx`. Trailing batches smaller than two samples are dropped.
FoldOutcome train_fold(const ModelConfig& config, const PreparedData& data, std::span<const std::int64_t> train_idx,
                       std::span<const std::int64_t> val_idx, const TrainSchedule& schedule, int fold,
                       const EpochCallback& on_epoch = {});

struct FoldResult {
    int fold = 0;
    std::vector<EpochRecord> history;
    MetricsReport report;
    std::int64_t best_epoch = 0;
};

using FoldCallback = std::function<void(const FoldResult&, MedMamba<float>&)>;

/// Stratified k-fold protocol; each held-out fold serves as both validation
/// and test set for its fold.
std::vector<FoldResult> cross_validate(const ModelConfig& config, const PreparedData& data,
                                       const TrainSchedule& schedule, const FoldCallback& on_fold = {},
                                       const EpochCallback& on_epoch = {});

/// Uses the declared train / val / test split tags instead of folds.
FoldResult train_holdout(const ModelConfig& config, const PreparedData& data, const TrainSchedule& schedule,
                         const FoldCallback& on_fold = {}, const EpochCallback& on_epoch = {});

} // namespace medmamba
