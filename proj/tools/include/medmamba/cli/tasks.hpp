#pragma once

#include "medmamba/data.hpp"
#include "medmamba/model.hpp"

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

namespace medmamba::cli {

struct SynthOptions {
    std::int64_t count = 200;
    std::int64_t size = 64;
    std::uint64_t seed = 0;
};

/// Two-class oriented stripes, one grayscale channel. Class 0 varies along
/// rows (horizontal stripes), class 1 along columns. Split 70/10/20.
PackedDataset synthesize_stripes(const SynthOptions& options);

struct GradcheckOptions {
    ModelConfig config = ModelConfig::tiny();
    std::int64_t samples = 100;
    double epsilon = 1e-4;
    double threshold = 1e-3;
    std::int64_t batch = 8;
    std::uint64_t seed = 0;
    std::string fault;  // op whose backward is perturbed, empty for none
};

inline constexpr std::int64_t kGradcheckMaxParameters = 100000;

struct GradcheckEntry {
    std::string name;
    std::int64_t index = 0;
    double analytic = 0;
    double numeric = 0;
    double rel_error = 0;
};

struct GradcheckReport {
    std::int64_t parameter_count = 0;
    std::vector<GradcheckEntry> entries;  // worst first
    std::int64_t skipped_at_kinks = 0;
    double max_rel_error = 0;
    double threshold = 0;
    bool passed = false;
};

// |a - n| / max(|a|, |n|, floor)
double relative_error(double analytic, double numeric);
inline constexpr double kRelativeErrorFloor = 1e-6;

/// Throws ConfigError when the model has kGradcheckMaxParameters or more.
GradcheckReport gradcheck(const GradcheckOptions& options);
void print_gradcheck(std::ostream& os, const GradcheckReport& report, std::size_t worst = 10);

struct BenchOptions {
    std::vector<std::int64_t> lengths{1024, 2048, 4096, 8192};
    std::int64_t repeats = 5;
    std::int64_t channels = 64;
    std::int64_t state_size = 16;
    std::uint64_t seed = 0;
};

struct BenchRow {
    std::int64_t length = 0;
    double median_seconds = 0;
    std::vector<double> seconds;
};

struct BenchResult {
    std::vector<BenchRow> rows;
    std::vector<double> ratios;  // t(L[i+1]) / t(L[i])
};

BenchResult bench_scan(const BenchOptions& options);
void write_bench_csv(std::ostream& os, const BenchResult& result);

} // namespace medmamba::cli
