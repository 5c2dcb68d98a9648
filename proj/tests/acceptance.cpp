#include "medmamba/cli/commands.hpp"
#include "medmamba/data.hpp"
#include "medmamba/model.hpp"
#include "medmamba/ops.hpp"
#include "medmamba/rng.hpp"
#include "medmamba/ss2d.hpp"
#include "medmamba/ssm.hpp"
#include "medmamba/train.hpp"

#include <json.hpp>

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <iterator>
#include <sstream>
#include <string>
#include <vector>

#include <unistd.h>

using namespace medmamba;
namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

struct Verdict {
    bool pass = false;
    std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(double v) {
    std::ostringstream os;
    os << v;
    return os.str();
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::vector<std::vector<std::string>> csv_rows(const fs::path& p) {
    std::vector<std::vector<std::string>> rows;
    std::istringstream in(slurp(p));
    std::string line;
    while (std::getline(in, line)) {
        std::vector<std::string> cells;
        std::istringstream ls(line);
        std::string cell;
        while (std::getline(ls, cell, ',')) cells.push_back(cell);
        rows.push_back(cells);
    }
    return rows;
}

int invoke(const std::vector<std::string>& args, std::string* err_text = nullptr) {
    std::ostringstream out, err;
    const int code = cli::run(args, out, err);
    if (err_text) *err_text = err.str();
    return code;
}

// Accuracy column of the macro row in a metrics CSV.
double macro_accuracy(const fs::path& metrics) {
    for (const auto& row : csv_rows(metrics)) {
        if (row.size() > 3 && row[1] == "macro") return std::stod(row[3]);
    }
    return -1;
}

Tensor<double> uniform(Shape shape, Rng& rng, double lo, double hi) {
    std::vector<double> v(static_cast<std::size_t>(shape_numel(shape)));
    for (auto& x : v) x = rng.uniform(lo, hi);
    return Tensor<double>::from(std::move(shape), std::move(v));
}

Verdict lti_equivalence() {
    const auto t0 = Clock::now();
    Rng rng(101);
    const std::int64_t d = 4, n = 8, len = 32;
    double worst = 0;
    for (int sys = 0; sys < 50; ++sys) {
        std::vector<double> ab, bb, cs;
        std::vector<double> a_bar(static_cast<std::size_t>(d * n)), b_bar(a_bar.size()), c(static_cast<std::size_t>(n));
        for (std::size_t i = 0; i < a_bar.size(); ++i) {
            const auto z = zoh_discretize(-rng.uniform(0.05, 3.0), rng.uniform(-1, 1), rng.uniform(0.01, 1.0));
            a_bar[i] = z.a_bar;
            b_bar[i] = z.b_bar;
        }
        for (auto& v : c) v = rng.uniform(-1, 1);
        for (std::int64_t t = 0; t < len; ++t) {
            ab.insert(ab.end(), a_bar.begin(), a_bar.end());
            bb.insert(bb.end(), b_bar.begin(), b_bar.end());
            cs.insert(cs.end(), c.begin(), c.end());
        }
        const auto x = uniform({len, d}, rng, -1, 1);
        const auto dskip = uniform({d}, rng, -1, 1);
        const auto abt = Tensor<double>::from({len, d, n}, ab);
        const auto bbt = Tensor<double>::from({len, d, n}, bb);
        const auto ct = Tensor<double>::from({len, n}, cs);
        const auto r = recurrent_scan(x, abt, bbt, ct, dskip);
        const auto k = lti_conv_scan(x, abt, bbt, ct, dskip);
        for (std::size_t i = 0; i < r.numel(); ++i) worst = std::max(worst, std::abs(r.data()[i] - k.data()[i]));
    }
    const double secs = seconds_since(t0);
    return {worst < 1e-10 && secs < 10, "max |diff| " + fmt(worst) + ", " + fmt(secs) + " s"};
}

Verdict zoh_closed_form() {
    const auto z = zoh_discretize(-1.0, 1.0, std::log(2.0));
    const double ea = std::abs(z.a_bar - 0.5), eb = std::abs(z.b_bar - 0.5);
    const double below = zoh_discretize(-1.0, 1.0, std::nextafter(kZohLimitThreshold, 0.0)).b_bar;
    const double above = zoh_discretize(-1.0, 1.0, std::nextafter(kZohLimitThreshold, 1.0)).b_bar;
    const double jump = std::abs(above - below);
    return {ea < 1e-12 && eb < 1e-12 && jump < 1e-9,
            "|A_bar-0.5| " + fmt(ea) + ", |B_bar-0.5| " + fmt(eb) + ", jump at switch " + fmt(jump)};
}

Verdict ss2d_identity() {
    Rng rng(303);
    int exact = 0;
    for (int trial = 0; trial < 100; ++trial) {
        const auto h = static_cast<std::int64_t>(rng.below(16)) + 1;
        const auto w = static_cast<std::int64_t>(rng.below(16)) + 1;
        std::vector<double> v(static_cast<std::size_t>(h * w * 3));
        for (auto& x : v) x = static_cast<double>(static_cast<std::int64_t>(rng.below(2001)) - 1000);
        const auto x = Tensor<double>::from({1, h, w, 3}, v);
        const auto r = scan_expand(x);
        const auto m = scan_merge(r.sequences, r.maps);
        bool ok = m.shape() == x.shape();
        for (std::size_t i = 0; ok && i < v.size(); ++i) ok = m.data()[i] == 4 * v[i];
        exact += ok;
    }
    return {exact == 100, std::to_string(exact) + "/100 trials exact"};
}

Verdict gradient_suite(const fs::path& work) {
    const auto t0 = Clock::now();
    const auto dir = work / "gradcheck";
    const int code = invoke({"gradcheck", "-o", dir.string()});
    const double secs = seconds_since(t0);
    const auto rows = csv_rows(dir / "gradcheck.csv");
    double worst = 0;
    for (std::size_t i = 1; i < rows.size(); ++i) worst = std::max(worst, std::stod(rows.at(i).at(4)));
    const auto checked = rows.empty() ? 0 : rows.size() - 1;
    const bool ok = code == 0 && checked >= 100 && worst < 1e-3 && secs < 300;
    return {ok, std::to_string(checked) + " parameters, max rel error " + fmt(worst) + ", " + fmt(secs) + " s"};
}

Verdict shape_chain() {
    MedMamba<float> model(ModelConfig{}, 0);
    Rng rng(505);
    std::vector<float> px(3 * 224 * 224);
    for (auto& v : px) v = static_cast<float>(rng.uniform(-1, 1));
    ForwardTrace trace;
    NoGradGuard guard;
    const auto logits = model.forward(Tensor<float>::from({1, 3, 224, 224}, px), NormMode::train, &trace);
    const std::vector<Shape> expect{{1, 96, 56, 56}, {1, 192, 28, 28}, {1, 384, 14, 14}, {1, 768, 7, 7}};
    std::string chain;
    for (const auto& s : trace.stage_outputs) chain += (chain.empty() ? "" : " -> ") + shape_str(s);
    return {trace.stage_outputs == expect && logits.shape() == Shape{1, 2}, chain};
}

Verdict linear_scaling(const fs::path& work) {
    const auto dir = work / "bench";
    const int code = invoke({"bench-scan", "--lengths", "1024,2048,4096,8192", "--repeats", "5", "-o", dir.string()});
    const auto rows = csv_rows(dir / "scan_timing.csv");
    bool ok = code == 0 && rows.size() == 5;
    std::string ratios;
    for (std::size_t i = 2; ok && i < rows.size(); ++i) {
        const double r = std::stod(rows[i].at(2));
        ok = r <= 2.5;
        ratios += (ratios.empty() ? "" : ", ") + fmt(r);
    }
    return {ok, "doubling ratios " + ratios};
}

Verdict scaled_training(const fs::path& work) {
    const auto t0 = Clock::now();
    const auto data = work / "stripes.mmpk";
    std::string err;
    if (invoke({"synth", "-o", data.string(), "--count", "200", "--size", "64", "--seed", "0"}, &err) != 0) {
        return {false, "synth failed: " + err};
    }
    const auto cfg = work / "scaled.json";
    std::ofstream(cfg) << json{{"model", {{"base_dim", 24}, {"depths", {1, 1, 2, 1}}, {"input_size", 64}}},
                               {"training", {{"epochs", 10}, {"batch_size", 16}, {"protocol", "holdout"}, {"seed", 0}}},
                               {"data", {{"path", data.string()}}},
                               {"output_dir", (work / "scaled").string()}}
                              .dump();
    if (invoke({"train", "-c", cfg.string()}, &err) != 0) {
        return {false, "train failed: " + err};
    }
    const double secs = seconds_since(t0);
    const double acc = macro_accuracy(work / "scaled" / "metrics.csv");
    return {acc >= 0.95 && secs < 300, "test accuracy " + fmt(acc) + ", " + fmt(secs) + " s"};
}

Verdict metrics_oracle() {
    const auto cm = ConfusionMatrix::from_counts(2, {8, 2, 3, 7});
    std::vector<double> scores;
    std::vector<std::int64_t> labels;
    for (std::int64_t t = 0; t < 2; ++t)
        for (std::int64_t p = 0; p < 2; ++p)
            for (std::int64_t i = 0; i < cm.at(t, p); ++i) {
                scores.push_back(p == 0 ? 1.0 : 0.0);
                scores.push_back(p == 0 ? 0.0 : 1.0);
                labels.push_back(t);
            }
    const auto r = compute_metrics(cm, scores, labels);
    const auto& c0 = r.per_class[0];
    const double prec = 8.0 / 11.0, sens = 8.0 / 10.0;
    const bool exact = c0.precision == prec && c0.sensitivity == sens && c0.specificity == 7.0 / 10.0 &&
                       c0.f1 == 2 * prec * sens / (prec + sens) && r.accuracy == 15.0 / 20.0;

    ConfusionMatrix flat(3);
    std::vector<std::int64_t> fl{0, 1, 2, 2, 1, 0};
    for (auto l : fl) flat.add(l, 0);
    const auto u = compute_metrics(flat, std::vector<double>(18, 1.0 / 3.0), fl);
    const double auc_err = std::abs(u.macro.auc - 0.5);

    double ce_err = 0;
    for (std::int64_t k : {2, 4, 7}) {
        const std::vector<std::int64_t> lab{0, k - 1};
        const auto ce = cross_entropy(Tensor<double>::zeros({2, k}), std::span<const std::int64_t>(lab)).item();
        ce_err = std::max(ce_err, std::abs(ce - std::log(static_cast<double>(k))));
    }
    return {exact && auc_err < 1e-9 && ce_err < 1e-9,
            std::string(exact ? "confusion metrics exact" : "confusion metrics differ") + ", |auc-0.5| " +
                fmt(auc_err) + ", |ce-ln K| " + fmt(ce_err)};
}

Verdict protocol_fidelity(const fs::path& work) {
    const auto data = work / "protocol.mmpk";
    invoke({"synth", "-o", data.string(), "--count", "40", "--size", "16", "--seed", "1"});
    const auto cfg = work / "protocol.json";
    std::ofstream(cfg) << json{{"model", {{"base_dim", 8}, {"depths", {1, 1, 1, 1}}, {"state_size", 4}, {"input_size", 16}}},
                               {"training", {{"epochs", 1}}},
                               {"data", {{"path", data.string()}}},
                               {"output_dir", (work / "protocol").string()}}
                              .dump();
    std::string err;
    if (invoke({"train", "-c", cfg.string()}, &err) != 0) {
        return {false, "train failed: " + err};
    }
    const auto j = json::parse(slurp(work / "protocol" / "config.json"));
    const auto& t = j.at("training");
    const bool ok = t.at("lr") == 0.001 && t.at("beta1") == 0.9 && t.at("beta2") == 0.999 &&
                    t.at("weight_decay") == 1e-4 && t.at("batch_size") == 64 && t.at("epochs") <= 100 &&
                    t.at("folds") == 5 && t.at("protocol") == "cv";
    return {ok, t.dump()};
}

Verdict real_data(const fs::path& work, const std::string& packed) {
    const auto cfg = work / "real.json";
    std::ofstream(cfg) << json{{"model", {{"base_dim", 24}, {"depths", {1, 1, 2, 1}}, {"input_size", 64}}},
                               {"training", {{"protocol", "holdout"}, {"seed", 0}}},
                               {"data", {{"path", packed}}},
                               {"output_dir", (work / "real").string()}}
                              .dump();
    std::string err;
    if (invoke({"train", "-c", cfg.string()}, &err) != 0) {
        return {false, "train failed: " + err};
    }
    const double acc = macro_accuracy(work / "real" / "metrics.csv");
    return {acc >= 0.78, "test accuracy " + fmt(acc)};
}

} // namespace

int main() {
    const auto work = fs::temp_directory_path() / ("medmamba_acceptance_" + std::to_string(::getpid()));
    fs::remove_all(work);
    fs::create_directories(work);

    struct Criterion {
        int id;
        std::string name;
        std::function<Verdict()> check;
    };
    const std::vector<Criterion> criteria{
        {1, "recurrence and convolution agree on 50 LTI systems", lti_equivalence},
        {2, "ZOH closed form and small-step continuity", zoh_closed_form},
        {3, "scan merge of scan expand equals 4X", ss2d_identity},
        {4, "gradcheck on the tiny config", [&] { return gradient_suite(work); }},
        {5, "default 224x224 stage shape chain", shape_chain},
        {6, "selective scan time scales linearly", [&] { return linear_scaling(work); }},
        {7, "stripes training reaches 0.95 test accuracy", [&] { return scaled_training(work); }},
        {8, "metrics, AUC and cross-entropy oracles", metrics_oracle},
        {9, "resolved training config carries the default protocol", [&] { return protocol_fidelity(work); }},
    };

    int failures = 0;
    for (const auto& c : criteria) {
        Verdict v;
        try {
            v = c.check();
        } catch (const std::exception& e) {
            v = {false, std::string("exception: ") + e.what()};
        }
        failures += !v.pass;
        std::cout << (v.pass ? "PASS" : "FAIL") << " criterion " << c.id << ": " << c.name << " (" << v.detail << ")"
                  << std::endl;
    }

    if (const char* packed = std::getenv("MEDMAMBA_ACCEPTANCE_PACKED"); packed && *packed) {
        Verdict v;
        try {
            v = real_data(work, packed);
        } catch (const std::exception& e) {
            v = {false, std::string("exception: ") + e.what()};
        }
        std::cout << (v.pass ? "PASS" : "FAIL") << " criterion 10: user dataset reaches 0.78 test accuracy ("
                  << v.detail << ")" << std::endl;
    } else {
        std::cout << "SKIP criterion 10: set MEDMAMBA_ACCEPTANCE_PACKED to a packed binary dataset" << std::endl;
    }

    std::error_code ec;
    fs::remove_all(work, ec);
    return failures == 0 ? 0 : 1;
}
