#include "medmamba/cli/commands.hpp"

#include "medmamba/checkpoint.hpp"
#include "medmamba/cli/run_config.hpp"
#include "medmamba/cli/tasks.hpp"
#include "medmamba/data.hpp"
#include "medmamba/errors.hpp"
#include "medmamba/ops.hpp"
#include "medmamba/rng.hpp"
#include "medmamba/train.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <ostream>
#include <sstream>

namespace medmamba::cli {

namespace {

namespace fs = std::filesystem;
using nlohmann::ordered_json;

std::string error_kind(const std::exception& e) {
    if (dynamic_cast<const ConfigError*>(&e)) return "config";
    if (dynamic_cast<const FormatError*>(&e)) return "format";
    if (dynamic_cast<const DimensionError*>(&e)) return "dimension";
    if (dynamic_cast<const DomainError*>(&e)) return "domain";
    if (dynamic_cast<const StateError*>(&e)) return "state";
    if (dynamic_cast<const ContractError*>(&e)) return "contract";
    if (dynamic_cast<const fs::filesystem_error*>(&e)) return "io";
    return "runtime";
}

void report_error(std::ostream& err, const std::string& command, const std::exception& e) {
    err << "error: " << command << ": " << error_kind(e) << ": " << e.what() << '\n';
}

std::ofstream open_out(const fs::path& path) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) {
        throw FormatError("cannot write " + path.string());
    }
    return os;
}

void write_sidecar(const fs::path& dir, const std::string& name, ordered_json options) {
    fs::create_directories(dir);
    ordered_json j;
    j["library_version"] = version();
    j[name] = std::move(options);
    open_out(dir / "config.json") << j.dump(2) << '\n';
}

SampleSet load_dataset(const DataConfig& data) {
    if (data.path.empty()) {
        throw ConfigError("data.path is empty");
    }
    const fs::path path(data.path);
    if (!fs::exists(path)) {
        throw FormatError("dataset path does not exist: " + path.string());
    }
    auto format = data.format;
    if (format == "auto") {
        format = fs::is_directory(path) ? "folder" : "packed";
    }
    auto set = format == "folder" ? load_image_folder(path) : load_packed(path);
    if (set.samples.empty()) {
        throw ConfigError("dataset is empty: " + path.string());
    }
    return set;
}

void check_classes(const SampleSet& set, const ModelConfig& model) {
    if (set.num_classes() != model.num_classes) {
        throw ConfigError("dataset has " + std::to_string(set.num_classes()) + " classes but model.num_classes is " +
                          std::to_string(model.num_classes));
    }
}

std::map<std::string, double> report_metrics(const MetricsReport& r, std::int64_t best_epoch) {
    std::map<std::string, double> m;
    m["fold"] = r.fold;
    m["best_epoch"] = static_cast<double>(best_epoch);
    for (const auto& [name, value] : r.named()) {
        m[name] = value;
    }
    return m;
}

std::vector<MetricSummary> summarize(const std::vector<MetricsReport>& reports) {
    if (reports.size() >= 2) {
        return aggregate_folds(reports);
    }
    std::vector<MetricSummary> out;
    for (const auto& [name, value] : reports.at(0).named()) {
        out.push_back({name, value, 0.0});
    }
    return out;
}

void write_confusion(std::ostream& os, const ConfusionMatrix& m, const std::vector<std::string>& names) {
    os << "true\\predicted";
    for (std::int64_t j = 0; j < m.classes; ++j) {
        os << ',' << names.at(static_cast<std::size_t>(j));
    }
    os << '\n';
    for (std::int64_t i = 0; i < m.classes; ++i) {
        os << names.at(static_cast<std::size_t>(i));
        for (std::int64_t j = 0; j < m.classes; ++j) {
            os << ',' << m.at(i, j);
        }
        os << '\n';
    }
}

std::vector<std::string> class_names_for(const CheckpointMeta& meta) {
    auto names = meta.class_names;
    for (auto k = static_cast<std::int64_t>(names.size()); k < meta.config.num_classes; ++k) {
        names.push_back("class" + std::to_string(k));
    }
    return names;
}

struct ConfigArgs {
    std::string config;
    std::vector<std::string> overrides;
    std::string out;

    RunConfig load() const {
        auto cfg = load_run_config(config, overrides);
        if (!out.empty()) {
            cfg.output_dir = out;
        }
        return cfg;
    }
};

void add_config_args(CLI::App* sub, ConfigArgs& a, bool required) {
    auto* opt = sub->add_option("-c,--config", a.config, "JSON run configuration");
    if (required) {
        opt->required()->check(CLI::ExistingFile);
    } else {
        opt->check(CLI::ExistingFile);
    }
    sub->add_option("-s,--set", a.overrides, "Override a config entry, e.g. training.epochs=10");
    sub->add_option("-o,--out", a.out, "Output directory (overrides output_dir)");
}

int cmd_train(const ConfigArgs& args, std::ostream& out, std::ostream& err) {
    RunConfig cfg;
    try {
        cfg = args.load();
    } catch (const std::exception& e) {
        report_error(err, "train", e);
        return kExitUsage;
    }
    try {
        const auto set = load_dataset(cfg.data);
        check_classes(set, cfg.model);
        const fs::path dir(cfg.output_dir);
        write_resolved_config(cfg, dir);
        if (set.warnings > 0) {
            out << "skipped " << set.warnings << " unreadable files\n";
        }
        const auto data = prepare(set, cfg.model.input_size);
        std::vector<EpochRecord> history;
        std::vector<MetricsReport> reports;
        auto on_epoch = [&](const EpochRecord& r) {
            history.push_back(r);
            out << "fold " << r.fold << " epoch " << r.epoch << std::fixed << std::setprecision(4)
                << " train_loss " << r.train_loss << " train_acc " << r.train_acc << " val_loss " << r.val_loss
                << " val_acc " << r.val_acc << std::defaultfloat << '\n';
        };
        auto on_fold = [&](const FoldResult& r, MedMamba<float>& model) {
            CheckpointMeta meta;
            meta.seed = cfg.training.seed;
            meta.metrics = report_metrics(r.report, r.best_epoch);
            meta.class_names = set.class_names;
            save_checkpoint(model, meta, dir / ("fold" + std::to_string(r.fold) + ".ckpt"));
            reports.push_back(r.report);
            out << "fold " << r.fold << " best_epoch " << r.best_epoch << " test_acc " << r.report.accuracy << '\n';
        };
        if (cfg.protocol == Protocol::cross_validation) {
            cross_validate(cfg.model, data, cfg.training, on_fold, on_epoch);
        } else {
            train_holdout(cfg.model, data, cfg.training, on_fold, on_epoch);
        }
        {
            auto os = open_out(dir / "history.csv");
            write_history_csv(os, history);
        }
        {
            auto os = open_out(dir / "metrics.csv");
            write_metrics_csv(os, reports, set.class_names);
        }
        {
            auto os = open_out(dir / "metrics.txt");
            write_metrics_table(os, reports, set.class_names);
        }
        const auto summary = summarize(reports);
        {
            auto os = open_out(dir / "summary.csv");
            write_summary_csv(os, summary);
        }
        write_metrics_table(out, reports, set.class_names);
        for (const auto& s : summary) {
            out << std::left << std::setw(12) << s.name << std::right << format_mean_std(s) << '\n';
        }
        out << "outputs written to " << dir.string() << '\n';
    } catch (const std::exception& e) {
        report_error(err, "train", e);
        return kExitFailure;
    }
    return kExitOk;
}

struct EvalArgs {
    ConfigArgs config;
    std::string checkpoint;
    int fold = 0;
    std::string split = "all";
};

int cmd_eval(const EvalArgs& args, std::ostream& out, std::ostream& err) {
    RunConfig cfg;
    try {
        cfg = args.config.load();
        if (args.config.out.empty()) {
            cfg.output_dir = (fs::path(cfg.output_dir) / "eval").string();
        }
        if (args.fold < 0 || (args.fold > 0 && args.fold > cfg.training.folds)) {
            throw ConfigError("--fold must lie in [1, training.folds]");
        }
    } catch (const std::exception& e) {
        report_error(err, "eval", e);
        return kExitUsage;
    }
    try {
        auto loaded = load_checkpoint<float>(args.checkpoint, &cfg.model);
        const auto set = load_dataset(cfg.data);
        check_classes(set, cfg.model);
        const auto data = prepare(set, cfg.model.input_size);
        std::vector<std::int64_t> indices;
        if (args.fold > 0) {
            indices = stratified_folds(data.labels, static_cast<int>(cfg.training.folds),
                                       cfg.training.seed)[static_cast<std::size_t>(args.fold - 1)];
        } else {
            for (std::size_t i = 0; i < data.count(); ++i) {
                const auto s = data.splits[i];
                if (args.split == "all" || (args.split == "train" && s == Split::train) ||
                    (args.split == "val" && s == Split::val) || (args.split == "test" && s == Split::test)) {
                    indices.push_back(static_cast<std::int64_t>(i));
                }
            }
        }
        const auto ev = evaluate(loaded.model, data, indices, cfg.training.batch_size);
        const std::vector<MetricsReport> reports{ev.report(args.fold)};
        const fs::path dir(cfg.output_dir);
        write_resolved_config(cfg, dir);
        {
            auto os = open_out(dir / "metrics.csv");
            write_metrics_csv(os, reports, set.class_names);
        }
        {
            auto os = open_out(dir / "metrics.txt");
            write_metrics_table(os, reports, set.class_names);
        }
        {
            auto os = open_out(dir / "confusion.csv");
            write_confusion(os, ev.confusion, set.class_names);
        }
        out << "samples " << indices.size() << " loss " << ev.loss << '\n';
        write_metrics_table(out, reports, set.class_names);
    } catch (const std::exception& e) {
        report_error(err, "eval", e);
        return kExitFailure;
    }
    return kExitOk;
}

int cmd_predict(const std::string& checkpoint, const std::vector<std::string>& images, std::ostream& out,
                std::ostream& err) {
    try {
        auto loaded = load_checkpoint<float>(checkpoint);
        const auto names = class_names_for(loaded.meta);
        std::size_t failures = 0;
        for (const auto& path : images) {
            try {
                const auto image = normalize(resize_bilinear(read_image(path), loaded.meta.config.input_size));
                Tensor<float> logits;
                {
                    NoGradGuard guard;
                    logits = loaded.model.forward(reshape(image, {1, 3, image.dim(1), image.dim(2)}), NormMode::eval);
                }
                const auto k = static_cast<std::size_t>(loaded.meta.config.num_classes);
                const auto v = logits.data();
                const double mx = *std::max_element(v.begin(), v.end());
                std::vector<double> p(k);
                double z = 0;
                for (std::size_t j = 0; j < k; ++j) {
                    p[j] = std::exp(static_cast<double>(v[j]) - mx);
                    z += p[j];
                }
                const auto best = static_cast<std::size_t>(std::max_element(p.begin(), p.end()) - p.begin());
                out << path << '\t' << names[best];
                char buf[32];
                for (auto& q : p) {
                    std::snprintf(buf, sizeof buf, "%.9f", q / z);
                    out << '\t' << buf;
                }
                out << '\n';
            } catch (const FormatError& e) {
                ++failures;
                report_error(err, "predict", e);
            }
        }
        if (failures == images.size()) {
            err << "error: predict: no image could be read\n";
            return kExitFailure;
        }
    } catch (const std::exception& e) {
        report_error(err, "predict", e);
        return kExitFailure;
    }
    return kExitOk;
}

int cmd_synth(const std::string& path, const SynthOptions& o, std::ostream& out, std::ostream& err) {
    try {
        const auto data = synthesize_stripes(o);
        const fs::path file(path);
        if (file.has_parent_path()) {
            fs::create_directories(file.parent_path());
        }
        write_packed(data, file);
        ordered_json j;
        j["library_version"] = version();
        j["synth"] = {{"count", o.count}, {"size", o.size}, {"seed", o.seed}};
        open_out(fs::path(path + ".json")) << j.dump(2) << '\n';
        std::size_t counts[3] = {};
        for (auto s : data.splits) {
            ++counts[s];
        }
        out << "wrote " << data.size() << " samples (" << counts[0] << "/" << counts[1] << "/" << counts[2]
            << " train/val/test) to " << path << '\n';
    } catch (const ConfigError& e) {
        report_error(err, "synth", e);
        return kExitUsage;
    } catch (const std::exception& e) {
        report_error(err, "synth", e);
        return kExitFailure;
    }
    return kExitOk;
}

struct GradcheckArgs {
    ConfigArgs config;
    GradcheckOptions options;
};

int cmd_gradcheck(GradcheckArgs args, std::ostream& out, std::ostream& err) {
    try {
        if (!args.config.config.empty() || !args.config.overrides.empty()) {
            const auto cfg = args.config.load();
            args.options.config = cfg.model;
            args.options.seed = cfg.training.seed;
        }
        args.options.config.validate();
        if (MedMamba<float>(args.options.config).parameter_count() >= kGradcheckMaxParameters) {
            throw ConfigError("gradcheck refuses configs with " + std::to_string(kGradcheckMaxParameters) +
                              " or more parameters; use a tiny config");
        }
    } catch (const std::exception& e) {
        report_error(err, "gradcheck", e);
        return kExitUsage;
    }
    try {
        const auto report = gradcheck(args.options);
        print_gradcheck(out, report);
        if (!args.config.out.empty()) {
            const fs::path dir(args.config.out);
            write_sidecar(dir, "gradcheck",
                          {{"model", ordered_json::parse(args.options.config.to_json())},
                           {"samples", args.options.samples},
                           {"epsilon", args.options.epsilon},
                           {"threshold", args.options.threshold},
                           {"batch", args.options.batch},
                           {"seed", args.options.seed}});
            auto os = open_out(dir / "gradcheck.csv");
            os << "name,index,analytic,numeric,rel_error\n" << std::setprecision(17);
            for (const auto& e : report.entries) {
                os << e.name << ',' << e.index << ',' << e.analytic << ',' << e.numeric << ',' << e.rel_error << '\n';
            }
            auto txt = open_out(dir / "gradcheck.txt");
            print_gradcheck(txt, report);
        }
        return report.passed ? kExitOk : kExitFailure;
    } catch (const std::exception& e) {
        report_error(err, "gradcheck", e);
        return kExitFailure;
    }
}

int cmd_bench_scan(const BenchOptions& o, const std::string& out_dir, std::ostream& out, std::ostream& err) {
    try {
        if (o.lengths.empty() || !std::is_sorted(o.lengths.begin(), o.lengths.end()) || o.repeats < 1) {
            throw ConfigError("--lengths must be ascending and --repeats positive");
        }
    } catch (const std::exception& e) {
        report_error(err, "bench-scan", e);
        return kExitUsage;
    }
    try {
        const auto result = bench_scan(o);
        write_bench_csv(out, result);
        out << "doubling ratios:";
        for (double r : result.ratios) {
            out << ' ' << std::fixed << std::setprecision(3) << r;
        }
        out << std::defaultfloat << '\n';
        if (!out_dir.empty()) {
            const fs::path dir(out_dir);
            write_sidecar(dir, "bench_scan",
                          {{"lengths", o.lengths},
                           {"repeats", o.repeats},
                           {"channels", o.channels},
                           {"state_size", o.state_size},
                           {"seed", o.seed}});
            auto os = open_out(dir / "scan_timing.csv");
            write_bench_csv(os, result);
        }
    } catch (const std::exception& e) {
        report_error(err, "bench-scan", e);
        return kExitFailure;
    }
    return kExitOk;
}

struct ConvertArgs {
    std::string input;
    std::string output;
    std::int64_t size = 28;
    std::uint32_t channels = 3;
    std::uint64_t seed = 0;
};

int cmd_convert(const ConvertArgs& a, std::ostream& out, std::ostream& err) {
    try {
        auto set = load_image_folder(a.input);
        for (auto& s : set.samples) {
            s.image = resize_bilinear(s.image, a.size);
        }
        // Per-class 70/10/20 split tags.
        std::map<std::int64_t, std::vector<std::size_t>> by_class;
        for (std::size_t i = 0; i < set.samples.size(); ++i) {
            by_class[set.samples[i].label].push_back(i);
        }
        Rng rng(a.seed);
        for (auto& [label, members] : by_class) {
            rng.shuffle(members.begin(), members.end());
            const auto n = members.size();
            for (std::size_t j = 0; j < n; ++j) {
                set.samples[members[j]].split = j < n * 7 / 10 ? Split::train : (j < n * 8 / 10 ? Split::val : Split::test);
            }
        }
        const auto packed = pack(set, a.channels);
        const fs::path file(a.output);
        if (file.has_parent_path()) {
            fs::create_directories(file.parent_path());
        }
        write_packed(packed, file);
        ordered_json j;
        j["library_version"] = version();
        j["convert"] = {{"input", a.input}, {"size", a.size}, {"channels", a.channels}, {"seed", a.seed},
                        {"class_names", set.class_names}};
        open_out(fs::path(a.output + ".json")) << j.dump(2) << '\n';
        out << "packed " << packed.size() << " samples of " << set.num_classes() << " classes";
        if (set.warnings > 0) {
            out << " (" << set.warnings << " files skipped)";
        }
        out << " into " << a.output << '\n';
    } catch (const std::exception& e) {
        report_error(err, "convert", e);
        return kExitFailure;
    }
    return kExitOk;
}

} // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"MedMamba: hybrid convolution / state space image classifier", "medmamba"};
    app.set_version_flag("--version", std::string("medmamba ") + version());
    app.require_subcommand(1);

    ConfigArgs train_args;
    auto* train = app.add_subcommand("train", "Train with k-fold cross-validation or a declared holdout split");
    add_config_args(train, train_args, true);

    EvalArgs eval_args;
    auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset");
    add_config_args(eval, eval_args.config, true);
    eval->add_option("-k,--checkpoint", eval_args.checkpoint, "Checkpoint file")->required();
    eval->add_option("--fold", eval_args.fold, "Evaluate on the held-out part of this fold (1-based)");
    eval->add_option("--split", eval_args.split, "Samples to evaluate when no fold is given")
        ->check(CLI::IsMember({"all", "train", "val", "test"}));

    std::string predict_ckpt;
    std::vector<std::string> predict_images;
    auto* predict = app.add_subcommand("predict", "Classify image files");
    predict->add_option("-k,--checkpoint", predict_ckpt, "Checkpoint file")->required();
    predict->add_option("images", predict_images, "PNG or JPEG files")->required();

    std::string synth_out;
    SynthOptions synth_opts;
    auto* synth = app.add_subcommand("synth", "Generate the two-class stripes dataset");
    synth->add_option("-o,--out", synth_out, "Packed output file")->required();
    synth->add_option("--count", synth_opts.count, "Number of samples");
    synth->add_option("--size", synth_opts.size, "Image side length");
    synth->add_option("--seed", synth_opts.seed, "Generator seed");

    GradcheckArgs grad_args;
    auto* grad = app.add_subcommand("gradcheck", "Compare analytic and finite-difference gradients");
    add_config_args(grad, grad_args.config, false);
    grad->add_option("--samples", grad_args.options.samples, "Parameter entries to check");
    grad->add_option("--epsilon", grad_args.options.epsilon, "Central difference step");
    grad->add_option("--threshold", grad_args.options.threshold, "Maximum accepted relative error");
    grad->add_option("--batch", grad_args.options.batch, "Images in the probe batch");
    grad->add_option("--inject-fault", grad_args.options.fault)->group("");

    BenchOptions bench_opts;
    std::string bench_out;
    auto* bench = app.add_subcommand("bench-scan", "Time the selective scan across sequence lengths");
    bench->add_option("--lengths", bench_opts.lengths, "Ascending sequence lengths")->delimiter(',');
    bench->add_option("--repeats", bench_opts.repeats, "Repeats per length (median reported)");
    bench->add_option("--seed", bench_opts.seed, "Input seed");
    bench->add_option("-o,--out", bench_out, "Directory for scan_timing.csv");

    ConvertArgs convert_args;
    auto* convert = app.add_subcommand("convert", "Pack an image folder into the packed format");
    convert->add_option("-i,--input", convert_args.input, "Folder with one subdirectory per class")->required();
    convert->add_option("-o,--out", convert_args.output, "Packed output file")->required();
    convert->add_option("--size", convert_args.size, "Resize images to size x size")->check(CLI::PositiveNumber);
    convert->add_option("--channels", convert_args.channels, "1 or 3")->check(CLI::IsMember({1, 3}));
    convert->add_option("--seed", convert_args.seed, "Split assignment seed");

    std::vector<std::string> reversed(args.rbegin(), args.rend());
    try {
        app.parse(reversed);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? kExitOk : kExitUsage;
    }

    if (*train) return cmd_train(train_args, out, err);
    if (*eval) return cmd_eval(eval_args, out, err);
    if (*predict) return cmd_predict(predict_ckpt, predict_images, out, err);
    if (*synth) return cmd_synth(synth_out, synth_opts, out, err);
    if (*grad) return cmd_gradcheck(grad_args, out, err);
    if (*bench) return cmd_bench_scan(bench_opts, bench_out, out, err);
    if (*convert) return cmd_convert(convert_args, out, err);
    return kExitUsage;
}

} // namespace medmamba::cli
