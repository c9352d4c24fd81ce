#include "cli.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "omsmon/error.hpp"
#include "omsmon/eval.hpp"
#include "omsmon/monitors.hpp"
#include "omsmon/nn.hpp"
#include "omsmon/selection.hpp"
#include "omsmon/trace.hpp"

namespace omsmon::cli {
namespace fs = std::filesystem;

namespace {

struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

const std::string kDefaultPerturbations =
    "gaussian_noise:1.5,salt_and_pepper:0.3,contrast:0.2,invert,light:0.4,rotate:0.8";

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream file(path, std::ios::binary);
    if (!file) throw IoError("cannot open '" + path.string() + "' for writing");
    file << text;
    if (!file.flush()) throw IoError("write error in '" + path.string() + "'");
}

std::string read_text(const fs::path& path) {
    std::ifstream file(path, std::ios::binary);
    if (!file) throw IoError("cannot open '" + path.string() + "'");
    std::ostringstream text;
    text << file.rdbuf();
    return text.str();
}

std::string default_layer(const TraceMeta& meta) {
    for (auto it = meta.layers.rbegin(); it != meta.layers.rend(); ++it) {
        if (it->quantity == Quantity::pre_activation) return it->name;
    }
    if (meta.layers.empty()) throw SchemaError("trace meta lists no layers");
    return meta.layers.back().name;
}

std::string file_safe(std::string name) {
    std::replace(name.begin(), name.end(), ':', '_');
    return name;
}

// ---------------------------------------------------------------- synth

struct SynthArgs {
    SyntheticSpec spec;
    TrainHyper trainer;
    std::size_t novelty = 300;
    std::vector<std::string> perturbations;
    bool gzip = false;
    std::string out;
};

void add_synth(CLI::App& app, SynthArgs& a) {
    auto* cmd = app.add_subcommand("synth", "Generate a synthetic task: classifier, ID traces and OMS traces");
    cmd->add_option("--classes", a.spec.classes, "Number of classes")->capture_default_str()->check(CLI::Range(2, 1000));
    cmd->add_option("--dim", a.spec.input_dim, "Input dimension")->capture_default_str()->check(CLI::Range(1, 10000));
    cmd->add_option("--modes", a.spec.modes_per_class, "Gaussian modes per class")
        ->capture_default_str()
        ->check(CLI::Range(1, 1000));
    cmd->add_option("--samples", a.spec.samples, "Total ID samples")->capture_default_str();
    cmd->add_option("--seed", a.spec.seed, "Seed for every random choice")->capture_default_str();
    cmd->add_option("--separation", a.spec.separation, "Minimum mode-center distance in mode stddevs")
        ->capture_default_str();
    cmd->add_option("--mode-stddev", a.spec.mode_stddev, "Per-coordinate stddev of each mode")->capture_default_str();
    cmd->add_option("--hidden", a.spec.hidden, "Widths of the two hidden layers")
        ->delimiter(',')
        ->expected(2)
        ->capture_default_str();
    cmd->add_option("--split", a.spec.fractions, "Train, calibration and test fractions")
        ->delimiter(',')
        ->expected(3)
        ->capture_default_str();
    cmd->add_option("--epochs", a.trainer.epochs, "Classifier training epochs")->capture_default_str();
    cmd->add_option("--lr", a.trainer.learning_rate, "Classifier learning rate")->capture_default_str();
    cmd->add_option("--batch", a.trainer.batch_size, "Mini-batch size")->capture_default_str();
    cmd->add_option("--novelty", a.novelty, "Number of novelty inputs")->capture_default_str();
    cmd->add_option("--perturb", a.perturbations,
                    "Comma-separated perturbations kind[:param]; kinds: gaussian_noise, salt_and_pepper, contrast, "
                    "invert, light, rotate")
        ->delimiter(',')
        ->default_str(kDefaultPerturbations);
    cmd->add_flag("--gzip", a.gzip, "Write gzip-compressed trace files");
    cmd->add_option("--out", a.out, "Output directory")->required();
}

int run_synth(SynthArgs& a, std::ostream& out, std::ostream& err) {
    if (a.perturbations.empty()) {
        std::stringstream list(kDefaultPerturbations);
        for (std::string item; std::getline(list, item, ',');) a.perturbations.push_back(item);
    }
    std::vector<Perturbation> grid;
    for (const auto& text : a.perturbations) {
        try {
            grid.push_back(parse_perturbation(text));
        } catch (const InvalidParameter& e) {
            throw UsageError(std::string("--perturb: ") + e.what());
        }
    }
    if (a.spec.samples < a.spec.classes) throw UsageError("--samples must be at least --classes");
    if (!(a.spec.separation > 0.0) || !(a.spec.mode_stddev > 0.0)) {
        throw UsageError("--separation and --mode-stddev must be positive");
    }
    double split_total = 0.0;
    for (double f : a.spec.fractions) {
        if (!(f > 0.0)) throw UsageError("--split fractions must be positive");
        split_total += f;
    }
    if (std::abs(split_total - 1.0) > 1e-9) throw UsageError("--split fractions must sum to 1");
    if (a.trainer.epochs == 0 || a.trainer.batch_size == 0 || !(a.trainer.learning_rate > 0.0)) {
        throw UsageError("--epochs, --batch and --lr must be positive");
    }
    a.trainer.seed = a.spec.seed;

    const SyntheticTask task = make_synthetic_task(a.spec, a.trainer);
    const auto novelty = make_novelty_inputs(task, a.spec.mode_stddev, a.novelty, a.spec.seed + 1);
    auto warn = [&](const std::string& message) { err << "warning: " << message << '\n'; };
    const auto categories =
        build_oms_sets(task.net, task.meta, task.test_inputs, novelty, grid, a.spec.seed + 2, warn);

    const fs::path dir(a.out);
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw IoError("cannot create '" + dir.string() + "': " + ec.message());
    const std::string ext = a.gzip ? ".jsonl.gz" : ".jsonl";

    save_net(task.net, dir / "net.json");
    save_traces(task.train, dir / ("train" + ext));
    save_traces(task.calib, dir / ("calib" + ext));
    save_traces(task.test, dir / ("test" + ext));
    out << "classifier: train accuracy " << format_percent(task.train_accuracy) << "%, test accuracy "
        << format_percent(task.test_accuracy) << "%\n";
    out << "train " << task.train.samples.size() << ", calib " << task.calib.samples.size() << ", test "
        << task.test.samples.size() << '\n';
    for (const auto& category : categories) {
        const fs::path path = dir / ("oms_" + file_safe(category.name) + ext);
        save_traces(category.samples, path);
        out << category.name << ": " << category.samples.samples.size() << " samples -> " << path.filename().string()
            << '\n';
    }
    return ok;
}

// ---------------------------------------------------------------- train

struct TrainArgs {
    std::string traces;
    std::string layer;
    std::string kind = "clustered_gaussian";
    std::size_t k = 1;
    double kappa = 2.0;
    double gamma = 0.0;
    double ridge = 1e-6;
    std::uint64_t seed = 0;
    std::string mask;
    std::string out;
    CLI::Option* kappa_opt = nullptr;
    CLI::Option* gamma_opt = nullptr;
    CLI::Option* ridge_opt = nullptr;
    CLI::Option* k_opt = nullptr;
};

void add_train(CLI::App& app, TrainArgs& a) {
    auto* cmd = app.add_subcommand("train", "Train an uncalibrated monitor from correctly classified training traces");
    cmd->add_option("--traces", a.traces, "Training trace file (JSONL, optionally gzip)")->required();
    cmd->add_option("--layer", a.layer, "Monitored layer (default: last hidden pre-activation layer)");
    cmd->add_option("--kind", a.kind, "Monitor kind")
        ->check(CLI::IsMember({"gaussian", "box", "clustered_gaussian", "multivariate_gaussian"}))
        ->capture_default_str();
    a.k_opt = cmd->add_option("--k", a.k, "Clusters per class (K-Means)")->check(CLI::PositiveNumber)->capture_default_str();
    a.kappa_opt = cmd->add_option("--kappa", a.kappa, "Interval half-width in stddevs (Gaussian kinds)")
                      ->check(CLI::PositiveNumber)
                      ->capture_default_str();
    a.gamma_opt = cmd->add_option("--gamma", a.gamma, "Box enlargement factor (box kind)")
                      ->check(CLI::NonNegativeNumber)
                      ->capture_default_str();
    a.ridge_opt = cmd->add_option("--ridge", a.ridge, "Covariance ridge (multivariate kind)")
                      ->check(CLI::NonNegativeNumber)
                      ->capture_default_str();
    cmd->add_option("--seed", a.seed, "K-Means seed")->capture_default_str();
    cmd->add_option("--mask", a.mask, "Neuron selection mask JSON");
    cmd->add_option("--out", a.out, "Model output path")->required();
}

int run_train(const TrainArgs& a, std::ostream& out, std::ostream& err) {
    MonitorConfig config;
    config.kind = parse_monitor_kind(a.kind);
    if (a.gamma_opt->count() > 0 && config.kind != MonitorKind::box) {
        throw UsageError("--gamma only applies to --kind box");
    }
    if (a.kappa_opt->count() > 0 && (config.kind == MonitorKind::box || config.kind == MonitorKind::multivariate_gaussian)) {
        throw UsageError("--kappa only applies to the Gaussian interval kinds");
    }
    if (a.ridge_opt->count() > 0 && config.kind != MonitorKind::multivariate_gaussian) {
        throw UsageError("--ridge only applies to --kind multivariate_gaussian");
    }
    if (config.kind == MonitorKind::gaussian && a.k != 1) {
        throw UsageError("--kind gaussian is unclustered; use clustered_gaussian for --k > 1");
    }
    config.clusters_per_class = a.k;
    config.kappa = a.kappa;
    config.gamma = a.gamma;
    config.ridge = a.ridge;
    config.seed = a.seed;

    const TraceSet traces = load_traces(a.traces);
    config.layer = a.layer.empty() ? default_layer(traces.meta) : a.layer;
    if (!a.mask.empty()) {
        config.mask = load_mask(a.mask);
        if (config.mask->layer != config.layer) {
            throw SchemaError("mask is for layer '" + config.mask->layer + "', monitor uses '" + config.layer + "'");
        }
    }
    const TraceSet train = filter_correct(traces);
    auto warn = [&](const std::string& message) { err << "warning: " << message << '\n'; };
    const MonitorModel model = train_monitor(config, train, warn);
    save_model(model, a.out);
    out << "trained " << to_string(config.kind) << " monitor on layer " << config.layer << " ("
        << train.samples.size() << " of " << traces.samples.size() << " samples correctly classified) -> " << a.out
        << '\n';
    return ok;
}

// ---------------------------------------------------------------- calibrate

struct CalibrateArgs {
    std::string model;
    std::string traces;
    double target = 0.9;
    std::string out;
};

void add_calibrate(CLI::App& app, CalibrateArgs& a) {
    auto* cmd = app.add_subcommand("calibrate", "Set the monitor threshold on held-out ID traces");
    cmd->add_option("--model", a.model, "Model from 'train'")->required();
    cmd->add_option("--traces", a.traces, "Calibration trace file, disjoint from the training traces")->required();
    cmd->add_option("--target-accept", a.target, "Fraction of correctly classified calibration samples to accept")
        ->check(CLI::Range(0.0, 1.0))
        ->capture_default_str();
    cmd->add_option("--out", a.out, "Output model path (default: overwrite --model)");
}

int run_calibrate(const CalibrateArgs& a, std::ostream& out) {
    const MonitorModel model = calibrate(load_model(a.model), load_traces(a.traces), a.target);
    const TraceSet correct = filter_correct(load_traces(a.traces));
    const double accepted = acceptance_rate(model, correct);
    const std::string target = a.out.empty() ? a.model : a.out;
    save_model(model, target);
    out << "threshold " << (model.threshold->kind == ThresholdKind::distance ? "distance " : "vote_fraction ")
        << model.threshold->value << '\n';
    out << "calibration acceptance " << format_percent(accepted) << "% (target " << format_percent(a.target)
        << "%) -> " << target << '\n';
    return ok;
}

// ---------------------------------------------------------------- select

struct SelectArgs {
    std::string net;
    std::string traces;
    std::string layer;
    double fraction = 0.25;
    std::string scorer = "original_nn";
    std::uint64_t seed = 0;
    std::size_t epochs = 60;
    std::string scores_out;
    std::string out;
};

void add_select(CLI::App& app, SelectArgs& a) {
    auto* cmd = app.add_subcommand("select", "Select the most relevant neurons per class");
    cmd->add_option("--net", a.net, "Monitored network JSON (required for --scorer original_nn)");
    cmd->add_option("--traces", a.traces, "Training trace file")->required();
    cmd->add_option("--layer", a.layer, "Layer to select from (default: last hidden pre-activation layer)");
    cmd->add_option("--fraction", a.fraction, "Fraction of neurons kept per class")
        ->check(CLI::Range(0.0, 1.0))
        ->capture_default_str();
    cmd->add_option("--scorer", a.scorer, "Gradient source for the relevance scores")
        ->check(CLI::IsMember({"original_nn", "monitoring_nn"}))
        ->capture_default_str();
    cmd->add_option("--seed", a.seed, "Seed for the monitoring networks")->capture_default_str();
    cmd->add_option("--epochs", a.epochs, "Training epochs of each monitoring network")->capture_default_str();
    cmd->add_option("--scores-out", a.scores_out, "Also write the score table JSON here");
    cmd->add_option("--out", a.out, "Mask output path")->required();
}

int run_select(const SelectArgs& a, std::ostream& out) {
    if (!(a.fraction > 0.0)) throw UsageError("--fraction must be in (0, 1]");
    if (a.scorer == "original_nn" && a.net.empty()) throw UsageError("--scorer original_nn needs --net");
    if (a.epochs == 0) throw UsageError("--epochs must be positive");

    const TraceSet traces = load_traces(a.traces);
    const std::string layer = a.layer.empty() ? default_layer(traces.meta) : a.layer;
    traces.meta.layer(layer);

    AbsScoreTable table;
    if (a.scorer == "original_nn") {
        const NeuralNet net = load_net(a.net);
        table = abs_scores_from_traces(net, traces, layer, net_layer_index(layer));
    } else {
        MonitoringNetHyper hyper;
        hyper.seed = a.seed;
        hyper.epochs = a.epochs;
        std::vector<std::optional<NeuralNet>> nets;
        for (std::size_t c = 0; c < traces.meta.class_count; ++c) {
            nets.emplace_back(train_monitoring_nn(traces, layer, static_cast<int>(c), hyper).net);
        }
        table = abs_scores_via_monitoring_nn(nets, traces, layer);
    }
    if (!a.scores_out.empty()) write_text(a.scores_out, table_to_json(table));
    const SelectionMask mask = select_top_fraction(table, a.fraction);
    save_mask(mask, a.out);
    out << "selected " << mask.classes.front().size() << " of " << mask.layer_dim << " neurons per class on layer "
        << layer << " (" << a.scorer << ") -> " << a.out << '\n';
    return ok;
}

// ---------------------------------------------------------------- evaluate

struct EvaluateArgs {
    std::string model;
    std::vector<std::string> traces;
    std::string verdicts;
    std::string csv;
    std::string label;
};

void add_evaluate(CLI::App& app, EvaluateArgs& a) {
    auto* cmd = app.add_subcommand("evaluate", "Run a calibrated monitor over trace files");
    cmd->add_option("--model", a.model, "Calibrated model")->required();
    cmd->add_option("--traces", a.traces,
                    "Trace files; files whose samples are all OMS-tagged count as OMS categories, others as ID")
        ->required();
    cmd->add_option("--verdicts", a.verdicts, "Per-sample verdict JSONL output");
    cmd->add_option("--csv", a.csv, "Report CSV output (OMS categories only)");
    cmd->add_option("--label", a.label, "Column label for the report (default: kind and k)");
}

std::optional<std::string> oms_category(const TraceSet& set) {
    if (set.samples.empty()) return std::nullopt;
    std::optional<std::string> name;
    for (const auto& sample : set.samples) {
        std::optional<std::string> tag;
        for (const auto& t : sample.tags) {
            if (t.rfind("oms:", 0) == 0) tag = t.substr(4);
        }
        if (!tag) return std::nullopt;
        if (!name) name = tag;
        else if (*name != *tag) return std::nullopt;
    }
    return name;
}

int run_evaluate(const EvaluateArgs& a, std::ostream& out) {
    const MonitorModel model = load_model(a.model);
    if (!model.threshold) throw NotCalibrated("model '" + a.model + "' has no threshold; run 'calibrate' first");
    MonitorResult result;
    result.label = a.label.empty()
                       ? std::string(to_string(model.config.kind)) + "_k" + std::to_string(model.config.clusters_per_class)
                       : a.label;
    std::map<std::string, std::size_t> counts;

    std::ofstream verdicts;
    if (!a.verdicts.empty()) {
        verdicts.open(a.verdicts, std::ios::binary);
        if (!verdicts) throw IoError("cannot open '" + a.verdicts + "' for writing");
    }

    for (const auto& path : a.traces) {
        const TraceSet set = load_traces(path);
        const auto category = oms_category(set);
        const std::string name = category ? *category : fs::path(path).filename().string();
        std::size_t alarms = 0;
        std::size_t correct = 0;
        std::size_t correct_accepted = 0;
        for (const auto& sample : set.samples) {
            const Verdict verdict = evaluate(model, sample);
            const bool alarm = verdict.decision == Decision::alarm;
            alarms += alarm ? 1 : 0;
            if (sample.correct()) {
                ++correct;
                correct_accepted += alarm ? 0 : 1;
            }
            if (verdicts.is_open()) {
                nlohmann::ordered_json line;
                line["file"] = name;
                line["id"] = sample.id;
                line["true_label"] = sample.true_label;
                line["pred_label"] = sample.pred_label;
                line["decision"] = alarm ? "alarm" : "accept";
                line["score"] = std::isfinite(verdict.score) ? nlohmann::ordered_json(verdict.score)
                                                             : nlohmann::ordered_json(nullptr);
                line["best_cluster"] =
                    verdict.best_cluster ? nlohmann::ordered_json(*verdict.best_cluster) : nlohmann::ordered_json(nullptr);
                verdicts << line.dump() << '\n';
            }
        }
        const double n = static_cast<double>(set.samples.size());
        if (category) {
            const double rate = static_cast<double>(alarms) / n;
            result.tpr.emplace_back(name, rate);
            counts[name] = set.samples.size();
            out << name << ": n=" << set.samples.size() << " alarms=" << alarms << " tpr=" << format_percent(rate)
                << "%\n";
        } else if (correct > 0) {
            const double acceptance = static_cast<double>(correct_accepted) / static_cast<double>(correct);
            if (!result.calibration_acceptance) result.calibration_acceptance = acceptance;
            out << name << ": n=" << set.samples.size() << " correct=" << correct << " acceptance="
                << format_percent(acceptance) << "% alarm_rate=" << format_percent(static_cast<double>(alarms) / std::max(n, 1.0))
                << "%\n";
        } else {
            out << name << ": n=" << set.samples.size() << " (no correctly classified samples)\n";
        }
    }
    if (verdicts.is_open() && !verdicts.flush()) throw IoError("write error in '" + a.verdicts + "'");

    const std::vector<MonitorResult> results{result};
    const EvalReport table = report(results, counts);
    if (!table.categories.empty()) out << '\n' << render_table(table);
    if (!a.csv.empty()) write_text(a.csv, render_csv(table));
    return ok;
}

// ---------------------------------------------------------------- report

struct ReportArgs {
    std::vector<std::string> inputs;
    std::string out;
};

void add_report(CLI::App& app, ReportArgs& a) {
    auto* cmd = app.add_subcommand("report", "Merge report CSVs into one category-by-monitor table");
    cmd->add_option("inputs", a.inputs, "Report CSV files from 'evaluate --csv'")->required();
    cmd->add_option("--out", a.out, "Merged CSV output");
}

int run_report(const ReportArgs& a, std::ostream& out) {
    std::vector<MonitorResult> merged;
    std::map<std::string, int> seen;
    for (const auto& path : a.inputs) {
        for (auto& result : parse_csv(read_text(path))) {
            const int n = ++seen[result.label];
            if (n > 1) result.label += "#" + std::to_string(n);
            merged.push_back(std::move(result));
        }
    }
    const EvalReport table = report(merged);
    out << render_table(table);
    if (!a.out.empty()) write_text(a.out, render_csv(table));
    return ok;
}

CLI::App* parsed_subcommand(CLI::App& app) {
    for (auto* sub : app.get_subcommands()) return sub;
    return nullptr;
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
    CLI::App app{"omsmon: activation monitors for out-of-model-scope detection"};
    app.require_subcommand(1);
    SynthArgs synth;
    TrainArgs train;
    CalibrateArgs calibrate_args;
    SelectArgs select;
    EvaluateArgs evaluate_args;
    ReportArgs report_args;
    add_synth(app, synth);
    add_train(app, train);
    add_calibrate(app, calibrate_args);
    add_select(app, select);
    add_evaluate(app, evaluate_args);
    add_report(app, report_args);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) {
            app.exit(e, out, err);
            return ok;
        }
        err << "UsageError: " << e.what() << '\n';
        CLI::App* sub = parsed_subcommand(app);
        err << (sub != nullptr ? sub->help() : app.help());
        return usage;
    }

    CLI::App* sub = parsed_subcommand(app);
    const std::string name = sub->get_name();
    try {
        if (name == "synth") return run_synth(synth, out, err);
        if (name == "train") return run_train(train, out, err);
        if (name == "calibrate") return run_calibrate(calibrate_args, out);
        if (name == "select") return run_select(select, out);
        if (name == "evaluate") return run_evaluate(evaluate_args, out);
        if (name == "report") return run_report(report_args, out);
    } catch (const UsageError& e) {
        err << "UsageError: " << e.what() << '\n' << sub->help();
        return usage;
    } catch (const Error& e) {
        err << e.kind() << ": " << e.what() << '\n';
        return runtime_failure;
    } catch (const std::exception& e) {
        err << "InternalError: " << e.what() << '\n';
        return runtime_failure;
    }
    return usage;
}

}  // namespace omsmon::cli
