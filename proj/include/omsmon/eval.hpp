#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "omsmon/monitors.hpp"
#include "omsmon/nn.hpp"
#include "omsmon/trace.hpp"

namespace omsmon {

struct LabeledInputs {
    std::vector<Vector> inputs;
    std::vector<int> labels;
    std::vector<std::string> ids;
};

/// Class-conditional Gaussian-mixture task.
struct SyntheticSpec {
    std::size_t classes = 3;
    std::size_t input_dim = 2;
    std::size_t modes_per_class = 1;
    std::size_t samples = 3000;
    std::uint64_t seed = 0;
    double separation = 8.0;   ///< minimum distance between any two mode centers, in mode stddevs
    double mode_stddev = 1.0;
    std::vector<std::size_t> hidden{32, 16};
    std::vector<double> fractions{0.64, 0.16, 0.2};  ///< train / calib / test; train:calib is 80:20
};

struct SyntheticTask {
    NeuralNet net;
    TraceMeta meta;
    TraceSet train;
    TraceSet calib;
    TraceSet test;
    LabeledInputs train_inputs;
    LabeledInputs calib_inputs;
    LabeledInputs test_inputs;
    std::vector<Vector> mode_centers;
    std::vector<int> mode_labels;
    double train_accuracy = 0.0;
    double test_accuracy = 0.0;
    double final_loss = 0.0;
};

/// Trace meta listing Z<l> and A<l> for every hidden layer of `net`
/// (numbered from 2, the input being layer 1).
TraceMeta hidden_layer_meta(const NeuralNet& net, std::size_t class_count, std::string source);

/// Forwards x and records the layers named in `meta`.
TraceSample record_sample(const NeuralNet& net, const TraceMeta& meta, std::string id, const Vector& x, int true_label,
                          std::set<std::string> tags = {});

/// Draws the mixture, trains a 2-hidden-layer ReLU classifier on the train
/// split and records traces for every split.
SyntheticTask make_synthetic_task(const SyntheticSpec& spec, const TrainHyper& trainer);

/// Inputs placed at least 6 mode stddevs away from every mode center.
std::vector<Vector> make_novelty_inputs(const SyntheticTask& task, double mode_stddev, std::size_t count,
                                        std::uint64_t seed);

enum class PerturbationKind { gaussian_noise, salt_and_pepper, contrast, invert, light, rotate };

struct Perturbation {
    PerturbationKind kind = PerturbationKind::gaussian_noise;
    double parameter = 0.0;  ///< sigma, p, c, (unused), b, theta in radians

    /// e.g. "gaussian_noise:0.5" or "invert"
    std::string name() const;
};

/// Parses "kind[:parameter]".
Perturbation parse_perturbation(std::string_view text);

/// Feature-space analogues of image perturbations. Dataset statistics
/// (per-dimension min/max, principal axes) come from `inputs` itself.
std::vector<Vector> perturb(std::span<const Vector> inputs, const Perturbation& perturbation, std::uint64_t seed);

struct OmsCategory {
    std::string name;
    TraceSet samples;
};

/// Builds the OMS categories: "wrong_id" (misclassified ID test samples),
/// one category per perturbation keeping only mispredicted inputs, and
/// "novelty" with every novelty input. Empty categories are dropped with a
/// warning. Novelty samples carry true_label = pred_label and the tag
/// "novelty": they have no in-scope label.
std::vector<OmsCategory> build_oms_sets(const NeuralNet& net, const TraceMeta& meta, const LabeledInputs& id_test,
                                        std::span<const Vector> novelty_inputs,
                                        std::span<const Perturbation> perturbation_grid, std::uint64_t seed,
                                        const WarningSink& warn = {});

/// Fraction of the category's samples that raise an alarm.
double tpr(const MonitorModel& model, const TraceSet& category);
double tpr(const MonitorModel& model, const OmsCategory& category);

/// Fraction of samples accepted.
double acceptance_rate(const MonitorModel& model, const TraceSet& samples);

struct MonitorResult {
    std::string label;
    std::vector<std::pair<std::string, double>> tpr;  ///< category -> TPR in [0, 1]
    std::optional<double> calibration_acceptance;
};

struct EvalReport {
    std::vector<std::string> configs;
    std::vector<std::string> categories;
    /// cells[category][config]; empty when a config lacks the category.
    std::vector<std::vector<std::optional<double>>> cells;
    std::vector<std::optional<double>> calibration_acceptance;
    std::map<std::string, std::size_t> counts;
};

/// Collects results; categories keep first-appearance order, configs input order.
EvalReport report(std::span<const MonitorResult> results, const std::map<std::string, std::size_t>& counts = {});

/// Percentage with two decimals, e.g. 0.21714 -> "21.71".
std::string format_percent(double rate);
std::string render_table(const EvalReport& report);
std::string render_csv(const EvalReport& report);
/// Inverse of render_csv; values come back as rates (percent / 100).
std::vector<MonitorResult> parse_csv(const std::string& text);

}  // namespace omsmon
