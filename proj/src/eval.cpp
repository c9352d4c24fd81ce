#include "omsmon/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <random>
#include <sstream>

#include "omsmon/error.hpp"
#include "omsmon/selection.hpp"

namespace omsmon {

TraceMeta hidden_layer_meta(const NeuralNet& net, std::size_t class_count, std::string source) {
    TraceMeta meta;
    meta.class_count = class_count;
    meta.source = std::move(source);
    for (std::size_t l = 0; l + 1 < net.layer_count(); ++l) {
        const std::string number = std::to_string(l + 2);
        const std::size_t dim = net.layers()[l].output_dim();
        meta.layers.push_back({"Z" + number, dim, Quantity::pre_activation});
        meta.layers.push_back({"A" + number, dim, Quantity::activation});
    }
    return meta;
}

TraceSample record_sample(const NeuralNet& net, const TraceMeta& meta, std::string id, const Vector& x, int true_label,
                          std::set<std::string> tags) {
    const LayerTrace trace = forward(net, x);
    TraceSample sample;
    sample.id = std::move(id);
    sample.true_label = true_label;
    sample.pred_label = static_cast<int>(argmax(trace.pre_activations.back()));
    sample.tags = std::move(tags);
    for (const auto& layer : meta.layers) {
        const std::size_t index = net_layer_index(layer.name);
        if (index >= net.layer_count()) throw MissingLayer("network has no layer for '" + layer.name + "'");
        const auto& values =
            layer.quantity == Quantity::pre_activation ? trace.pre_activations[index] : trace.activations[index];
        sample.vectors.emplace(layer.name, values);
    }
    return sample;
}

namespace {

std::vector<Vector> place_centers(const SyntheticSpec& spec, std::mt19937_64& rng) {
    const std::size_t total = spec.classes * spec.modes_per_class;
    const double min_distance = spec.separation * spec.mode_stddev;
    const auto d = static_cast<Eigen::Index>(spec.input_dim);
    double half_width =
        min_distance * std::max(1.0, std::pow(static_cast<double>(total), 1.0 / static_cast<double>(spec.input_dim)));
    while (true) {
        std::uniform_real_distribution<double> uniform(-half_width, half_width);
        std::vector<Vector> centers;
        std::size_t attempts = 0;
        while (centers.size() < total && attempts < 2000 * total) {
            ++attempts;
            Vector candidate(d);
            for (Eigen::Index i = 0; i < d; ++i) candidate[i] = uniform(rng);
            const bool far_enough = std::all_of(centers.begin(), centers.end(), [&](const Vector& c) {
                return (c - candidate).norm() >= min_distance;
            });
            if (far_enough) centers.push_back(std::move(candidate));
        }
        if (centers.size() == total) return centers;
        half_width *= 1.25;
    }
}

LabeledInputs select(const LabeledInputs& all, std::span<const std::size_t> indices) {
    LabeledInputs out;
    for (std::size_t i : indices) {
        out.inputs.push_back(all.inputs[i]);
        out.labels.push_back(all.labels[i]);
        out.ids.push_back(all.ids[i]);
    }
    return out;
}

TraceSet record_set(const NeuralNet& net, const TraceMeta& meta, const LabeledInputs& data, const std::string& tag) {
    TraceSet set;
    set.meta = meta;
    set.samples.reserve(data.inputs.size());
    for (std::size_t i = 0; i < data.inputs.size(); ++i) {
        set.samples.push_back(record_sample(net, meta, data.ids[i], data.inputs[i], data.labels[i], {tag}));
    }
    return set;
}

}  // namespace

SyntheticTask make_synthetic_task(const SyntheticSpec& spec, const TrainHyper& trainer) {
    if (spec.classes < 2) throw InvalidParameter("a synthetic task needs at least 2 classes");
    if (spec.input_dim < 1 || spec.modes_per_class < 1) throw InvalidParameter("input_dim and modes must be positive");
    if (spec.samples < spec.classes) throw InvalidParameter("need at least one sample per class");
    if (!(spec.separation > 0.0) || !(spec.mode_stddev > 0.0)) {
        throw InvalidParameter("separation and mode_stddev must be positive");
    }
    if (spec.hidden.size() != 2) throw InvalidParameter("the synthetic classifier has exactly 2 hidden layers");

    std::mt19937_64 rng(spec.seed);
    SyntheticTask task;
    task.mode_centers = place_centers(spec, rng);
    for (std::size_t m = 0; m < task.mode_centers.size(); ++m) {
        task.mode_labels.push_back(static_cast<int>(m / spec.modes_per_class));
    }

    LabeledInputs all;
    std::normal_distribution<double> normal(0.0, spec.mode_stddev);
    std::uniform_int_distribution<std::size_t> pick_mode(0, spec.modes_per_class - 1);
    for (std::size_t i = 0; i < spec.samples; ++i) {
        const std::size_t label = i % spec.classes;
        const Vector& center = task.mode_centers[label * spec.modes_per_class + pick_mode(rng)];
        Vector x(center.size());
        for (Eigen::Index k = 0; k < x.size(); ++k) x[k] = center[k] + normal(rng);
        all.inputs.push_back(std::move(x));
        all.labels.push_back(static_cast<int>(label));
        all.ids.push_back("s" + std::to_string(i));
    }

    const auto groups = stratified_partition(all.labels, spec.fractions, spec.seed ^ 0x5bd1e995ULL);
    if (groups.size() != 3) throw InvalidFractions("synthetic tasks use exactly three fractions (train/calib/test)");
    task.train_inputs = select(all, groups[0]);
    task.calib_inputs = select(all, groups[1]);
    task.test_inputs = select(all, groups[2]);

    const std::vector<LayerShape> arch{
        {spec.input_dim, spec.hidden[0], Activation::relu},
        {spec.hidden[0], spec.hidden[1], Activation::relu},
        {spec.hidden[1], spec.classes, Activation::identity},
    };
    TrainHyper hyper = trainer;
    hyper.loss = Loss::cross_entropy_on_logits;
    TrainResult trained = train_mlp(task.train_inputs.inputs, task.train_inputs.labels, arch, hyper);
    task.net = std::move(trained.net);
    task.train_accuracy = trained.accuracy;
    task.final_loss = trained.final_loss;
    task.test_accuracy =
        evaluate_loss(task.net, task.test_inputs.inputs, task.test_inputs.labels, Loss::cross_entropy_on_logits).second;

    task.meta = hidden_layer_meta(task.net, spec.classes, "synthetic:seed=" + std::to_string(spec.seed));
    task.train = record_set(task.net, task.meta, task.train_inputs, "id");
    task.calib = record_set(task.net, task.meta, task.calib_inputs, "id");
    task.test = record_set(task.net, task.meta, task.test_inputs, "id");
    return task;
}

std::vector<Vector> make_novelty_inputs(const SyntheticTask& task, double mode_stddev, std::size_t count,
                                        std::uint64_t seed) {
    if (task.mode_centers.empty()) throw InvalidParameter("task has no mode centers");
    const auto d = task.mode_centers.front().size();
    double reach = 0.0;
    for (const auto& c : task.mode_centers) reach = std::max(reach, c.norm());
    reach += 3.0 * mode_stddev;

    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    std::uniform_real_distribution<double> radius(1.5 * reach, 3.0 * reach);
    std::vector<Vector> out;
    out.reserve(count);
    while (out.size() < count) {
        Vector direction(d);
        for (Eigen::Index i = 0; i < d; ++i) direction[i] = normal(rng);
        if (direction.norm() == 0.0) continue;
        Vector x = direction.normalized() * radius(rng);
        const bool far = std::all_of(task.mode_centers.begin(), task.mode_centers.end(),
                                     [&](const Vector& c) { return (x - c).norm() >= 6.0 * mode_stddev; });
        if (far) out.push_back(std::move(x));
    }
    return out;
}

std::string Perturbation::name() const {
    std::string base;
    switch (kind) {
        case PerturbationKind::gaussian_noise: base = "gaussian_noise"; break;
        case PerturbationKind::salt_and_pepper: base = "salt_and_pepper"; break;
        case PerturbationKind::contrast: base = "contrast"; break;
        case PerturbationKind::invert: return "invert";
        case PerturbationKind::light: base = "light"; break;
        case PerturbationKind::rotate: base = "rotate"; break;
    }
    std::ostringstream out;
    out << base << ':' << parameter;
    return out.str();
}

Perturbation parse_perturbation(std::string_view text) {
    const auto colon = text.find(':');
    const std::string kind(text.substr(0, colon));
    Perturbation p;
    if (kind == "gaussian_noise") p.kind = PerturbationKind::gaussian_noise;
    else if (kind == "salt_and_pepper") p.kind = PerturbationKind::salt_and_pepper;
    else if (kind == "contrast") p.kind = PerturbationKind::contrast;
    else if (kind == "invert") p.kind = PerturbationKind::invert;
    else if (kind == "light") p.kind = PerturbationKind::light;
    else if (kind == "rotate") p.kind = PerturbationKind::rotate;
    else throw InvalidParameter("unknown perturbation '" + kind + "'");

    if (p.kind == PerturbationKind::invert) {
        if (colon != std::string_view::npos) throw InvalidParameter("invert takes no parameter");
        return p;
    }
    if (colon == std::string_view::npos) throw InvalidParameter("perturbation '" + kind + "' needs a parameter");
    const std::string value(text.substr(colon + 1));
    std::size_t used = 0;
    try {
        p.parameter = std::stod(value, &used);
    } catch (const std::exception&) {
        used = 0;
    }
    if (used == 0 || used != value.size()) {
        throw InvalidParameter("bad parameter '" + value + "' for perturbation '" + kind + "'");
    }
    return p;
}

std::vector<Vector> perturb(std::span<const Vector> inputs, const Perturbation& perturbation, std::uint64_t seed) {
    const double param = perturbation.parameter;
    switch (perturbation.kind) {
        case PerturbationKind::gaussian_noise:
            if (!(param >= 0.0) || !std::isfinite(param)) throw InvalidParameter("noise sigma must be >= 0");
            break;
        case PerturbationKind::salt_and_pepper:
            if (!(param >= 0.0 && param <= 1.0)) throw InvalidParameter("salt-and-pepper probability must lie in [0, 1]");
            break;
        case PerturbationKind::contrast:
            if (!(param >= 0.0) || !std::isfinite(param)) throw InvalidParameter("contrast factor must be >= 0");
            break;
        case PerturbationKind::light:
        case PerturbationKind::rotate:
            if (!std::isfinite(param)) throw InvalidParameter("perturbation parameter must be finite");
            break;
        case PerturbationKind::invert: break;
    }
    std::vector<Vector> out(inputs.begin(), inputs.end());
    if (inputs.empty()) return out;
    const Eigen::Index d = inputs.front().size();
    for (const auto& x : inputs) {
        if (x.size() != d) throw DimensionMismatch("inputs to perturb differ in length");
    }

    Vector lo = inputs.front();
    Vector hi = inputs.front();
    for (const auto& x : inputs) {
        lo = lo.cwiseMin(x);
        hi = hi.cwiseMax(x);
    }

    std::mt19937_64 rng(seed);
    switch (perturbation.kind) {
        case PerturbationKind::gaussian_noise: {
            std::normal_distribution<double> normal(0.0, 1.0);
            for (auto& x : out) {
                for (Eigen::Index i = 0; i < d; ++i) x[i] += param * normal(rng);
            }
            break;
        }
        case PerturbationKind::salt_and_pepper: {
            std::uniform_real_distribution<double> uniform(0.0, 1.0);
            std::bernoulli_distribution coin(0.5);
            for (auto& x : out) {
                for (Eigen::Index i = 0; i < d; ++i) {
                    if (uniform(rng) < param) x[i] = coin(rng) ? hi[i] : lo[i];
                }
            }
            break;
        }
        case PerturbationKind::contrast: {
            if (param == 1.0) break;  // m + (x - m) is not bit-exact in floating point
            for (auto& x : out) {
                const double mean = x.mean();
                x = (Vector::Constant(d, mean).array() + param * (x.array() - mean)).matrix();
            }
            break;
        }
        case PerturbationKind::invert: {
            const Vector mirror = hi + lo;
            for (auto& x : out) x = mirror - x;
            break;
        }
        case PerturbationKind::light: {
            const Vector shift = param * (hi - lo);
            for (auto& x : out) x += shift;
            break;
        }
        case PerturbationKind::rotate: {
            if (d < 2) throw InvalidParameter("rotate needs at least 2 input dimensions");
            Vector mean = Vector::Zero(d);
            for (const auto& x : inputs) mean += x;
            mean /= static_cast<double>(inputs.size());
            Matrix covariance = Matrix::Zero(d, d);
            for (const auto& x : inputs) covariance.noalias() += (x - mean) * (x - mean).transpose();
            Eigen::SelfAdjointEigenSolver<Matrix> eigen(covariance);
            // eigenvalues ascend, so the two principal axes are the last columns
            const Vector u1 = eigen.eigenvectors().col(d - 1);
            const Vector u2 = eigen.eigenvectors().col(d - 2);
            const double c = std::cos(param);
            const double s = std::sin(param);
            for (auto& x : out) {
                const Vector centered = x - mean;
                const double p1 = u1.dot(centered);
                const double p2 = u2.dot(centered);
                x = mean + centered + (c * p1 - s * p2 - p1) * u1 + (s * p1 + c * p2 - p2) * u2;
            }
            break;
        }
    }
    return out;
}

std::vector<OmsCategory> build_oms_sets(const NeuralNet& net, const TraceMeta& meta, const LabeledInputs& id_test,
                                        std::span<const Vector> novelty_inputs,
                                        std::span<const Perturbation> perturbation_grid, std::uint64_t seed,
                                        const WarningSink& warn) {
    if (net.input_dim() == 0 || net.output_dim() != meta.class_count) {
        throw DimensionMismatch("network outputs do not match the trace class count");
    }
    std::vector<OmsCategory> categories;
    auto keep = [&](OmsCategory category) {
        if (category.samples.samples.empty()) {
            if (warn) warn("EmptyCategory: '" + category.name + "' has no OMS samples and is dropped");
            return;
        }
        categories.push_back(std::move(category));
    };

    OmsCategory wrong{"wrong_id", TraceSet{meta, {}}};
    for (std::size_t i = 0; i < id_test.inputs.size(); ++i) {
        auto sample = record_sample(net, meta, id_test.ids[i], id_test.inputs[i], id_test.labels[i], {"oms:wrong_id"});
        if (!sample.correct()) wrong.samples.samples.push_back(std::move(sample));
    }
    keep(std::move(wrong));

    for (std::size_t p = 0; p < perturbation_grid.size(); ++p) {
        const auto& perturbation = perturbation_grid[p];
        const auto perturbed = perturb(id_test.inputs, perturbation, seed + p + 1);
        OmsCategory category{perturbation.name(), TraceSet{meta, {}}};
        for (std::size_t i = 0; i < perturbed.size(); ++i) {
            auto sample = record_sample(net, meta, id_test.ids[i] + "~" + perturbation.name(), perturbed[i],
                                        id_test.labels[i], {"oms:" + perturbation.name()});
            if (!sample.correct()) category.samples.samples.push_back(std::move(sample));
        }
        keep(std::move(category));
    }

    OmsCategory novelty{"novelty", TraceSet{meta, {}}};
    for (std::size_t i = 0; i < novelty_inputs.size(); ++i) {
        auto sample = record_sample(net, meta, "novelty" + std::to_string(i), novelty_inputs[i], 0,
                                    {"novelty", "oms:novelty"});
        sample.true_label = sample.pred_label;
        novelty.samples.samples.push_back(std::move(sample));
    }
    keep(std::move(novelty));
    return categories;
}

double tpr(const MonitorModel& model, const TraceSet& category) {
    if (category.samples.empty()) throw EmptyCategory("TPR of an empty category is undefined");
    std::size_t alarms = 0;
    for (const auto& sample : category.samples) {
        if (evaluate(model, sample).decision == Decision::alarm) ++alarms;
    }
    return static_cast<double>(alarms) / static_cast<double>(category.samples.size());
}

double tpr(const MonitorModel& model, const OmsCategory& category) {
    if (category.samples.samples.empty()) throw EmptyCategory("category '" + category.name + "' is empty");
    return tpr(model, category.samples);
}

double acceptance_rate(const MonitorModel& model, const TraceSet& samples) {
    if (samples.samples.empty()) throw EmptyCategory("acceptance rate of an empty set is undefined");
    return 1.0 - tpr(model, samples);
}

EvalReport report(std::span<const MonitorResult> results, const std::map<std::string, std::size_t>& counts) {
    EvalReport out;
    out.counts = counts;
    for (const auto& result : results) {
        out.configs.push_back(result.label);
        out.calibration_acceptance.push_back(result.calibration_acceptance);
        for (const auto& [category, value] : result.tpr) {
            if (std::find(out.categories.begin(), out.categories.end(), category) == out.categories.end()) {
                out.categories.push_back(category);
            }
        }
    }
    out.cells.assign(out.categories.size(), std::vector<std::optional<double>>(results.size()));
    for (std::size_t c = 0; c < results.size(); ++c) {
        for (const auto& [category, value] : results[c].tpr) {
            const auto row = static_cast<std::size_t>(
                std::find(out.categories.begin(), out.categories.end(), category) - out.categories.begin());
            out.cells[row][c] = value;
        }
    }
    return out;
}

std::string format_percent(double rate) {
    char buffer[32];
    std::snprintf(buffer, sizeof buffer, "%.2f", rate * 100.0);
    return buffer;
}

std::string render_table(const EvalReport& report) {
    std::vector<std::string> header{"category"};
    header.insert(header.end(), report.configs.begin(), report.configs.end());
    const bool with_counts = !report.counts.empty();
    if (with_counts) header.push_back("n");

    std::vector<std::vector<std::string>> rows;
    for (std::size_t r = 0; r < report.categories.size(); ++r) {
        std::vector<std::string> row{report.categories[r]};
        for (const auto& cell : report.cells[r]) row.push_back(cell ? format_percent(*cell) : "-");
        if (with_counts) {
            auto it = report.counts.find(report.categories[r]);
            row.push_back(it == report.counts.end() ? "-" : std::to_string(it->second));
        }
        rows.push_back(std::move(row));
    }
    const bool any_acceptance = std::any_of(report.calibration_acceptance.begin(), report.calibration_acceptance.end(),
                                            [](const auto& v) { return v.has_value(); });
    if (any_acceptance) {
        std::vector<std::string> row{"(ID acceptance)"};
        for (const auto& v : report.calibration_acceptance) row.push_back(v ? format_percent(*v) : "-");
        if (with_counts) row.push_back("");
        rows.push_back(std::move(row));
    }

    std::vector<std::size_t> widths(header.size());
    for (std::size_t c = 0; c < header.size(); ++c) widths[c] = header[c].size();
    for (const auto& row : rows) {
        for (std::size_t c = 0; c < row.size(); ++c) widths[c] = std::max(widths[c], row[c].size());
    }
    std::ostringstream out;
    auto emit = [&](const std::vector<std::string>& row) {
        for (std::size_t c = 0; c < row.size(); ++c) {
            if (c == 0) {
                out << row[c] << std::string(widths[c] - row[c].size(), ' ');
            } else {
                out << " | " << std::string(widths[c] - row[c].size(), ' ') << row[c];
            }
        }
        out << '\n';
    };
    emit(header);
    std::size_t total = widths[0];
    for (std::size_t c = 1; c < widths.size(); ++c) total += widths[c] + 3;
    out << std::string(total, '-') << '\n';
    for (const auto& row : rows) emit(row);
    return out.str();
}

std::string render_csv(const EvalReport& report) {
    std::ostringstream out;
    out << "category";
    for (const auto& config : report.configs) out << ',' << config;
    out << '\n';
    for (std::size_t r = 0; r < report.categories.size(); ++r) {
        out << report.categories[r];
        for (const auto& cell : report.cells[r]) out << ',' << (cell ? format_percent(*cell) : std::string{});
        out << '\n';
    }
    return out.str();
}

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> fields;
    std::string field;
    std::istringstream stream(line);
    while (std::getline(stream, field, ',')) fields.push_back(field);
    if (!line.empty() && line.back() == ',') fields.emplace_back();
    return fields;
}

}  // namespace

std::vector<MonitorResult> parse_csv(const std::string& text) {
    std::istringstream stream(text);
    std::string line;
    if (!std::getline(stream, line)) throw ParseError("CSV report is empty");
    if (!line.empty() && line.back() == '\r') line.pop_back();
    const auto header = split_csv_line(line);
    if (header.empty() || header.front() != "category") throw ParseError("CSV report must start with 'category'");
    std::vector<MonitorResult> results(header.size() - 1);
    for (std::size_t c = 1; c < header.size(); ++c) results[c - 1].label = header[c];

    std::size_t line_number = 1;
    while (std::getline(stream, line)) {
        ++line_number;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        const auto fields = split_csv_line(line);
        if (fields.size() != header.size()) {
            throw ParseError("CSV line " + std::to_string(line_number) + " has " + std::to_string(fields.size()) +
                             " fields, header has " + std::to_string(header.size()));
        }
        for (std::size_t c = 1; c < fields.size(); ++c) {
            if (fields[c].empty()) continue;
            std::size_t used = 0;
            double percent = 0.0;
            try {
                percent = std::stod(fields[c], &used);
            } catch (const std::exception&) {
                used = 0;
            }
            if (used != fields[c].size()) {
                throw ParseError("CSV line " + std::to_string(line_number) + ": '" + fields[c] + "' is not a number");
            }
            results[c - 1].tpr.emplace_back(fields[0], percent / 100.0);
        }
    }
    return results;
}

}  // namespace omsmon
