#include "omsmon/selection.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <numeric>

#include <json.hpp>

#include "omsmon/error.hpp"

namespace omsmon {

bool AbsScoreTable::complete() const {
    return std::all_of(present.begin(), present.end(), [](bool p) { return p; });
}

namespace {

AbsScoreTable empty_table(std::size_t classes, std::size_t dim, std::string layer, Quantity quantity) {
    AbsScoreTable table;
    table.layer = std::move(layer);
    table.quantity = quantity;
    table.scores = Matrix::Zero(static_cast<Eigen::Index>(classes), static_cast<Eigen::Index>(dim));
    table.inputs_per_class.assign(classes, 0);
    table.present.assign(classes, false);
    return table;
}

void accumulate_row(AbsScoreTable& table, std::size_t j, const Eigen::Ref<const Eigen::RowVectorXd>& gradient) {
    table.scores.row(static_cast<Eigen::Index>(j)) += gradient.cwiseAbs();
    ++table.inputs_per_class[j];
    table.present[j] = true;
}

}  // namespace

AbsScoreTable abs_scores(const NeuralNet& net, std::span<const std::vector<Vector>> safe_inputs, std::size_t layer,
                         Quantity quantity, std::string layer_name) {
    if (net.layer_count() < 2 || layer >= net.layer_count() - 1) {
        throw UnsupportedLayer("layer index " + std::to_string(layer) + " is not a hidden layer");
    }
    if (safe_inputs.size() != net.output_dim()) {
        throw DimensionMismatch("got inputs for " + std::to_string(safe_inputs.size()) + " classes, network has " +
                                std::to_string(net.output_dim()) + " outputs");
    }
    AbsScoreTable table =
        empty_table(safe_inputs.size(), net.layers()[layer].output_dim(), std::move(layer_name), quantity);
    for (std::size_t j = 0; j < safe_inputs.size(); ++j) {
        for (const auto& x : safe_inputs[j]) {
            const Matrix jac = jacobian(net, x, layer, quantity);
            accumulate_row(table, j, jac.row(static_cast<Eigen::Index>(j)));
        }
    }
    return table;
}

std::size_t net_layer_index(const std::string& layer_name) {
    std::size_t pos = 0;
    while (pos < layer_name.size() && !std::isdigit(static_cast<unsigned char>(layer_name[pos]))) ++pos;
    if (pos == layer_name.size()) {
        throw InvalidParameter("layer name '" + layer_name + "' carries no layer number");
    }
    const auto number = std::stoul(layer_name.substr(pos));
    if (number < 2) throw InvalidParameter("layer '" + layer_name + "' does not name a layer after the input");
    return number - 2;
}

AbsScoreTable abs_scores_from_traces(const NeuralNet& net, const TraceSet& traces, const std::string& layer_name,
                                     std::size_t layer) {
    const LayerSpec& spec = traces.meta.layer(layer_name);
    if (net.output_dim() != traces.meta.class_count) {
        throw DimensionMismatch("network has " + std::to_string(net.output_dim()) + " outputs, traces have " +
                                std::to_string(traces.meta.class_count) + " classes");
    }
    if (net.layer_count() < 2 || layer >= net.layer_count() - 1) {
        throw UnsupportedLayer("layer index " + std::to_string(layer) + " is not a hidden layer");
    }
    if (net.layers()[layer].output_dim() != spec.dim) {
        throw DimensionMismatch("layer '" + layer_name + "' has dimension " + std::to_string(spec.dim) +
                                " but network layer " + std::to_string(layer) + " has " +
                                std::to_string(net.layers()[layer].output_dim()));
    }
    AbsScoreTable table = empty_table(traces.meta.class_count, spec.dim, layer_name, spec.quantity);
    for (const auto& sample : traces.samples) {
        if (!sample.correct()) continue;
        const auto j = static_cast<std::size_t>(sample.true_label);
        const Matrix jac = jacobian_from_layer(net, layer, spec.quantity, sample.vector(layer_name));
        accumulate_row(table, j, jac.row(static_cast<Eigen::Index>(j)));
    }
    return table;
}

TrainResult train_monitoring_nn(const TraceSet& train, const std::string& layer, int class_label,
                                const MonitoringNetHyper& hyper) {
    const LayerSpec& spec = train.meta.layer(layer);
    std::vector<Vector> inputs;
    std::vector<int> targets;
    for (const auto& sample : train.samples) {
        if (sample.pred_label != class_label) continue;
        inputs.push_back(sample.vector(layer));
        targets.push_back(sample.correct() ? 1 : 0);
    }
    const auto positives = std::count(targets.begin(), targets.end(), 1);
    if (inputs.empty() || positives == 0 || positives == static_cast<std::ptrdiff_t>(targets.size())) {
        throw OneClassOnly("class " + std::to_string(class_label) +
                           " needs both correctly and incorrectly predicted samples to train a monitoring network (" +
                           std::to_string(positives) + " of " + std::to_string(targets.size()) + " correct)");
    }

    std::vector<LayerShape> arch;
    std::size_t width = spec.dim;
    for (std::size_t hidden : hyper.hidden) {
        arch.push_back({width, hidden, Activation::relu});
        width = hidden;
    }
    arch.push_back({width, 1, Activation::sigmoid});

    TrainHyper train_hyper;
    train_hyper.learning_rate = hyper.learning_rate;
    train_hyper.epochs = hyper.epochs;
    train_hyper.batch_size = hyper.batch_size;
    train_hyper.seed = hyper.seed ^ (0x51ed2701ULL * static_cast<std::uint64_t>(class_label + 1));
    train_hyper.loss = Loss::binary_cross_entropy_on_sigmoid;
    return train_mlp(inputs, targets, arch, train_hyper);
}

AbsScoreTable abs_scores_via_monitoring_nn(std::span<const std::optional<NeuralNet>> monitoring_nets,
                                           const TraceSet& train, const std::string& layer) {
    const LayerSpec& spec = train.meta.layer(layer);
    const std::size_t classes = train.meta.class_count;
    if (monitoring_nets.size() != classes) {
        throw MissingNet("expected " + std::to_string(classes) + " monitoring networks, got " +
                         std::to_string(monitoring_nets.size()));
    }
    for (std::size_t j = 0; j < classes; ++j) {
        if (!monitoring_nets[j]) throw MissingNet("no monitoring network for class " + std::to_string(j));
        if (monitoring_nets[j]->input_dim() != spec.dim || monitoring_nets[j]->output_dim() != 1) {
            throw DimensionMismatch("monitoring network for class " + std::to_string(j) +
                                    " does not map the layer to a single score");
        }
    }
    AbsScoreTable table = empty_table(classes, spec.dim, layer, spec.quantity);
    for (const auto& sample : train.samples) {
        if (!sample.correct()) continue;
        const auto j = static_cast<std::size_t>(sample.true_label);
        const Matrix jac = input_jacobian(*monitoring_nets[j], sample.vector(layer));
        accumulate_row(table, j, jac.row(0));
    }
    return table;
}

SelectionMask select_top_fraction(const AbsScoreTable& table, double fraction) {
    if (!(fraction > 0.0 && fraction <= 1.0)) throw InvalidParameter("fraction must lie in (0, 1]");
    if (!table.complete()) {
        for (std::size_t j = 0; j < table.present.size(); ++j) {
            if (!table.present[j]) throw EmptyClassInputs("score table has no inputs for class " + std::to_string(j));
        }
    }
    const auto dim = static_cast<std::size_t>(table.scores.cols());
    // the epsilon keeps products like 0.3 * 10 from rounding up to 4
    auto count = static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(dim) - 1e-9));
    count = std::clamp<std::size_t>(count, 1, dim);

    SelectionMask mask;
    mask.layer = table.layer;
    mask.layer_dim = dim;
    for (Eigen::Index j = 0; j < table.scores.rows(); ++j) {
        std::vector<std::size_t> order(dim);
        std::iota(order.begin(), order.end(), std::size_t{0});
        const auto row = table.scores.row(j);
        std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
            return row[static_cast<Eigen::Index>(a)] > row[static_cast<Eigen::Index>(b)];
        });
        order.resize(count);
        std::sort(order.begin(), order.end());
        mask.classes.push_back(std::move(order));
    }
    return mask;
}

std::string table_to_json(const AbsScoreTable& table) {
    nlohmann::ordered_json j;
    j["layer"] = table.layer;
    j["quantity"] = to_string(table.quantity);
    nlohmann::ordered_json rows = nlohmann::ordered_json::array();
    for (Eigen::Index r = 0; r < table.scores.rows(); ++r) {
        if (!table.present[static_cast<std::size_t>(r)]) {
            rows.push_back(nullptr);
            continue;
        }
        std::vector<double> row(static_cast<std::size_t>(table.scores.cols()));
        for (Eigen::Index c = 0; c < table.scores.cols(); ++c) row[static_cast<std::size_t>(c)] = table.scores(r, c);
        rows.push_back(row);
    }
    j["scores"] = std::move(rows);
    j["inputs_per_class"] = table.inputs_per_class;
    return j.dump();
}

AbsScoreTable table_from_json(const std::string& text) {
    try {
        const auto j = nlohmann::json::parse(text);
        AbsScoreTable table;
        table.layer = j.at("layer").get<std::string>();
        table.quantity = parse_quantity(j.at("quantity").get<std::string>());
        table.inputs_per_class = j.at("inputs_per_class").get<std::vector<std::size_t>>();
        const auto& rows = j.at("scores");
        std::size_t dim = 0;
        for (const auto& row : rows) {
            if (!row.is_null()) dim = std::max(dim, row.size());
        }
        table.scores = Matrix::Zero(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(dim));
        for (std::size_t r = 0; r < rows.size(); ++r) {
            table.present.push_back(!rows[r].is_null());
            if (rows[r].is_null()) continue;
            const auto values = rows[r].get<std::vector<double>>();
            if (values.size() != dim) throw SchemaError("score rows differ in length");
            for (std::size_t c = 0; c < dim; ++c) {
                table.scores(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = values[c];
            }
        }
        if (table.inputs_per_class.size() != rows.size()) throw SchemaError("inputs_per_class length mismatch");
        return table;
    } catch (const nlohmann::json::exception& e) {
        throw SchemaError(std::string("malformed score table: ") + e.what());
    }
}

}  // namespace omsmon
