#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "omsmon/nn.hpp"
#include "omsmon/selection_mask.hpp"
#include "omsmon/trace.hpp"

namespace omsmon {

/// Per-class, per-neuron relevance: the sum over known-safe inputs of class j
/// of |d a_{m,j} / d (neuron t of the monitored layer)|.
struct AbsScoreTable {
    std::string layer;
    Quantity quantity = Quantity::pre_activation;
    Matrix scores;                            ///< class x neuron
    std::vector<std::size_t> inputs_per_class;
    std::vector<bool> present;                ///< false for a class without inputs

    bool complete() const;
};

/// Scores from the monitored network on raw inputs. `layer` is the index of
/// a hidden layer of `net`. Classes with no inputs get an absent row.
AbsScoreTable abs_scores(const NeuralNet& net, std::span<const std::vector<Vector>> safe_inputs, std::size_t layer,
                         Quantity quantity, std::string layer_name = {});

/// Same scores computed from recorded trace vectors of the monitored layer
/// instead of raw inputs. Uses correctly classified samples of each class.
AbsScoreTable abs_scores_from_traces(const NeuralNet& net, const TraceSet& traces, const std::string& layer_name,
                                     std::size_t layer);

/// Maps a trace layer name such as "Z3" or "A12" (layer numbers start at 2
/// for the first layer after the input) to a hidden-layer index of the net.
std::size_t net_layer_index(const std::string& layer_name);

struct MonitoringNetHyper {
    std::vector<std::size_t> hidden{64, 32, 16};
    double learning_rate = 0.05;
    std::size_t epochs = 60;
    std::size_t batch_size = 32;
    std::uint64_t seed = 0;
};

/// Trains NET_j on the layer vectors of samples predicted as class j:
/// target 1 when the prediction was correct, 0 otherwise.
TrainResult train_monitoring_nn(const TraceSet& train, const std::string& layer, int class_label,
                                const MonitoringNetHyper& hyper);

/// Scores from the per-class monitoring networks, summed over the recorded
/// vectors of correctly classified class-j training samples.
AbsScoreTable abs_scores_via_monitoring_nn(std::span<const std::optional<NeuralNet>> monitoring_nets,
                                           const TraceSet& train, const std::string& layer);

/// The ceil(fraction * d) highest-scoring neurons per class; ties go to the
/// smaller index; indices ascending.
SelectionMask select_top_fraction(const AbsScoreTable& table, double fraction);

std::string table_to_json(const AbsScoreTable& table);
AbsScoreTable table_from_json(const std::string& text);

}  // namespace omsmon
