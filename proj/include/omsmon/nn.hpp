#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "omsmon/types.hpp"

namespace omsmon {

enum class Activation { relu, identity, sigmoid };

std::string_view to_string(Activation activation);
Activation parse_activation(std::string_view text);

/// Applies f componentwise.
Vector apply_activation(Activation activation, const Vector& z);
/// f'(z) componentwise. The ReLU derivative at exactly 0 is 0.
Vector activation_derivative(Activation activation, const Vector& z);

/// Dense layer computing z = W^T a + b with W of shape inputs x outputs.
struct DenseLayer {
    Matrix weights;
    Vector bias;
    Activation activation = Activation::identity;

    std::size_t input_dim() const { return static_cast<std::size_t>(weights.rows()); }
    std::size_t output_dim() const { return static_cast<std::size_t>(weights.cols()); }
};

/// Feed-forward stack of dense layers. Layer index 0 here is the first
/// layer after the input (conventionally numbered 2; the input is layer 1).
class NeuralNet {
public:
    NeuralNet() = default;
    /// Throws DimensionMismatch if shapes do not chain, InvalidParameter on non-finite entries.
    explicit NeuralNet(std::vector<DenseLayer> layers);

    const std::vector<DenseLayer>& layers() const { return layers_; }
    std::size_t layer_count() const { return layers_.size(); }
    std::size_t input_dim() const;
    std::size_t output_dim() const;

private:
    std::vector<DenseLayer> layers_;
};

/// Recorded forward pass: x plus (z_l, a_l) for every layer, in order.
struct LayerTrace {
    Vector input;
    std::vector<Vector> pre_activations;
    std::vector<Vector> activations;

    const Vector& output() const { return activations.back(); }
};

LayerTrace forward(const NeuralNet& net, const Vector& x);

/// argmax of the final pre-activations; ties go to the smaller index.
std::size_t predict(const NeuralNet& net, const Vector& x);
std::size_t argmax(const Vector& values);

/// d a_m / d (quantity of layer `layer`) at input x. Rows are output neurons,
/// columns neurons of the monitored layer. `layer` must be a hidden layer
/// (0 <= layer < layer_count() - 1), otherwise UnsupportedLayer.
Matrix jacobian(const NeuralNet& net, const Vector& x, std::size_t layer, Quantity quantity);

/// Same as jacobian(), but starting from a recorded value of the monitored
/// layer instead of the network input: `value` is z_l for pre_activation and
/// a_l for activation. The downstream computation only depends on it.
Matrix jacobian_from_layer(const NeuralNet& net, std::size_t layer, Quantity quantity, const Vector& value);

/// d a_m / d x.
Matrix input_jacobian(const NeuralNet& net, const Vector& x);

struct LayerShape {
    std::size_t inputs = 0;
    std::size_t outputs = 0;
    Activation activation = Activation::relu;
};

enum class Loss { cross_entropy_on_logits, binary_cross_entropy_on_sigmoid };

struct TrainHyper {
    double learning_rate = 0.05;
    std::size_t epochs = 50;
    std::size_t batch_size = 32;
    std::uint64_t seed = 0;
    Loss loss = Loss::cross_entropy_on_logits;
};

struct TrainResult {
    NeuralNet net;
    double final_loss = 0.0;
    double accuracy = 0.0;
};

/// Glorot-uniform weights, zero biases.
NeuralNet init_net(std::span<const LayerShape> arch, std::uint64_t seed);

/// Mini-batch SGD. Targets are class indices for cross_entropy_on_logits and
/// 0/1 for binary_cross_entropy_on_sigmoid (single sigmoid output).
TrainResult train_mlp(std::span<const Vector> inputs, std::span<const int> targets,
                      std::span<const LayerShape> arch, const TrainHyper& hyper);

/// Mean loss and accuracy of `net` on a dataset.
std::pair<double, double> evaluate_loss(const NeuralNet& net, std::span<const Vector> inputs,
                                        std::span<const int> targets, Loss loss);

std::string net_to_json(const NeuralNet& net);
NeuralNet net_from_json(const std::string& text);
void save_net(const NeuralNet& net, const std::filesystem::path& path);
NeuralNet load_net(const std::filesystem::path& path);

}  // namespace omsmon
