#include "omsmon/nn.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include <json.hpp>

#include "omsmon/error.hpp"

namespace omsmon {

std::string_view to_string(Activation activation) {
    switch (activation) {
        case Activation::relu: return "relu";
        case Activation::identity: return "identity";
        case Activation::sigmoid: return "sigmoid";
    }
    return "identity";
}

Activation parse_activation(std::string_view text) {
    if (text == "relu") return Activation::relu;
    if (text == "identity") return Activation::identity;
    if (text == "sigmoid") return Activation::sigmoid;
    throw SchemaError("unknown activation '" + std::string(text) + "'");
}

namespace {

double sigmoid(double z) {
    // split on sign so exp never overflows
    if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
    const double e = std::exp(z);
    return e / (1.0 + e);
}

}  // namespace

Vector apply_activation(Activation activation, const Vector& z) {
    switch (activation) {
        case Activation::relu: return z.unaryExpr([](double v) { return v > 0.0 ? v : 0.0; });
        case Activation::identity: return z;
        case Activation::sigmoid: return z.unaryExpr([](double v) { return sigmoid(v); });
    }
    return z;
}

Vector activation_derivative(Activation activation, const Vector& z) {
    switch (activation) {
        case Activation::relu: return z.unaryExpr([](double v) { return v > 0.0 ? 1.0 : 0.0; });
        case Activation::identity: return Vector::Ones(z.size());
        case Activation::sigmoid:
            return z.unaryExpr([](double v) {
                const double s = sigmoid(v);
                return s * (1.0 - s);
            });
    }
    return Vector::Ones(z.size());
}

NeuralNet::NeuralNet(std::vector<DenseLayer> layers) : layers_(std::move(layers)) {
    for (std::size_t i = 0; i < layers_.size(); ++i) {
        const auto& layer = layers_[i];
        if (layer.weights.rows() == 0 || layer.weights.cols() == 0) {
            throw DimensionMismatch("layer " + std::to_string(i) + " has an empty weight matrix");
        }
        if (layer.bias.size() != layer.weights.cols()) {
            throw DimensionMismatch("layer " + std::to_string(i) + ": bias length " +
                                    std::to_string(layer.bias.size()) + " != output width " +
                                    std::to_string(layer.weights.cols()));
        }
        if (i > 0 && layer.input_dim() != layers_[i - 1].output_dim()) {
            throw DimensionMismatch("layer " + std::to_string(i) + " expects " + std::to_string(layer.input_dim()) +
                                    " inputs but layer " + std::to_string(i - 1) + " produces " +
                                    std::to_string(layers_[i - 1].output_dim()));
        }
        if (!layer.weights.allFinite() || !layer.bias.allFinite()) {
            throw InvalidParameter("layer " + std::to_string(i) + " has non-finite parameters");
        }
    }
}

std::size_t NeuralNet::input_dim() const { return layers_.empty() ? 0 : layers_.front().input_dim(); }
std::size_t NeuralNet::output_dim() const { return layers_.empty() ? 0 : layers_.back().output_dim(); }

LayerTrace forward(const NeuralNet& net, const Vector& x) {
    if (net.layer_count() == 0) throw DimensionMismatch("network has no layers");
    if (static_cast<std::size_t>(x.size()) != net.input_dim()) {
        throw DimensionMismatch("input has " + std::to_string(x.size()) + " entries, network expects " +
                                std::to_string(net.input_dim()));
    }
    LayerTrace trace;
    trace.input = x;
    trace.pre_activations.reserve(net.layer_count());
    trace.activations.reserve(net.layer_count());
    const Vector* previous = &trace.input;
    for (const auto& layer : net.layers()) {
        Vector z = layer.weights.transpose() * (*previous) + layer.bias;
        trace.activations.push_back(apply_activation(layer.activation, z));
        trace.pre_activations.push_back(std::move(z));
        previous = &trace.activations.back();
    }
    return trace;
}

std::size_t argmax(const Vector& values) {
    std::size_t best = 0;
    for (Eigen::Index i = 1; i < values.size(); ++i) {
        if (values[i] > values[static_cast<Eigen::Index>(best)]) best = static_cast<std::size_t>(i);
    }
    return best;
}

std::size_t predict(const NeuralNet& net, const Vector& x) { return argmax(forward(net, x).pre_activations.back()); }

namespace {

void check_hidden(const NeuralNet& net, std::size_t layer) {
    if (net.layer_count() < 2 || layer >= net.layer_count() - 1) {
        throw UnsupportedLayer("layer index " + std::to_string(layer) + " is not a hidden layer of a " +
                               std::to_string(net.layer_count()) + "-layer network");
    }
}

// d a_m / d a_l given the pre-activations z_{l+1..m}; rows output neurons.
Matrix backward_to_activation(const NeuralNet& net, std::size_t layer, std::span<const Vector> tail_z) {
    const auto& layers = net.layers();
    const std::size_t m = layers.size() - 1;
    // G holds d a_m / d z_k, starting at k = m
    Matrix g = activation_derivative(layers[m].activation, tail_z.back()).asDiagonal();
    for (std::size_t k = m; k > layer + 1; --k) {
        Matrix through = g * layers[k].weights.transpose();
        const Vector slope = activation_derivative(layers[k - 1].activation, tail_z[k - 1 - (layer + 1)]);
        g = through * slope.asDiagonal();
    }
    return g * layers[layer + 1].weights.transpose();
}

}  // namespace

Matrix jacobian_from_layer(const NeuralNet& net, std::size_t layer, Quantity quantity, const Vector& value) {
    check_hidden(net, layer);
    const auto& layers = net.layers();
    if (static_cast<std::size_t>(value.size()) != layers[layer].output_dim()) {
        throw DimensionMismatch("layer value has " + std::to_string(value.size()) + " entries, layer " +
                                std::to_string(layer) + " has " + std::to_string(layers[layer].output_dim()));
    }
    Vector activation = quantity == Quantity::pre_activation ? apply_activation(layers[layer].activation, value) : value;
    std::vector<Vector> tail_z;
    tail_z.reserve(layers.size() - layer - 1);
    for (std::size_t k = layer + 1; k < layers.size(); ++k) {
        Vector z = layers[k].weights.transpose() * activation + layers[k].bias;
        activation = apply_activation(layers[k].activation, z);
        tail_z.push_back(std::move(z));
    }
    Matrix jac = backward_to_activation(net, layer, tail_z);
    if (quantity == Quantity::pre_activation) {
        jac = jac * activation_derivative(layers[layer].activation, value).asDiagonal();
    }
    return jac;
}

Matrix jacobian(const NeuralNet& net, const Vector& x, std::size_t layer, Quantity quantity) {
    check_hidden(net, layer);
    const LayerTrace trace = forward(net, x);
    std::span<const Vector> tail(trace.pre_activations.data() + layer + 1, net.layer_count() - layer - 1);
    Matrix jac = backward_to_activation(net, layer, tail);
    if (quantity == Quantity::pre_activation) {
        jac = jac * activation_derivative(net.layers()[layer].activation, trace.pre_activations[layer]).asDiagonal();
    }
    return jac;
}

Matrix input_jacobian(const NeuralNet& net, const Vector& x) {
    const LayerTrace trace = forward(net, x);
    const auto& layers = net.layers();
    Matrix g = activation_derivative(layers.back().activation, trace.pre_activations.back()).asDiagonal();
    for (std::size_t k = layers.size() - 1; k > 0; --k) {
        Matrix through = g * layers[k].weights.transpose();
        g = through * activation_derivative(layers[k - 1].activation, trace.pre_activations[k - 1]).asDiagonal();
    }
    return g * layers.front().weights.transpose();
}

NeuralNet init_net(std::span<const LayerShape> arch, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::vector<DenseLayer> layers;
    layers.reserve(arch.size());
    for (const auto& shape : arch) {
        if (shape.inputs == 0 || shape.outputs == 0) throw DimensionMismatch("layer shapes must be positive");
        const double limit = std::sqrt(6.0 / static_cast<double>(shape.inputs + shape.outputs));
        std::uniform_real_distribution<double> uniform(-limit, limit);
        DenseLayer layer;
        layer.weights.resize(static_cast<Eigen::Index>(shape.inputs), static_cast<Eigen::Index>(shape.outputs));
        for (Eigen::Index c = 0; c < layer.weights.cols(); ++c) {
            for (Eigen::Index r = 0; r < layer.weights.rows(); ++r) layer.weights(r, c) = uniform(rng);
        }
        layer.bias = Vector::Zero(static_cast<Eigen::Index>(shape.outputs));
        layer.activation = shape.activation;
        layers.push_back(std::move(layer));
    }
    return NeuralNet(std::move(layers));
}

namespace {

// dL/dz_m for one sample, and the sample's loss.
double output_gradient(const Vector& z, int target, Loss loss, Vector& delta) {
    if (loss == Loss::cross_entropy_on_logits) {
        const double max = z.maxCoeff();
        Vector p = (z.array() - max).exp();
        const double sum = p.sum();
        p /= sum;
        delta = p;
        delta[target] -= 1.0;
        return -(z[target] - max - std::log(sum));
    }
    const double s = sigmoid(z[0]);
    delta = Vector::Constant(1, s - static_cast<double>(target));
    // log(1 + e^{-|z|}) form keeps the loss finite for large |z|
    const double softplus = std::max(z[0], 0.0) + std::log1p(std::exp(-std::abs(z[0])));
    return softplus - static_cast<double>(target) * z[0];
}

void check_targets(const NeuralNet& net, std::span<const int> targets, Loss loss) {
    for (int t : targets) {
        if (loss == Loss::cross_entropy_on_logits) {
            if (t < 0 || static_cast<std::size_t>(t) >= net.output_dim()) {
                throw InvalidParameter("class target " + std::to_string(t) + " outside the output range");
            }
        } else if (t != 0 && t != 1) {
            throw InvalidParameter("binary targets must be 0 or 1");
        }
    }
    if (loss == Loss::binary_cross_entropy_on_sigmoid &&
        (net.output_dim() != 1 || net.layers().back().activation != Activation::sigmoid)) {
        throw InvalidParameter("binary cross-entropy needs a single sigmoid output");
    }
    if (loss == Loss::cross_entropy_on_logits && net.layers().back().activation != Activation::identity) {
        throw InvalidParameter("cross-entropy on logits needs an identity output layer");
    }
}

}  // namespace

std::pair<double, double> evaluate_loss(const NeuralNet& net, std::span<const Vector> inputs,
                                        std::span<const int> targets, Loss loss) {
    if (inputs.empty()) return {0.0, 0.0};
    double total = 0.0;
    std::size_t hits = 0;
    Vector delta;
    for (std::size_t i = 0; i < inputs.size(); ++i) {
        const LayerTrace trace = forward(net, inputs[i]);
        const Vector& z = trace.pre_activations.back();
        total += output_gradient(z, targets[i], loss, delta);
        const int predicted = loss == Loss::cross_entropy_on_logits ? static_cast<int>(argmax(z)) : (z[0] >= 0.0 ? 1 : 0);
        if (predicted == targets[i]) ++hits;
    }
    const auto n = static_cast<double>(inputs.size());
    return {total / n, static_cast<double>(hits) / n};
}

TrainResult train_mlp(std::span<const Vector> inputs, std::span<const int> targets,
                      std::span<const LayerShape> arch, const TrainHyper& hyper) {
    if (inputs.size() != targets.size()) throw DimensionMismatch("inputs and targets differ in length");
    if (arch.empty()) throw DimensionMismatch("architecture has no layers");
    if (hyper.batch_size == 0) throw InvalidParameter("batch_size must be positive");

    std::vector<DenseLayer> layers = init_net(arch, hyper.seed).layers();
    NeuralNet net(layers);
    check_targets(net, targets, hyper.loss);
    for (const auto& x : inputs) {
        if (static_cast<std::size_t>(x.size()) != net.input_dim()) {
            throw DimensionMismatch("training input has " + std::to_string(x.size()) + " entries, network expects " +
                                    std::to_string(net.input_dim()));
        }
    }

    std::mt19937_64 rng(hyper.seed ^ 0x9e3779b97f4a7c15ULL);
    std::vector<std::size_t> order(inputs.size());
    std::iota(order.begin(), order.end(), std::size_t{0});

    std::vector<Matrix> grad_w(layers.size());
    std::vector<Vector> grad_b(layers.size());
    Vector delta;
    for (std::size_t epoch = 0; epoch < hyper.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng);
        double epoch_loss = 0.0;
        for (std::size_t start = 0; start < order.size(); start += hyper.batch_size) {
            const std::size_t end = std::min(order.size(), start + hyper.batch_size);
            for (std::size_t k = 0; k < layers.size(); ++k) {
                grad_w[k] = Matrix::Zero(layers[k].weights.rows(), layers[k].weights.cols());
                grad_b[k] = Vector::Zero(layers[k].bias.size());
            }
            for (std::size_t b = start; b < end; ++b) {
                const std::size_t i = order[b];
                const LayerTrace trace = forward(net, inputs[i]);
                epoch_loss += output_gradient(trace.pre_activations.back(), targets[i], hyper.loss, delta);
                for (std::size_t k = layers.size(); k-- > 0;) {
                    const Vector& below = k == 0 ? trace.input : trace.activations[k - 1];
                    grad_w[k].noalias() += below * delta.transpose();
                    grad_b[k] += delta;
                    if (k > 0) {
                        delta = (layers[k].weights * delta).cwiseProduct(
                            activation_derivative(layers[k - 1].activation, trace.pre_activations[k - 1]));
                    }
                }
            }
            const double scale = hyper.learning_rate / static_cast<double>(end - start);
            for (std::size_t k = 0; k < layers.size(); ++k) {
                layers[k].weights -= scale * grad_w[k];
                layers[k].bias -= scale * grad_b[k];
            }
            if (!std::isfinite(epoch_loss)) {
                throw DivergedError("training loss became non-finite in epoch " + std::to_string(epoch));
            }
            for (const auto& layer : layers) {
                if (!layer.weights.allFinite() || !layer.bias.allFinite()) {
                    throw DivergedError("weights became non-finite in epoch " + std::to_string(epoch));
                }
            }
            net = NeuralNet(layers);
        }
    }

    TrainResult result{net, 0.0, 0.0};
    std::tie(result.final_loss, result.accuracy) = evaluate_loss(net, inputs, targets, hyper.loss);
    if (!std::isfinite(result.final_loss)) throw DivergedError("final training loss is non-finite");
    return result;
}

namespace {

using json = nlohmann::ordered_json;

}  // namespace

std::string net_to_json(const NeuralNet& net) {
    json j;
    json layers = json::array();
    for (const auto& layer : net.layers()) {
        json entry;
        json weights = json::array();
        for (Eigen::Index r = 0; r < layer.weights.rows(); ++r) {
            json row = json::array();
            for (Eigen::Index c = 0; c < layer.weights.cols(); ++c) row.push_back(layer.weights(r, c));
            weights.push_back(std::move(row));
        }
        entry["weights"] = std::move(weights);
        entry["bias"] = std::vector<double>(layer.bias.data(), layer.bias.data() + layer.bias.size());
        entry["activation"] = to_string(layer.activation);
        layers.push_back(std::move(entry));
    }
    j["layers"] = std::move(layers);
    return j.dump();
}

NeuralNet net_from_json(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        throw SchemaError(std::string("net file is not valid JSON: ") + e.what());
    }
    try {
        std::vector<DenseLayer> layers;
        for (const auto& entry : j.at("layers")) {
            const auto rows = entry.at("weights").get<std::vector<std::vector<double>>>();
            const auto bias = entry.at("bias").get<std::vector<double>>();
            if (rows.empty() || rows.front().empty()) throw SchemaError("net layer has empty weights");
            DenseLayer layer;
            layer.weights.resize(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows.front().size()));
            for (std::size_t r = 0; r < rows.size(); ++r) {
                if (rows[r].size() != rows.front().size()) throw SchemaError("ragged weight matrix in net file");
                for (std::size_t c = 0; c < rows[r].size(); ++c) {
                    layer.weights(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = rows[r][c];
                }
            }
            layer.bias = Eigen::Map<const Vector>(bias.data(), static_cast<Eigen::Index>(bias.size()));
            layer.activation = parse_activation(entry.at("activation").get<std::string>());
            layers.push_back(std::move(layer));
        }
        return NeuralNet(std::move(layers));
    } catch (const nlohmann::json::exception& e) {
        throw SchemaError(std::string("malformed net file: ") + e.what());
    } catch (const DimensionMismatch& e) {
        throw SchemaError(std::string("inconsistent net file: ") + e.what());
    }
}

void save_net(const NeuralNet& net, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
    out << net_to_json(net) << '\n';
    if (!out) throw IoError("write error in '" + path.string() + "'");
}

NeuralNet load_net(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open '" + path.string() + "'");
    std::stringstream buffer;
    buffer << in.rdbuf();
    return net_from_json(buffer.str());
}

}  // namespace omsmon
