#include <doctest.h>

#include <cmath>
#include <random>

#include "fixtures.hpp"
#include "omsmon/error.hpp"
#include "omsmon/eval.hpp"
#include "omsmon/selection.hpp"

using namespace omsmon;

namespace {

NeuralNet small_net(std::mt19937_64& rng) {
    std::normal_distribution<double> normal(0.0, 0.8);
    auto layer = [&](Eigen::Index in, Eigen::Index out, Activation f) {
        DenseLayer l{Matrix(in, out), Vector(out), f};
        for (Eigen::Index i = 0; i < l.weights.size(); ++i) l.weights.data()[i] = normal(rng);
        for (Eigen::Index i = 0; i < out; ++i) l.bias[i] = normal(rng);
        return l;
    };
    return NeuralNet({layer(2, 6, Activation::relu), layer(6, 5, Activation::relu), layer(5, 3, Activation::identity)});
}

}  // namespace

TEST_CASE("relevance scores match summed finite-difference gradients") {
    std::mt19937_64 rng(70);
    const NeuralNet net = small_net(rng);
    std::vector<std::vector<Vector>> inputs(3);
    for (int i = 0; i < 30; ++i) inputs[static_cast<std::size_t>(i % 3)].push_back(fixtures::random_vector(rng, 2, 2.0));
    const AbsScoreTable table = abs_scores(net, inputs, 1, Quantity::pre_activation, "Z3");
    CHECK(table.complete());
    CHECK(table.layer == "Z3");

    const double h = 1e-6;
    for (std::size_t j = 0; j < 3; ++j) {
        for (Eigen::Index t = 0; t < 5; ++t) {
            double expected = 0.0;
            bool near_kink = false;
            for (const auto& x : inputs[j]) {
                const LayerTrace trace = forward(net, x);
                auto out = [&](double delta) {
                    Vector z = trace.pre_activations[1];
                    z[t] += delta;
                    const Vector a = apply_activation(Activation::relu, z);
                    const auto& last = net.layers()[2];
                    return (last.weights.transpose() * a + last.bias)[static_cast<Eigen::Index>(j)];
                };
                near_kink = near_kink || std::abs(trace.pre_activations[1][t]) < 1e-4;
                expected += std::abs((out(h) - out(-h)) / (2 * h));
            }
            if (near_kink) continue;
            CHECK(table.scores(static_cast<Eigen::Index>(j), t) == doctest::Approx(expected).epsilon(1e-6));
        }
    }
}

TEST_CASE("scores from recorded traces equal scores from raw inputs") {
    std::mt19937_64 rng(71);
    const NeuralNet net = small_net(rng);
    TraceMeta meta = hidden_layer_meta(net, 3, "unit");
    TraceSet traces{meta, {}};
    std::vector<std::vector<Vector>> correct(3);
    for (int i = 0; i < 60; ++i) {
        const Vector x = fixtures::random_vector(rng, 2, 2.0);
        const int label = i % 3;
        auto sample = record_sample(net, meta, "s" + std::to_string(i), x, label);
        if (sample.correct()) correct[static_cast<std::size_t>(label)].push_back(x);
        traces.samples.push_back(std::move(sample));
    }
    for (const std::string layer : {"Z2", "A2", "Z3", "A3"}) {
        const std::size_t index = net_layer_index(layer);
        const AbsScoreTable a = abs_scores_from_traces(net, traces, layer, index);
        const AbsScoreTable b = abs_scores(net, correct, index, meta.layer(layer).quantity, layer);
        CHECK((a.scores - b.scores).cwiseAbs().maxCoeff() < 1e-12);
        CHECK(a.inputs_per_class == b.inputs_per_class);
    }
    CHECK_THROWS_AS(abs_scores_from_traces(net, traces, "Z3", 0), DimensionMismatch);
    CHECK_THROWS_AS(abs_scores(net, correct, 2, Quantity::activation), UnsupportedLayer);
}

TEST_CASE("layer names map to hidden-layer indices") {
    CHECK(net_layer_index("Z2") == 0);
    CHECK(net_layer_index("A3") == 1);
    CHECK(net_layer_index("Z13") == 11);
    CHECK_THROWS_AS(net_layer_index("Z1"), InvalidParameter);
    CHECK_THROWS_AS(net_layer_index("layer"), InvalidParameter);
}

TEST_CASE("top-fraction selection") {
    AbsScoreTable table;
    table.layer = "Z3";
    table.scores = Matrix(2, 10);
    table.scores << 5, 1, 5, 0, 9, 2, 2, 2, 7, 3,  //
        1, 1, 1, 1, 1, 1, 1, 1, 1, 1;
    table.inputs_per_class = {4, 4};
    table.present = {true, true};

    const SelectionMask m = select_top_fraction(table, 0.3);
    CHECK(m.layer == "Z3");
    CHECK(m.layer_dim == 10);
    CHECK(m.classes[0] == std::vector<std::size_t>{0, 4, 8});
    CHECK(m.classes[1] == std::vector<std::size_t>{0, 1, 2});
    CHECK(select_top_fraction(table, 0.25).classes[0].size() == 3);
    CHECK(select_top_fraction(table, 0.01).classes[0] == std::vector<std::size_t>{4});
    CHECK(select_top_fraction(table, 1.0).classes[0].size() == 10);
    CHECK_THROWS_AS(select_top_fraction(table, 0.0), InvalidParameter);
    CHECK_THROWS_AS(select_top_fraction(table, 1.5), InvalidParameter);

    for (std::size_t d = 1; d <= 40; ++d) {
        AbsScoreTable t{"L", Quantity::activation, Matrix::Random(1, static_cast<Eigen::Index>(d)), {1}, {true}};
        for (double f : {0.1, 0.25, 0.3, 0.5, 0.7, 1.0}) {
            const auto expected = std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(f * d - 1e-9)));
            CHECK(select_top_fraction(t, f).classes[0].size() == expected);
        }
    }

    table.present[1] = false;
    CHECK_THROWS_AS(select_top_fraction(table, 0.5), EmptyClassInputs);
}

TEST_CASE("score tables and masks round-trip through JSON") {
    AbsScoreTable table{"A2", Quantity::activation, Matrix(2, 3), {3, 0}, {true, false}};
    table.scores << 0.1, 1e-300, 7, 0, 0, 0;
    const AbsScoreTable back = table_from_json(table_to_json(table));
    CHECK(back.layer == "A2");
    CHECK(back.quantity == Quantity::activation);
    CHECK(back.present == table.present);
    CHECK(back.scores.row(0) == table.scores.row(0));

    const SelectionMask mask{"Z3", 16, {{1, 4, 9}, {0}}};
    CHECK(mask_from_json(mask_to_json(mask)) == mask);
    CHECK_THROWS_AS(mask_from_json(R"({"layer":"Z3","layer_dim":4,"classes":[[2,1]]})"), SchemaError);
    CHECK_THROWS_AS(mask_from_json(R"({"layer":"Z3","layer_dim":4,"classes":[[4]]})"), SchemaError);
    CHECK_THROWS_AS(mask_from_json(R"({"layer":"Z3","layer_dim":4,"classes":[[]]})"), SchemaError);
    CHECK_THROWS_AS(mask_from_json(R"({"layer":"Z3"})"), SchemaError);
}

TEST_CASE("monitoring networks") {
    std::mt19937_64 rng(72);
    TraceSet traces;
    traces.meta.class_count = 2;
    traces.meta.layers = {{"L", 3, Quantity::pre_activation}};
    for (int i = 0; i < 200; ++i) {
        const int pred = i % 2;
        const Vector v = fixtures::random_vector(rng, 3);
        // neuron 0 decides correctness for class 0; class 1 is always right
        const bool right = pred == 1 || v[0] > 0;
        traces.samples.push_back(fixtures::sample("L", v, right ? pred : 1 - pred, pred, "s" + std::to_string(i)));
    }
    MonitoringNetHyper hyper;
    hyper.epochs = 40;
    const TrainResult net0 = train_monitoring_nn(traces, "L", 0, hyper);
    CHECK(net0.accuracy > 0.9);
    CHECK(net0.net.input_dim() == 3);
    CHECK(net0.net.output_dim() == 1);
    CHECK_THROWS_AS(train_monitoring_nn(traces, "L", 1, hyper), OneClassOnly);

    std::vector<std::optional<NeuralNet>> nets{net0.net, net0.net};
    const AbsScoreTable table = abs_scores_via_monitoring_nn(nets, traces, "L");
    CHECK(table.complete());
    CHECK(table.scores(0, 0) > table.scores(0, 1));
    CHECK(table.scores(0, 0) > table.scores(0, 2));
    nets[1].reset();
    CHECK_THROWS_AS(abs_scores_via_monitoring_nn(nets, traces, "L"), MissingNet);
    nets.pop_back();
    CHECK_THROWS_AS(abs_scores_via_monitoring_nn(nets, traces, "L"), MissingNet);
}
