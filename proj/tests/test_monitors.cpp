#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>

#include "fixtures.hpp"
#include "oracles.hpp"
#include "properties.hpp"
#include "omsmon/error.hpp"
#include "omsmon/monitors.hpp"

using namespace omsmon;

namespace {

MonitorModel fig_monitor(std::size_t k) {
    MonitorConfig config{"Z2", k == 1 ? MonitorKind::gaussian : MonitorKind::clustered_gaussian, k};
    config.kappa = 2.0;
    MonitorModel model = train_monitor(config, fixtures::fig_traces());
    model.threshold = Threshold{ThresholdKind::vote_fraction, 1.0};
    return model;
}

}  // namespace

TEST_CASE("worked example: clustering exposes the (2, 4) activation") {
    const TraceSample s = fixtures::sample("Z2", Vector{{2.0, 4.0}}, 0, 0);
    const MonitorModel plain = fig_monitor(1);
    const MonitorModel clustered = fig_monitor(2);
    CHECK(evaluate(plain, s).decision == Decision::accept);
    CHECK(evaluate(clustered, s).decision == Decision::alarm);
    const RawScore raw = raw_score(clustered, s);
    REQUIRE(raw.clusters.size() == 2);
    CHECK(raw.clusters[0].value == 0.5);
    CHECK(raw.clusters[1].value == 0.5);
    CHECK(raw.clusters[0].centroid_distance <= raw.clusters[1].centroid_distance);
}

TEST_CASE("unclustered intervals equal brute-force mean +- kappa * stddev") {
    std::mt19937_64 rng(50);
    for (int trial = 0; trial < 30; ++trial) {
        const TraceSet train = fixtures::random_traces(rng, 3, 1 + trial % 5, 20);
        MonitorConfig config{"L", MonitorKind::gaussian, 1};
        config.kappa = 0.5 + trial % 4;
        const MonitorModel model = train_monitor(config, train);
        for (std::size_t c = 0; c < 3; ++c) {
            const auto& cluster = model.classes[c].clusters.at(0);
            for (std::size_t t = 0; t < cluster.intervals.size(); ++t) {
                double sum = 0, n = 0;
                for (const auto& s : train.samples)
                    if (s.true_label == static_cast<int>(c)) sum += s.vectors.at("L")[static_cast<Eigen::Index>(t)], ++n;
                const double mean = sum / n;
                double ss = 0;
                for (const auto& s : train.samples)
                    if (s.true_label == static_cast<int>(c))
                        ss += std::pow(s.vectors.at("L")[static_cast<Eigen::Index>(t)] - mean, 2);
                const double sd = std::sqrt(ss / n);
                CHECK(cluster.intervals[t].lo == doctest::Approx(mean - config.kappa * sd).epsilon(1e-12));
                CHECK(cluster.intervals[t].hi == doctest::Approx(mean + config.kappa * sd).epsilon(1e-12));
            }
        }
    }
}

TEST_CASE("box bounds are the observed range widened by gamma") {
    TraceSet train;
    train.meta.class_count = 2;
    train.meta.layers = {{"L", 2, Quantity::activation}};
    for (double x : {1.0, 3.0, 2.0}) train.samples.push_back(fixtures::sample("L", Vector{{x, -x}}, 1, 1));
    train.samples.push_back(fixtures::sample("L", Vector{{0.0, 0.0}}, 0, 0));
    train.samples.push_back(fixtures::sample("L", Vector{{0.0, 0.0}}, 0, 0));
    train.samples.push_back(fixtures::sample("L", Vector{{9.0, 9.0}}, 0, 1));
    MonitorConfig config{"L", MonitorKind::box, 1};
    config.gamma = 0.5;
    std::vector<std::string> warnings;
    const MonitorModel model = train_monitor(config, train, [&](const std::string& w) { warnings.push_back(w); });
    const auto& box = model.classes[1].clusters.at(0).intervals;
    CHECK(box[0] == Interval{0.5, 3.5});
    CHECK(box[1] == Interval{-3.5, -0.5});
    CHECK(model.classes[0].clusters.at(0).intervals[0] == Interval{0.0, 0.0});
    CHECK(warnings.size() == 1);  // the misclassified sample

    config.gamma = 0.0;
    const MonitorModel exact = train_monitor(config, train);
    CHECK(exact.classes[1].clusters.at(0).intervals[0] == Interval{1.0, 3.0});
}

TEST_CASE("degenerate classes always alarm") {
    TraceSet train = fixtures::fig_traces();
    std::vector<std::string> warnings;
    MonitorModel model =
        train_monitor({"Z2", MonitorKind::clustered_gaussian, 2}, train, [&](const std::string& w) { warnings.push_back(w); });
    CHECK(model.classes[1].degenerate());
    CHECK_FALSE(warnings.empty());
    model.threshold = Threshold{ThresholdKind::vote_fraction, 0.0};
    const Verdict v = evaluate(model, fixtures::sample("Z2", Vector{{3.0, 3.0}}, 1, 1));
    CHECK(v.decision == Decision::alarm);
    CHECK(v.score == -std::numeric_limits<double>::infinity());
    CHECK(evaluate(model, fixtures::sample("Z2", Vector{{3.0, 3.0}}, 0, 0)).decision == Decision::accept);
}

TEST_CASE("k is reduced to the number of distinct vectors") {
    TraceSet train;
    train.meta.class_count = 2;
    train.meta.layers = {{"L", 1, Quantity::activation}};
    for (int i = 0; i < 6; ++i) {
        train.samples.push_back(fixtures::sample("L", Vector{{double(i % 2)}}, 0, 0));
        train.samples.push_back(fixtures::sample("L", Vector{{double(i)}}, 1, 1));
    }
    std::vector<std::string> warnings;
    const MonitorModel model =
        train_monitor({"L", MonitorKind::clustered_gaussian, 3}, train, [&](const std::string& w) { warnings.push_back(w); });
    CHECK(model.classes[0].clusters.size() == 2);
    CHECK(model.classes[1].clusters.size() == 3);
    CHECK(warnings.size() == 1);
}

TEST_CASE("configuration and input errors") {
    const TraceSet train = fixtures::fig_traces();
    CHECK_THROWS_AS(train_monitor({"Z2", MonitorKind::gaussian, 2}, train), InvalidParameter);
    CHECK_THROWS_AS(train_monitor({"Z2", MonitorKind::clustered_gaussian, 0}, train), InvalidParameter);
    CHECK_THROWS_AS(train_monitor({"Z9", MonitorKind::gaussian, 1}, train), MissingLayer);
    MonitorConfig masked{"Z2", MonitorKind::gaussian, 1};
    masked.mask = SelectionMask{"Z2", 3, {{0}, {1}}};
    CHECK_THROWS_AS(train_monitor(masked, train), SchemaError);
    masked.mask = SelectionMask{"Z2", 2, {{0}}};
    CHECK_THROWS_AS(train_monitor(masked, train), SchemaError);

    const MonitorModel model = train_monitor({"Z2", MonitorKind::gaussian, 1}, train);
    CHECK_THROWS_AS(evaluate(model, fixtures::sample("Z2", Vector{{1.0, 1.0}}, 0, 0)), NotCalibrated);
    CHECK_THROWS_AS(calibrate(model, TraceSet{train.meta, {}}), EmptyCalibration);
    const MonitorModel calibrated = calibrate(model, train);
    CHECK_THROWS_AS(evaluate(calibrated, fixtures::sample("Z2", Vector{{1.0}}, 0, 0)), DimensionMismatch);
    CHECK_THROWS_AS(evaluate(calibrated, fixtures::sample("Z2", Vector{{1.0, 1.0}}, 0, 5)), SchemaError);
}

TEST_CASE("a mask confines the monitor to the selected neurons") {
    std::mt19937_64 rng(60);
    const TraceSet train = fixtures::random_traces(rng, 2, 4, 30);
    MonitorConfig config{"L", MonitorKind::clustered_gaussian, 2};
    config.mask = SelectionMask{"L", 4, {{1, 3}, {0}}};
    MonitorModel model = train_monitor(config, train);
    model.threshold = Threshold{ThresholdKind::vote_fraction, 1.0};
    CHECK(model.classes[0].monitored_neurons == std::vector<std::size_t>{1, 3});
    CHECK(model.classes[0].clusters.at(0).intervals.size() == 2);
    for (int i = 0; i < 100; ++i) {
        TraceSample s = properties::probe(rng, train, 1.0);
        s.pred_label = 0;
        const Decision before = evaluate(model, s).decision;
        s.vectors.at("L")[0] += 1e6;
        s.vectors.at("L")[2] -= 1e6;
        CHECK(evaluate(model, s).decision == before);
    }
}

TEST_CASE("evaluate agrees with the any-cluster oracle") {
    CHECK(properties::oracle_mismatches(300, 61) == 0);
}

TEST_CASE("verdict score is the best vote fraction minus tau") {
    std::mt19937_64 rng(60);
    for (int trial = 0; trial < 40; ++trial) {
        const TraceSet train = fixtures::random_traces(rng, 2, 1 + rng() % 5, 20);
        MonitorConfig config{"L", MonitorKind::clustered_gaussian, 1 + rng() % 3};
        config.seed = rng();
        const double tau = static_cast<double>(rng() % 5) / 4.0;
        const MonitorModel model = properties::with_threshold(train_monitor(config, train), tau);
        for (int i = 0; i < 10; ++i) {
            const TraceSample s = properties::probe(rng, train, 1.5);
            const RawScore raw = raw_score(model, s);
            double best = -1;
            std::optional<std::size_t> first;
            for (const auto& c : raw.clusters)
                if (c.value > best) best = c.value, first = c.cluster;
            const Verdict v = evaluate(model, s);
            CHECK(v.score == best - tau);
            CHECK(v.best_cluster == first);
        }
    }
}

TEST_CASE("gaussian equals clustered_gaussian with k = 1") {
    CHECK(properties::k1_mismatches(300, 62) == 0);
}

TEST_CASE("monotonicity in gamma, kappa and tau") {
    CHECK(properties::gamma_violations(60, 63) == 0);
    CHECK(properties::kappa_violations(60, 64) == 0);
    CHECK(properties::tau_violations(60, 65) == 0);
}

TEST_CASE("calibrated thresholds are the strictest that reach the target") {
    CHECK(properties::calibration_failures(300, 66) == 0);
    const std::vector<double> scores{0.2, 0.4, 0.4, 0.6, 0.8, 1.0, 1.0, 1.0, 1.0, 1.0};
    CHECK(calibrate_threshold(ThresholdKind::vote_fraction, scores, 0.5).value == 1.0);
    CHECK(calibrate_threshold(ThresholdKind::vote_fraction, scores, 0.6).value == 0.8);
    CHECK(calibrate_threshold(ThresholdKind::vote_fraction, scores, 0.9).value == 0.4);
    CHECK(calibrate_threshold(ThresholdKind::vote_fraction, scores, 0.0).value == 0.0);
    CHECK(calibrate_threshold(ThresholdKind::distance, scores, 0.1).value == 0.2);
    CHECK(calibrate_threshold(ThresholdKind::distance, scores, 0.0).value == 1.0);
    CHECK_THROWS_AS(calibrate_threshold(ThresholdKind::distance, std::vector<double>{}, 0.5), EmptyCalibration);
    CHECK_THROWS_AS(calibrate_threshold(ThresholdKind::distance, scores, 1.5), InvalidParameter);
}

TEST_CASE("calibration reaches the target on its own data") {
    std::mt19937_64 rng(67);
    for (MonitorKind kind : {MonitorKind::gaussian, MonitorKind::box, MonitorKind::clustered_gaussian,
                             MonitorKind::multivariate_gaussian}) {
        const TraceSet train = fixtures::random_traces(rng, 3, 4, 40);
        const TraceSet calib = fixtures::random_traces(rng, 3, 4, 40);
        MonitorConfig config{"L", kind, kind == MonitorKind::gaussian ? 1u : 2u};
        config.ridge = 1e-3;
        for (double target : {0.5, 0.9, 0.95, 1.0}) {
            const MonitorModel model = calibrate(train_monitor(config, train), calib, target);
            std::size_t accepted = 0;
            for (const auto& s : calib.samples) accepted += properties::accepts(model, s) ? 1 : 0;
            CHECK(static_cast<double>(accepted) / static_cast<double>(calib.samples.size()) >= target);
        }
    }
}

TEST_CASE("multivariate monitor with identity covariance ranks by Euclidean distance") {
    std::mt19937_64 rng(68);
    const TraceSet train = fixtures::random_traces(rng, 2, 3, 20);
    MonitorModel model = train_monitor({"L", MonitorKind::multivariate_gaussian, 1}, train);
    auto& cluster = model.classes[0].clusters.at(0);
    cluster.gaussian.emplace(cluster.centroid, Matrix::Identity(3, 3));
    model.threshold = Threshold{ThresholdKind::distance, 1.5};
    for (int i = 0; i < 200; ++i) {
        TraceSample a = properties::probe(rng, train, 2.0);
        TraceSample b = properties::probe(rng, train, 2.0);
        a.pred_label = b.pred_label = 0;
        const double da = (a.vectors.at("L") - cluster.centroid).norm();
        const double db = (b.vectors.at("L") - cluster.centroid).norm();
        const Verdict va = evaluate(model, a);
        const Verdict vb = evaluate(model, b);
        CHECK((da < db) == (va.score > vb.score));
        CHECK((va.decision == Decision::accept) == (da <= 1.5));
    }
}

TEST_CASE("model JSON round-trip preserves every verdict") {
    std::mt19937_64 rng(69);
    fixtures::TempDir dir;
    for (MonitorKind kind : {MonitorKind::gaussian, MonitorKind::box, MonitorKind::clustered_gaussian,
                             MonitorKind::multivariate_gaussian}) {
        const TraceSet train = fixtures::random_traces(rng, 3, 3, 30);
        MonitorConfig config{"L", kind, kind == MonitorKind::gaussian ? 1u : 3u};
        config.gamma = kind == MonitorKind::box ? 0.35 : 0.0;
        config.mask = SelectionMask{"L", 3, {{0, 1, 2}, {1}, {0, 2}}};
        const MonitorModel model = calibrate(train_monitor(config, train), train, 0.9);
        save_model(model, dir / "m.json");
        const MonitorModel back = load_model(dir / "m.json");
        CHECK(model_to_json(back) == model_to_json(model));
        CHECK(back.config.mask == model.config.mask);
        CHECK(back.config.gamma == config.gamma);
        for (int i = 0; i < 100; ++i) {
            const TraceSample s = properties::probe(rng, train, 1.0);
            const Verdict a = evaluate(model, s);
            const Verdict b = evaluate(back, s);
            CHECK(a.decision == b.decision);
            CHECK(a.score == b.score);
        }
    }
}

TEST_CASE("model files with the wrong version or shape are rejected") {
    const MonitorModel model = fig_monitor(2);
    std::string text = model_to_json(model);
    const auto pos = text.find("\"version\": 1");
    REQUIRE(pos != std::string::npos);
    std::string wrong = text;
    wrong.replace(pos, 12, "\"version\": 7");
    try {
        model_from_json(wrong);
        FAIL("expected SchemaError");
    } catch (const SchemaError& e) {
        CHECK(std::string(e.what()).find("expected 1, found 7") != std::string::npos);
    }
    CHECK_THROWS_AS(model_from_json("{}"), SchemaError);
    CHECK_THROWS_AS(model_from_json("[1,"), SchemaError);
    CHECK_THROWS_AS(load_model("/nonexistent/model.json"), IoError);
}
