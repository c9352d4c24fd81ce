#include "omsmon/monitors.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <set>
#include <sstream>

#include <json.hpp>

#include "omsmon/clustering.hpp"
#include "omsmon/error.hpp"

namespace omsmon {

std::string_view to_string(MonitorKind kind) {
    switch (kind) {
        case MonitorKind::gaussian: return "gaussian";
        case MonitorKind::box: return "box";
        case MonitorKind::clustered_gaussian: return "clustered_gaussian";
        case MonitorKind::multivariate_gaussian: return "multivariate_gaussian";
    }
    return "gaussian";
}

MonitorKind parse_monitor_kind(std::string_view text) {
    if (text == "gaussian") return MonitorKind::gaussian;
    if (text == "box") return MonitorKind::box;
    if (text == "clustered_gaussian") return MonitorKind::clustered_gaussian;
    if (text == "multivariate_gaussian") return MonitorKind::multivariate_gaussian;
    throw SchemaError("unknown monitor kind '" + std::string(text) + "'");
}

bool uses_votes(MonitorKind kind) { return kind != MonitorKind::multivariate_gaussian; }

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

void validate_config(const MonitorConfig& config) {
    if (config.clusters_per_class < 1) throw InvalidParameter("clusters_per_class must be at least 1");
    if (config.kind == MonitorKind::gaussian && config.clusters_per_class != 1) {
        throw InvalidParameter("the gaussian kind is unclustered; use clustered_gaussian for k > 1");
    }
    if (!(config.kappa > 0.0) || !std::isfinite(config.kappa)) throw InvalidParameter("kappa must be positive");
    if (!(config.gamma >= 0.0) || !std::isfinite(config.gamma)) throw InvalidParameter("gamma must be non-negative");
    if (!(config.ridge >= 0.0) || !std::isfinite(config.ridge)) throw InvalidParameter("ridge must be non-negative");
}

Vector restrict(const Vector& v, std::span<const std::size_t> neurons) {
    Vector out(static_cast<Eigen::Index>(neurons.size()));
    for (std::size_t i = 0; i < neurons.size(); ++i) out[static_cast<Eigen::Index>(i)] = v[static_cast<Eigen::Index>(neurons[i])];
    return out;
}

std::size_t count_distinct(std::vector<Vector> points) {
    std::sort(points.begin(), points.end(), [](const Vector& a, const Vector& b) {
        return std::lexicographical_compare(a.data(), a.data() + a.size(), b.data(), b.data() + b.size());
    });
    std::size_t distinct = points.empty() ? 0 : 1;
    for (std::size_t i = 1; i < points.size(); ++i) {
        if (points[i] != points[i - 1]) ++distinct;
    }
    return distinct;
}

ClusterProfile build_profile(const MonitorConfig& config, const std::vector<Vector>& members, const Vector& centroid) {
    ClusterProfile profile;
    profile.centroid = centroid;
    profile.member_count = members.size();
    const auto dim = static_cast<std::size_t>(centroid.size());

    switch (config.kind) {
        case MonitorKind::gaussian:
        case MonitorKind::clustered_gaussian: {
            std::vector<double> values(members.size());
            for (std::size_t t = 0; t < dim; ++t) {
                for (std::size_t i = 0; i < members.size(); ++i) values[i] = members[i][static_cast<Eigen::Index>(t)];
                if (values.size() < 2) {
                    // a singleton cluster has zero spread: its interval is the point itself
                    profile.intervals.push_back({values[0], values[0]});
                } else {
                    profile.intervals.push_back(empirical_interval(fit_gaussian(values), config.kappa));
                }
            }
            break;
        }
        case MonitorKind::box: {
            for (std::size_t t = 0; t < dim; ++t) {
                double lo = kInf;
                double hi = -kInf;
                for (const auto& m : members) {
                    lo = std::min(lo, m[static_cast<Eigen::Index>(t)]);
                    hi = std::max(hi, m[static_cast<Eigen::Index>(t)]);
                }
                // widen symmetrically about the center to (1 + gamma) times the width
                const double grow = config.gamma * (hi - lo) / 2.0;
                profile.intervals.push_back({lo - grow, hi + grow});
            }
            break;
        }
        case MonitorKind::multivariate_gaussian: {
            if (members.size() < 2) {
                Matrix covariance = Matrix::Identity(centroid.size(), centroid.size()) * config.ridge;
                profile.gaussian.emplace(members.front(), std::move(covariance));
            } else {
                profile.gaussian = fit_multivariate(members, config.ridge);
            }
            break;
        }
    }
    return profile;
}

double vote_fraction(const Vector& values, const std::vector<Interval>& intervals) {
    std::size_t inside = 0;
    for (std::size_t t = 0; t < intervals.size(); ++t) {
        if (intervals[t].contains(values[static_cast<Eigen::Index>(t)])) ++inside;
    }
    return static_cast<double>(inside) / static_cast<double>(intervals.size());
}

struct Routed {
    const ClassProfiles* profiles = nullptr;
    Vector values;
    std::vector<CentroidDistance> order;
};

// Looks up the predicted class and orders its clusters by centroid distance.
Routed route(const MonitorModel& model, const TraceSample& sample) {
    if (sample.pred_label < 0 || static_cast<std::size_t>(sample.pred_label) >= model.classes.size()) {
        throw SchemaError("sample '" + sample.id + "': pred_label " + std::to_string(sample.pred_label) +
                          " outside the monitor's " + std::to_string(model.classes.size()) + " classes");
    }
    const Vector& full = sample.vector(model.config.layer);
    if (static_cast<std::size_t>(full.size()) != model.layer_dim) {
        throw DimensionMismatch("sample '" + sample.id + "': layer '" + model.config.layer + "' has " +
                                std::to_string(full.size()) + " entries, monitor expects " +
                                std::to_string(model.layer_dim));
    }
    Routed routed;
    routed.profiles = &model.classes[static_cast<std::size_t>(sample.pred_label)];
    if (routed.profiles->degenerate()) return routed;
    routed.values = restrict(full, routed.profiles->monitored_neurons);
    std::vector<Vector> centroids;
    centroids.reserve(routed.profiles->clusters.size());
    for (const auto& cluster : routed.profiles->clusters) centroids.push_back(cluster.centroid);
    routed.order = nearest_centroids(routed.values, centroids);
    return routed;
}

}  // namespace

MonitorModel train_monitor(const MonitorConfig& config, const TraceSet& train, const WarningSink& warn) {
    validate_config(config);
    const LayerSpec& layer = train.meta.layer(config.layer);
    const std::size_t class_count = train.meta.class_count;

    if (config.mask) {
        const auto& mask = *config.mask;
        validate_mask(mask);
        if (mask.layer_dim != layer.dim) {
            throw SchemaError("mask was built for a layer of dimension " + std::to_string(mask.layer_dim) +
                              ", layer '" + layer.name + "' has dimension " + std::to_string(layer.dim));
        }
        if (mask.classes.size() != class_count) {
            throw SchemaError("mask covers " + std::to_string(mask.classes.size()) + " classes, traces have " +
                              std::to_string(class_count));
        }
    }

    MonitorModel model;
    model.config = config;
    model.layer_dim = layer.dim;
    model.classes.resize(class_count);

    std::vector<std::vector<Vector>> per_class(class_count);
    std::size_t skipped = 0;
    for (const auto& sample : train.samples) {
        if (!sample.correct()) {
            ++skipped;
            continue;
        }
        per_class[static_cast<std::size_t>(sample.true_label)].push_back(sample.vector(config.layer));
    }
    if (skipped > 0 && warn) {
        warn("ignored " + std::to_string(skipped) + " misclassified training samples");
    }

    for (std::size_t c = 0; c < class_count; ++c) {
        auto& profiles = model.classes[c];
        if (config.mask) {
            profiles.monitored_neurons = config.mask->classes[c];
        } else {
            profiles.monitored_neurons.resize(layer.dim);
            std::iota(profiles.monitored_neurons.begin(), profiles.monitored_neurons.end(), std::size_t{0});
        }
        if (per_class[c].size() < 2) {
            if (warn) {
                warn("TooFewSamples: class " + std::to_string(c) + " has " + std::to_string(per_class[c].size()) +
                     " training samples; it will always alarm");
            }
            continue;
        }
        std::vector<Vector> restricted;
        restricted.reserve(per_class[c].size());
        for (const auto& v : per_class[c]) restricted.push_back(restrict(v, profiles.monitored_neurons));

        std::size_t k = config.clusters_per_class;
        if (k > 1) {
            const std::size_t distinct = count_distinct(restricted);
            if (distinct < k) {
                if (warn) {
                    warn("class " + std::to_string(c) + " has only " + std::to_string(distinct) +
                         " distinct vectors; using k = " + std::to_string(distinct));
                }
                k = distinct;
            }
        }
        const std::uint64_t class_seed = config.seed ^ (0x9e3779b97f4a7c15ULL * (c + 1));
        const Clustering clustering = kmeans(restricted, k, class_seed);

        std::vector<std::vector<Vector>> members(k);
        for (std::size_t i = 0; i < restricted.size(); ++i) members[clustering.assignment[i]].push_back(restricted[i]);
        for (std::size_t j = 0; j < k; ++j) {
            profiles.clusters.push_back(build_profile(config, members[j], clustering.centroids[j]));
        }
    }
    return model;
}

RawScore raw_score(const MonitorModel& model, const TraceSample& sample) {
    const Routed routed = route(model, sample);
    RawScore result;
    if (routed.profiles->degenerate()) {
        result.score = -kInf;
        return result;
    }
    const bool votes = uses_votes(model.config.kind);
    result.score = -kInf;
    for (const auto& [cluster, distance] : routed.order) {
        const auto& profile = routed.profiles->clusters[cluster];
        const double value = votes ? vote_fraction(routed.values, profile.intervals)
                                   : mahalanobis(routed.values, *profile.gaussian);
        result.clusters.push_back({cluster, distance, value});
        const double score = votes ? value : -value;
        if (score > result.score) {
            result.score = score;
            result.best_cluster = cluster;
        }
    }
    return result;
}

Threshold calibrate_threshold(ThresholdKind kind, std::span<const double> scores, double target_accept) {
    if (scores.empty()) throw EmptyCalibration("calibration set is empty");
    if (!(target_accept >= 0.0 && target_accept <= 1.0)) {
        throw InvalidParameter("target_accept must lie in [0, 1]");
    }
    const auto n = scores.size();
    std::vector<double> sorted(scores.begin(), scores.end());

    if (target_accept <= 0.0) {
        if (kind == ThresholdKind::vote_fraction) return {kind, 0.0};
        double largest = 0.0;
        for (double s : sorted) {
            if (std::isfinite(s)) largest = std::max(largest, s);
        }
        return {kind, largest};
    }

    // smallest number of accepted samples whose rate reaches the target
    std::size_t needed = 1;
    while (needed < n && static_cast<double>(needed) / static_cast<double>(n) < target_accept) ++needed;

    if (kind == ThresholdKind::vote_fraction) {
        std::sort(sorted.begin(), sorted.end(), std::greater<>());
        const double tau = sorted[needed - 1];
        // degenerate-class samples (-inf) cannot be accepted by any fraction
        return {kind, std::isfinite(tau) ? tau : 0.0};
    }
    std::sort(sorted.begin(), sorted.end());
    double limit = sorted[needed - 1];
    if (!std::isfinite(limit)) {
        limit = 0.0;
        for (double s : sorted) {
            if (std::isfinite(s)) limit = std::max(limit, s);
        }
    }
    return {kind, limit};
}

MonitorModel calibrate(MonitorModel model, const TraceSet& calib, double target_accept) {
    if (calib.samples.empty()) throw EmptyCalibration("calibration set is empty");
    const bool votes = uses_votes(model.config.kind);
    std::vector<double> scores;
    scores.reserve(calib.samples.size());
    for (const auto& sample : calib.samples) {
        const double score = raw_score(model, sample).score;
        scores.push_back(votes ? score : -score);
    }
    model.threshold =
        calibrate_threshold(votes ? ThresholdKind::vote_fraction : ThresholdKind::distance, scores, target_accept);
    return model;
}

Verdict evaluate(const MonitorModel& model, const TraceSample& sample) {
    if (!model.threshold) throw NotCalibrated("monitor has no threshold; run calibrate first");
    const Routed routed = route(model, sample);
    Verdict verdict;
    if (routed.profiles->degenerate()) {
        verdict.score = -kInf;
        return verdict;
    }
    const double limit = model.threshold->value;

    if (uses_votes(model.config.kind)) {
        double best = -kInf;
        for (const auto& [cluster, distance] : routed.order) {
            const double fraction = vote_fraction(routed.values, routed.profiles->clusters[cluster].intervals);
            if (fraction > best) {
                best = fraction;
                verdict.best_cluster = cluster;
            }
            if (best >= 1.0) break;  // nothing can beat a full vote
        }
        verdict.score = best - limit;
        verdict.decision = best >= limit ? Decision::accept : Decision::alarm;
        return verdict;
    }

    double nearest = kInf;
    for (const auto& [cluster, distance] : routed.order) {
        const double d = mahalanobis(routed.values, *routed.profiles->clusters[cluster].gaussian);
        if (d < nearest) {
            nearest = d;
            verdict.best_cluster = cluster;
        }
    }
    verdict.score = limit - nearest;
    verdict.decision = nearest <= limit ? Decision::accept : Decision::alarm;
    return verdict;
}

namespace {

using json = nlohmann::ordered_json;

json vector_to_json(const Vector& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

Vector vector_from_json(const json& j) {
    const auto values = j.get<std::vector<double>>();
    return Eigen::Map<const Vector>(values.data(), static_cast<Eigen::Index>(values.size()));
}

json intervals_to_json(const std::vector<Interval>& intervals) {
    json out = json::array();
    for (const auto& interval : intervals) out.push_back(json::array({interval.lo, interval.hi}));
    return out;
}

std::vector<Interval> intervals_from_json(const json& j) {
    std::vector<Interval> out;
    for (const auto& pair : j) {
        if (!pair.is_array() || pair.size() != 2) throw SchemaError("interval must be a [lo, hi] pair");
        out.push_back({pair[0].get<double>(), pair[1].get<double>()});
    }
    return out;
}

}  // namespace

std::string model_to_json(const MonitorModel& model) {
    json j;
    j["version"] = kModelFormatVersion;
    json config;
    config["layer"] = model.config.layer;
    config["kind"] = to_string(model.config.kind);
    config["clusters_per_class"] = model.config.clusters_per_class;
    config["kappa"] = model.config.kappa;
    config["gamma"] = model.config.gamma;
    config["ridge"] = model.config.ridge;
    config["seed"] = model.config.seed;
    config["mask"] = model.config.mask ? json::parse(mask_to_json(*model.config.mask)) : json(nullptr);
    j["config"] = std::move(config);
    j["layer_dim"] = model.layer_dim;

    json per_class = json::array();
    json monitored = json::array();
    for (std::size_t c = 0; c < model.classes.size(); ++c) {
        const auto& profiles = model.classes[c];
        json entry;
        entry["class"] = c;
        entry["degenerate"] = profiles.degenerate();
        json clusters = json::array();
        for (const auto& cluster : profiles.clusters) {
            json cj;
            cj["centroid"] = vector_to_json(cluster.centroid);
            switch (model.config.kind) {
                case MonitorKind::gaussian:
                case MonitorKind::clustered_gaussian: cj["intervals"] = intervals_to_json(cluster.intervals); break;
                case MonitorKind::box: cj["box"] = intervals_to_json(cluster.intervals); break;
                case MonitorKind::multivariate_gaussian: {
                    cj["mean"] = vector_to_json(cluster.gaussian->mean());
                    json rows = json::array();
                    const Matrix& cov = cluster.gaussian->covariance();
                    for (Eigen::Index r = 0; r < cov.rows(); ++r) rows.push_back(vector_to_json(cov.row(r).transpose()));
                    cj["covariance"] = std::move(rows);
                    break;
                }
            }
            cj["member_count"] = cluster.member_count;
            clusters.push_back(std::move(cj));
        }
        entry["clusters"] = std::move(clusters);
        per_class.push_back(std::move(entry));
        monitored.push_back(profiles.monitored_neurons);
    }
    j["per_class"] = std::move(per_class);
    j["monitored_neurons"] = std::move(monitored);
    if (model.threshold) {
        json t;
        t["kind"] = model.threshold->kind == ThresholdKind::vote_fraction ? "vote_fraction" : "distance";
        t["value"] = model.threshold->value;
        j["threshold"] = std::move(t);
    } else {
        j["threshold"] = nullptr;
    }
    return j.dump(1);
}

MonitorModel model_from_json(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        throw SchemaError(std::string("model file is not valid JSON: ") + e.what());
    }
    try {
        if (!j.is_object() || !j.contains("version")) throw SchemaError("model file has no version field");
        const int version = j.at("version").get<int>();
        if (version != kModelFormatVersion) {
            throw SchemaError("model format version mismatch: expected " + std::to_string(kModelFormatVersion) +
                              ", found " + std::to_string(version));
        }
        MonitorModel model;
        const json& config = j.at("config");
        model.config.layer = config.at("layer").get<std::string>();
        model.config.kind = parse_monitor_kind(config.at("kind").get<std::string>());
        model.config.clusters_per_class = config.at("clusters_per_class").get<std::size_t>();
        model.config.kappa = config.at("kappa").get<double>();
        model.config.gamma = config.at("gamma").get<double>();
        model.config.ridge = config.at("ridge").get<double>();
        model.config.seed = config.at("seed").get<std::uint64_t>();
        if (!config.at("mask").is_null()) model.config.mask = mask_from_json(config.at("mask").dump());
        model.layer_dim = j.at("layer_dim").get<std::size_t>();

        const json& per_class = j.at("per_class");
        const json& monitored = j.at("monitored_neurons");
        if (per_class.size() != monitored.size()) throw SchemaError("per_class and monitored_neurons differ in length");
        model.classes.resize(per_class.size());
        for (std::size_t c = 0; c < per_class.size(); ++c) {
            auto& profiles = model.classes[c];
            profiles.monitored_neurons = monitored[c].get<std::vector<std::size_t>>();
            for (std::size_t t : profiles.monitored_neurons) {
                if (t >= model.layer_dim) throw SchemaError("monitored neuron index out of range");
            }
            const auto width = profiles.monitored_neurons.size();
            for (const auto& cj : per_class[c].at("clusters")) {
                ClusterProfile cluster;
                cluster.centroid = vector_from_json(cj.at("centroid"));
                cluster.member_count = cj.at("member_count").get<std::size_t>();
                switch (model.config.kind) {
                    case MonitorKind::gaussian:
                    case MonitorKind::clustered_gaussian: cluster.intervals = intervals_from_json(cj.at("intervals")); break;
                    case MonitorKind::box: cluster.intervals = intervals_from_json(cj.at("box")); break;
                    case MonitorKind::multivariate_gaussian: {
                        const Vector mean = vector_from_json(cj.at("mean"));
                        const json& rows = cj.at("covariance");
                        Matrix cov(mean.size(), mean.size());
                        if (rows.size() != static_cast<std::size_t>(mean.size())) {
                            throw SchemaError("covariance shape does not match mean");
                        }
                        for (std::size_t r = 0; r < rows.size(); ++r) {
                            const Vector row = vector_from_json(rows[r]);
                            if (row.size() != mean.size()) throw SchemaError("covariance shape does not match mean");
                            cov.row(static_cast<Eigen::Index>(r)) = row.transpose();
                        }
                        cluster.gaussian.emplace(mean, cov);
                        break;
                    }
                }
                const bool width_ok = static_cast<std::size_t>(cluster.centroid.size()) == width &&
                                      (cluster.gaussian ? cluster.gaussian->dim() == width
                                                        : cluster.intervals.size() == width);
                if (!width_ok) throw SchemaError("cluster of class " + std::to_string(c) + " has the wrong dimension");
                profiles.clusters.push_back(std::move(cluster));
            }
        }
        const json& threshold = j.at("threshold");
        if (!threshold.is_null()) {
            const auto kind = threshold.at("kind").get<std::string>();
            if (kind != "vote_fraction" && kind != "distance") throw SchemaError("unknown threshold kind '" + kind + "'");
            model.threshold = Threshold{kind == "vote_fraction" ? ThresholdKind::vote_fraction : ThresholdKind::distance,
                                        threshold.at("value").get<double>()};
        }
        return model;
    } catch (const nlohmann::json::exception& e) {
        throw SchemaError(std::string("malformed model file: ") + e.what());
    } catch (const NotPositiveDefinite& e) {
        throw SchemaError(std::string("model file holds an invalid covariance: ") + e.what());
    }
}

void save_model(const MonitorModel& model, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
    out << model_to_json(model) << '\n';
    if (!out) throw IoError("write error in '" + path.string() + "'");
}

MonitorModel load_model(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open '" + path.string() + "'");
    std::stringstream buffer;
    buffer << in.rdbuf();
    return model_from_json(buffer.str());
}

}  // namespace omsmon
