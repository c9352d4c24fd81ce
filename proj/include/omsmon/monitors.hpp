#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "omsmon/selection_mask.hpp"
#include "omsmon/stats.hpp"
#include "omsmon/trace.hpp"

namespace omsmon {

enum class MonitorKind { gaussian, box, clustered_gaussian, multivariate_gaussian };

std::string_view to_string(MonitorKind kind);
MonitorKind parse_monitor_kind(std::string_view text);

/// True for the kinds decided by a vote fraction (all but multivariate_gaussian).
bool uses_votes(MonitorKind kind);

struct MonitorConfig {
    std::string layer;
    MonitorKind kind = MonitorKind::clustered_gaussian;
    std::size_t clusters_per_class = 1;  ///< 1 means no clustering
    double kappa = 2.0;                  ///< interval half-width in stddevs (Gaussian kinds)
    double gamma = 0.0;                  ///< box enlargement (box kind)
    double ridge = 1e-6;                 ///< covariance regularization (multivariate kind)
    std::uint64_t seed = 0;              ///< K-Means seed
    std::optional<SelectionMask> mask;
};

/// One cluster of a class. `intervals` holds the per-neuron Gaussian
/// intervals for the Gaussian kinds and the box bounds for the box kind;
/// `gaussian` is set for the multivariate kind only.
struct ClusterProfile {
    Vector centroid;
    std::vector<Interval> intervals;
    std::optional<MultivariateGaussian> gaussian;
    std::size_t member_count = 0;
};

struct ClassProfiles {
    std::vector<std::size_t> monitored_neurons;
    std::vector<ClusterProfile> clusters;  ///< empty for a degenerate class

    bool degenerate() const { return clusters.empty(); }
};

enum class ThresholdKind { vote_fraction, distance };

struct Threshold {
    ThresholdKind kind = ThresholdKind::vote_fraction;
    double value = 0.0;

    bool operator==(const Threshold&) const = default;
};

struct MonitorModel {
    MonitorConfig config;
    std::size_t layer_dim = 0;
    std::vector<ClassProfiles> classes;  ///< indexed by class label
    std::optional<Threshold> threshold;  ///< unset until calibrated
};

using WarningSink = std::function<void(const std::string&)>;

/// Builds per-class profiles from correctly classified training traces.
/// Classes with fewer than 2 samples become degenerate (always alarm).
MonitorModel train_monitor(const MonitorConfig& config, const TraceSet& train, const WarningSink& warn = {});

struct ClusterScore {
    std::size_t cluster = 0;
    double centroid_distance = 0.0;
    double value = 0.0;  ///< vote fraction, or Mahalanobis distance for the multivariate kind
};

struct RawScore {
    std::vector<ClusterScore> clusters;  ///< in ascending centroid-distance order
    /// Max vote fraction, or the negated minimum Mahalanobis distance;
    /// -infinity for a degenerate predicted class.
    double score = 0.0;
    std::optional<std::size_t> best_cluster;
};

/// Scores a sample against the profiles of its predicted class.
RawScore raw_score(const MonitorModel& model, const TraceSample& sample);

/// Picks the strictest threshold that still accepts at least `target_accept`
/// of the given calibration scores (max vote fractions, or minimum
/// Mahalanobis distances for ThresholdKind::distance).
Threshold calibrate_threshold(ThresholdKind kind, std::span<const double> scores, double target_accept);

/// Calibrates on correctly classified ID samples not used for training.
MonitorModel calibrate(MonitorModel model, const TraceSet& calib, double target_accept = 0.90);

enum class Decision { accept, alarm };

struct Verdict {
    Decision decision = Decision::alarm;
    /// Signed margin: >= 0 exactly when accepted.
    double score = 0.0;
    std::optional<std::size_t> best_cluster;
};

/// Runtime check. Vote kinds score the best vote fraction over the predicted
/// class's clusters, visited closest-centroid first; best_cluster is the first
/// one attaining it. The multivariate kind scores the smallest distance.
Verdict evaluate(const MonitorModel& model, const TraceSample& sample);

std::string model_to_json(const MonitorModel& model);
MonitorModel model_from_json(const std::string& text);
void save_model(const MonitorModel& model, const std::filesystem::path& path);
MonitorModel load_model(const std::filesystem::path& path);

inline constexpr int kModelFormatVersion = 1;

}  // namespace omsmon
