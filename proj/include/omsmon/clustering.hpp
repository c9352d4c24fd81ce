#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "omsmon/types.hpp"

namespace omsmon {

struct Clustering {
    std::vector<Vector> centroids;
    std::vector<std::size_t> assignment;  ///< per input vector, in input order
    double sse = 0.0;

    std::size_t k() const { return centroids.size(); }
};

struct KMeansOptions {
    double tolerance = 1e-6;  ///< stop once no centroid moves farther than this
    std::size_t max_iterations = 100;
    /// Called after every Lloyd update with the iteration number and the SSE.
    std::function<void(std::size_t, double)> on_iteration;
};

/// Lloyd's algorithm with k-means++ seeding. The result does not depend on
/// the order of `vectors` beyond the labelling of clusters.
Clustering kmeans(std::span<const Vector> vectors, std::size_t k, std::uint64_t seed, const KMeansOptions& options = {});

/// Sum of squared Euclidean distances of each vector to its assigned centroid.
double sum_squared_error(std::span<const Vector> vectors, std::span<const Vector> centroids,
                         std::span<const std::size_t> assignment);

struct CentroidDistance {
    std::size_t cluster = 0;
    double distance = 0.0;
};

/// All centroids by ascending Euclidean distance to x; ties go to the smaller index.
std::vector<CentroidDistance> nearest_centroids(const Vector& x, std::span<const Vector> centroids);
std::vector<CentroidDistance> nearest_centroids(const Vector& x, const Clustering& clustering);

}  // namespace omsmon
