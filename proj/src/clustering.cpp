#include "omsmon/clustering.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <string>

#include "omsmon/error.hpp"

namespace omsmon {

namespace {

bool lexicographic_less(const Vector& a, const Vector& b) {
    return std::lexicographical_compare(a.data(), a.data() + a.size(), b.data(), b.data() + b.size());
}

std::size_t nearest(const Vector& x, std::span<const Vector> centroids, double* squared_distance = nullptr) {
    std::size_t best = 0;
    double best_d2 = (x - centroids[0]).squaredNorm();
    for (std::size_t c = 1; c < centroids.size(); ++c) {
        const double d2 = (x - centroids[c]).squaredNorm();
        if (d2 < best_d2) {
            best_d2 = d2;
            best = c;
        }
    }
    if (squared_distance != nullptr) *squared_distance = best_d2;
    return best;
}

std::vector<Vector> plus_plus_seeds(std::span<const Vector> points, std::size_t k, std::mt19937_64& rng) {
    std::vector<Vector> seeds;
    seeds.reserve(k);
    std::uniform_int_distribution<std::size_t> first(0, points.size() - 1);
    seeds.push_back(points[first(rng)]);

    std::vector<double> d2(points.size());
    for (std::size_t i = 0; i < points.size(); ++i) d2[i] = (points[i] - seeds[0]).squaredNorm();

    while (seeds.size() < k) {
        const double total = std::accumulate(d2.begin(), d2.end(), 0.0);
        std::uniform_real_distribution<double> uniform(0.0, total);
        const double target = uniform(rng);
        std::size_t chosen = points.size();
        double running = 0.0;
        std::size_t last_positive = points.size();
        for (std::size_t i = 0; i < points.size(); ++i) {
            if (d2[i] <= 0.0) continue;
            last_positive = i;
            running += d2[i];
            if (running > target) {
                chosen = i;
                break;
            }
        }
        if (chosen == points.size()) chosen = last_positive;  // rounding left target at the total
        seeds.push_back(points[chosen]);
        for (std::size_t i = 0; i < points.size(); ++i) {
            d2[i] = std::min(d2[i], (points[i] - seeds.back()).squaredNorm());
        }
    }
    return seeds;
}

// Moves the point farthest from its centroid into each empty cluster.
void repair_empty(std::span<const Vector> points, std::vector<Vector>& centroids, std::vector<std::size_t>& assignment) {
    std::vector<std::size_t> sizes(centroids.size(), 0);
    for (std::size_t a : assignment) ++sizes[a];
    for (std::size_t c = 0; c < centroids.size(); ++c) {
        if (sizes[c] > 0) continue;
        std::size_t farthest = points.size();
        double farthest_d2 = -1.0;
        for (std::size_t i = 0; i < points.size(); ++i) {
            if (sizes[assignment[i]] < 2) continue;
            const double d2 = (points[i] - centroids[assignment[i]]).squaredNorm();
            if (d2 > farthest_d2) {
                farthest_d2 = d2;
                farthest = i;
            }
        }
        --sizes[assignment[farthest]];
        assignment[farthest] = c;
        sizes[c] = 1;
        centroids[c] = points[farthest];
    }
}

}  // namespace

double sum_squared_error(std::span<const Vector> vectors, std::span<const Vector> centroids,
                         std::span<const std::size_t> assignment) {
    double sse = 0.0;
    for (std::size_t i = 0; i < vectors.size(); ++i) sse += (vectors[i] - centroids[assignment[i]]).squaredNorm();
    return sse;
}

Clustering kmeans(std::span<const Vector> vectors, std::size_t k, std::uint64_t seed, const KMeansOptions& options) {
    if (k == 0) throw InvalidParameter("k must be at least 1");
    if (vectors.empty()) throw TooFewDistinctPoints("cannot cluster an empty set of vectors");
    const Eigen::Index d = vectors.front().size();
    for (const auto& v : vectors) {
        if (v.size() != d) throw DimensionMismatch("vectors to cluster differ in length");
    }

    // work in a canonical (sorted) order so the input order cannot influence seeding
    std::vector<std::size_t> order(vectors.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return lexicographic_less(vectors[a], vectors[b]); });
    std::vector<Vector> points;
    points.reserve(vectors.size());
    for (std::size_t i : order) points.push_back(vectors[i]);

    std::size_t distinct = 1;
    for (std::size_t i = 1; i < points.size(); ++i) {
        if (points[i] != points[i - 1]) ++distinct;
    }
    if (k > distinct) {
        throw TooFewDistinctPoints("k = " + std::to_string(k) + " exceeds the " + std::to_string(distinct) +
                                   " distinct vectors available");
    }

    std::mt19937_64 rng(seed);
    std::vector<Vector> centroids = plus_plus_seeds(points, k, rng);
    std::vector<std::size_t> assignment(points.size(), 0);
    double sse = 0.0;

    for (std::size_t iteration = 0; iteration < options.max_iterations; ++iteration) {
        for (std::size_t i = 0; i < points.size(); ++i) assignment[i] = nearest(points[i], centroids);
        repair_empty(points, centroids, assignment);

        std::vector<Vector> sums(k, Vector::Zero(d));
        std::vector<std::size_t> counts(k, 0);
        for (std::size_t i = 0; i < points.size(); ++i) {
            sums[assignment[i]] += points[i];
            ++counts[assignment[i]];
        }
        double shift = 0.0;
        for (std::size_t c = 0; c < k; ++c) {
            Vector updated = sums[c] / static_cast<double>(counts[c]);
            shift = std::max(shift, (updated - centroids[c]).norm());
            centroids[c] = std::move(updated);
        }
        sse = sum_squared_error(points, centroids, assignment);
        if (options.on_iteration) options.on_iteration(iteration, sse);
        if (shift < options.tolerance) break;
    }

    Clustering result;
    result.centroids = std::move(centroids);
    result.assignment.resize(vectors.size());
    for (std::size_t i = 0; i < order.size(); ++i) result.assignment[order[i]] = assignment[i];
    result.sse = sse;
    return result;
}

std::vector<CentroidDistance> nearest_centroids(const Vector& x, std::span<const Vector> centroids) {
    std::vector<CentroidDistance> out;
    out.reserve(centroids.size());
    for (std::size_t c = 0; c < centroids.size(); ++c) {
        if (centroids[c].size() != x.size()) {
            throw DimensionMismatch("vector has " + std::to_string(x.size()) + " entries, centroid " +
                                    std::to_string(c) + " has " + std::to_string(centroids[c].size()));
        }
        out.push_back({c, (x - centroids[c]).norm()});
    }
    std::stable_sort(out.begin(), out.end(),
                     [](const CentroidDistance& a, const CentroidDistance& b) { return a.distance < b.distance; });
    return out;
}

std::vector<CentroidDistance> nearest_centroids(const Vector& x, const Clustering& clustering) {
    return nearest_centroids(x, clustering.centroids);
}

}  // namespace omsmon
