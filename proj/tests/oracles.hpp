#pragma once

#include <cmath>
#include <vector>

#include "omsmon/monitors.hpp"

namespace oracles {

using omsmon::Matrix;
using omsmon::Vector;

// Plain Gauss-Jordan with partial pivoting on nested vectors.
inline std::vector<std::vector<double>> invert(std::vector<std::vector<double>> a) {
    const std::size_t n = a.size();
    std::vector<std::vector<double>> inv(n, std::vector<double>(n, 0.0));
    for (std::size_t i = 0; i < n; ++i) inv[i][i] = 1.0;
    for (std::size_t col = 0; col < n; ++col) {
        std::size_t pivot = col;
        for (std::size_t r = col + 1; r < n; ++r) {
            if (std::abs(a[r][col]) > std::abs(a[pivot][col])) pivot = r;
        }
        std::swap(a[col], a[pivot]);
        std::swap(inv[col], inv[pivot]);
        const double p = a[col][col];
        for (std::size_t c = 0; c < n; ++c) {
            a[col][c] /= p;
            inv[col][c] /= p;
        }
        for (std::size_t r = 0; r < n; ++r) {
            if (r == col) continue;
            const double f = a[r][col];
            for (std::size_t c = 0; c < n; ++c) {
                a[r][c] -= f * a[col][c];
                inv[r][c] -= f * inv[col][c];
            }
        }
    }
    return inv;
}

inline double explicit_mahalanobis(const Vector& x, const Vector& mu, const Matrix& cov) {
    const auto n = static_cast<std::size_t>(x.size());
    std::vector<std::vector<double>> a(n, std::vector<double>(n));
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) a[i][j] = cov(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
    const auto inv = invert(a);
    double q = 0.0;
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j)
            q += (x[static_cast<Eigen::Index>(i)] - mu[static_cast<Eigen::Index>(i)]) * inv[i][j] *
                 (x[static_cast<Eigen::Index>(j)] - mu[static_cast<Eigen::Index>(j)]);
    return std::sqrt(q);
}

// Accepts when any cluster of the predicted class passes, in whatever order.
inline bool brute_force_accepts(const omsmon::MonitorModel& model, const omsmon::TraceSample& sample) {
    const auto& profiles = model.classes.at(static_cast<std::size_t>(sample.pred_label));
    const Vector& full = sample.vectors.at(model.config.layer);
    Vector v(static_cast<Eigen::Index>(profiles.monitored_neurons.size()));
    for (std::size_t i = 0; i < profiles.monitored_neurons.size(); ++i) {
        v[static_cast<Eigen::Index>(i)] = full[static_cast<Eigen::Index>(profiles.monitored_neurons[i])];
    }
    const double limit = model.threshold->value;
    for (const auto& cluster : profiles.clusters) {
        if (cluster.gaussian) {
            if (explicit_mahalanobis(v, cluster.gaussian->mean(), cluster.gaussian->covariance()) <= limit) return true;
            continue;
        }
        std::size_t inside = 0;
        for (std::size_t t = 0; t < cluster.intervals.size(); ++t) {
            const double x = v[static_cast<Eigen::Index>(t)];
            if (cluster.intervals[t].lo <= x && x <= cluster.intervals[t].hi) ++inside;
        }
        if (static_cast<double>(inside) / static_cast<double>(cluster.intervals.size()) >= limit) return true;
    }
    return false;
}

}  // namespace oracles
