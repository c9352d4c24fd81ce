#pragma once

#include <cstddef>
#include <span>

#include "omsmon/types.hpp"

namespace omsmon {

struct GaussianParams {
    double mean = 0.0;
    double stddev = 0.0;  ///< maximum-likelihood (divide by n)
    std::size_t count = 0;
};

/// Closed interval [lo, hi].
struct Interval {
    double lo = 0.0;
    double hi = 0.0;

    bool contains(double value) const { return lo <= value && value <= hi; }
    bool operator==(const Interval&) const = default;
};

/// Two-pass mean and ML standard deviation. Needs at least 2 values.
GaussianParams fit_gaussian(std::span<const double> values);

/// [mean - kappa*stddev, mean + kappa*stddev]; kappa = 2 is the empirical rule's ~95% band.
Interval empirical_interval(const GaussianParams& params, double kappa = 2.0);

/// Gaussian with a cached lower Cholesky factor of its covariance.
class MultivariateGaussian {
public:
    MultivariateGaussian() = default;
    /// Factorizes `covariance`; throws NotPositiveDefinite when that fails.
    MultivariateGaussian(Vector mean, Matrix covariance);

    std::size_t dim() const { return static_cast<std::size_t>(mean_.size()); }
    const Vector& mean() const { return mean_; }
    const Matrix& covariance() const { return covariance_; }
    const Matrix& cholesky_factor() const { return cholesky_; }

private:
    Vector mean_;
    Matrix covariance_;
    Matrix cholesky_;
};

/// ML covariance plus ridge * I. Needs at least 2 vectors of equal length.
MultivariateGaussian fit_multivariate(std::span<const Vector> vectors, double ridge = 1e-6);

/// sqrt((x - mu)^T Sigma^{-1} (x - mu)) via a triangular solve against the Cholesky factor.
double mahalanobis(const Vector& x, const MultivariateGaussian& gaussian);

}  // namespace omsmon
