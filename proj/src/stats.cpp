#include "omsmon/stats.hpp"

#include <cmath>
#include <string>

#include "omsmon/error.hpp"

namespace omsmon {

GaussianParams fit_gaussian(std::span<const double> values) {
    if (values.size() < 2) {
        throw TooFewSamples("a Gaussian needs at least 2 values, got " + std::to_string(values.size()));
    }
    const auto n = static_cast<double>(values.size());
    double sum = 0.0;
    for (double v : values) sum += v;
    double mean = sum / n;
    // one correction step removes most of the rounding left in the first estimate
    double residual = 0.0;
    for (double v : values) residual += v - mean;
    mean += residual / n;
    double squares = 0.0;
    for (double v : values) squares += (v - mean) * (v - mean);
    return {mean, std::sqrt(squares / n), values.size()};
}

Interval empirical_interval(const GaussianParams& params, double kappa) {
    const double half = kappa * params.stddev;
    return {params.mean - half, params.mean + half};
}

MultivariateGaussian::MultivariateGaussian(Vector mean, Matrix covariance)
    : mean_(std::move(mean)), covariance_(std::move(covariance)) {
    if (covariance_.rows() != mean_.size() || covariance_.cols() != mean_.size()) {
        throw DimensionMismatch("covariance shape does not match mean length " + std::to_string(mean_.size()));
    }
    Eigen::LLT<Matrix> llt(covariance_);
    if (llt.info() != Eigen::Success) {
        throw NotPositiveDefinite("covariance matrix is not positive definite (consider a ridge > 0)");
    }
    cholesky_ = llt.matrixL();
}

MultivariateGaussian fit_multivariate(std::span<const Vector> vectors, double ridge) {
    if (vectors.size() < 2) {
        throw TooFewSamples("a multivariate Gaussian needs at least 2 vectors, got " + std::to_string(vectors.size()));
    }
    if (!(ridge >= 0.0)) throw InvalidParameter("ridge must be non-negative");
    const Eigen::Index d = vectors.front().size();
    Vector mean = Vector::Zero(d);
    for (const auto& v : vectors) {
        if (v.size() != d) throw DimensionMismatch("vectors differ in length");
        mean += v;
    }
    const auto n = static_cast<double>(vectors.size());
    mean /= n;
    Matrix scatter = Matrix::Zero(d, d);
    for (const auto& v : vectors) {
        const Vector centered = v - mean;
        scatter.noalias() += centered * centered.transpose();
    }
    Matrix covariance = scatter / n;
    covariance.diagonal().array() += ridge;
    return MultivariateGaussian(std::move(mean), std::move(covariance));
}

double mahalanobis(const Vector& x, const MultivariateGaussian& gaussian) {
    if (static_cast<std::size_t>(x.size()) != gaussian.dim()) {
        throw DimensionMismatch("vector has " + std::to_string(x.size()) + " entries, Gaussian has dimension " +
                                std::to_string(gaussian.dim()));
    }
    const Vector whitened = gaussian.cholesky_factor().triangularView<Eigen::Lower>().solve(x - gaussian.mean());
    return whitened.norm();
}

}  // namespace omsmon
