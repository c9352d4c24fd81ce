#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "omsmon/trace.hpp"

namespace fixtures {

using omsmon::Vector;

// The 30 two-dimensional activation vectors of the worked example.
inline constexpr std::array<double, 30> kFigX{2,   2.5, 2.2, 2.8, 1,   2,   1.2, 1.8, 4,   3.5, 4.2, 4,   3,   3.8, 3.2,
                                              3.5, 5,   4.8, 5.2, 5,   3,   3.5, 3.6, 3,   2.7, 2.7, 2.2, 2.6, 2.7, 2.1};
inline constexpr std::array<double, 30> kFigY{2,   1.5, 2,   2.2, 1,   1.5, 1.8, 1.2, 4,   3,   3.5, 3,   4,   3.8, 3.2,
                                              3.5, 4.2, 3.9, 5.5, 3.5, 2.1, 3.3, 3.4, 3.2, 1.9, 1.6, 2.2, 2.1, 2,   2.2};

inline std::vector<Vector> fig_points() {
    std::vector<Vector> points;
    for (std::size_t i = 0; i < kFigX.size(); ++i) points.push_back(Vector{{kFigX[i], kFigY[i]}});
    return points;
}

// Single-class-pair trace set with every point labelled as correctly predicted class 0.
inline omsmon::TraceSet fig_traces() {
    omsmon::TraceSet set;
    set.meta.class_count = 2;
    set.meta.layers = {{"Z2", 2, omsmon::Quantity::pre_activation}};
    set.meta.source = "fixture";
    const auto points = fig_points();
    for (std::size_t i = 0; i < points.size(); ++i) {
        omsmon::TraceSample s;
        s.id = "p" + std::to_string(i);
        s.vectors.emplace("Z2", points[i]);
        set.samples.push_back(std::move(s));
    }
    return set;
}

inline omsmon::TraceSample sample(const std::string& layer, const Vector& v, int true_label, int pred_label,
                                  std::string id = "x") {
    omsmon::TraceSample s;
    s.id = std::move(id);
    s.true_label = true_label;
    s.pred_label = pred_label;
    s.vectors.emplace(layer, v);
    return s;
}

inline Vector random_vector(std::mt19937_64& rng, std::size_t d, double scale = 1.0) {
    std::normal_distribution<double> normal(0.0, scale);
    Vector v(static_cast<Eigen::Index>(d));
    for (Eigen::Index i = 0; i < v.size(); ++i) v[i] = normal(rng);
    return v;
}

// Random trace set over one layer "L" with `classes` classes; every sample correct.
inline omsmon::TraceSet random_traces(std::mt19937_64& rng, std::size_t classes, std::size_t dim,
                                      std::size_t per_class, double spread = 1.0) {
    omsmon::TraceSet set;
    set.meta.class_count = classes;
    set.meta.layers = {{"L", dim, omsmon::Quantity::pre_activation}};
    std::uniform_real_distribution<double> centre(-3.0, 3.0);
    for (std::size_t c = 0; c < classes; ++c) {
        const std::size_t modes = 1 + rng() % 3;
        std::vector<Vector> centres;
        for (std::size_t m = 0; m < modes; ++m) {
            Vector v(static_cast<Eigen::Index>(dim));
            for (Eigen::Index i = 0; i < v.size(); ++i) v[i] = centre(rng);
            centres.push_back(v);
        }
        for (std::size_t i = 0; i < per_class; ++i) {
            const Vector v = centres[i % modes] + random_vector(rng, dim, spread);
            set.samples.push_back(sample("L", v, static_cast<int>(c), static_cast<int>(c),
                                         "c" + std::to_string(c) + "_" + std::to_string(i)));
        }
    }
    return set;
}

class TempDir {
public:
    TempDir() {
        std::random_device device;
        path_ = std::filesystem::temp_directory_path() / ("omsmon_test_" + std::to_string(device()) + "_" +
                                                          std::to_string(device()));
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    const std::filesystem::path& path() const { return path_; }
    std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

private:
    std::filesystem::path path_;
};

}  // namespace fixtures
