#pragma once

#include <string_view>

#include <Eigen/Dense>

namespace omsmon {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

/// Which value of a neuron is observed: the affine sum z or f(z).
enum class Quantity { pre_activation, activation };

std::string_view to_string(Quantity quantity);
Quantity parse_quantity(std::string_view text);

}  // namespace omsmon
