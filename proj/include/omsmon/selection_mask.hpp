#pragma once

#include <cstddef>
#include <filesystem>
#include <string>
#include <vector>

namespace omsmon {

/// Per-class list of monitored neuron indices (ascending, unique, non-empty).
struct SelectionMask {
    std::string layer;
    std::size_t layer_dim = 0;
    std::vector<std::vector<std::size_t>> classes;

    bool operator==(const SelectionMask&) const = default;
};

/// Throws SchemaError if an invariant is violated.
void validate_mask(const SelectionMask& mask);

std::string mask_to_json(const SelectionMask& mask);
SelectionMask mask_from_json(const std::string& text);
void save_mask(const SelectionMask& mask, const std::filesystem::path& path);
SelectionMask load_mask(const std::filesystem::path& path);

}  // namespace omsmon
