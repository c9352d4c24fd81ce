#include "omsmon/selection_mask.hpp"

#include <fstream>
#include <sstream>

#include <json.hpp>

#include "omsmon/error.hpp"

namespace omsmon {

void validate_mask(const SelectionMask& mask) {
    if (mask.layer_dim == 0) throw SchemaError("mask layer_dim must be positive");
    for (std::size_t c = 0; c < mask.classes.size(); ++c) {
        const auto& indices = mask.classes[c];
        if (indices.empty()) throw SchemaError("mask selects no neurons for class " + std::to_string(c));
        for (std::size_t i = 0; i < indices.size(); ++i) {
            if (indices[i] >= mask.layer_dim) {
                throw SchemaError("mask index " + std::to_string(indices[i]) + " for class " + std::to_string(c) +
                                  " exceeds layer dimension " + std::to_string(mask.layer_dim));
            }
            if (i > 0 && indices[i] <= indices[i - 1]) {
                throw SchemaError("mask indices for class " + std::to_string(c) + " must be strictly ascending");
            }
        }
    }
}

std::string mask_to_json(const SelectionMask& mask) {
    nlohmann::ordered_json j;
    j["layer"] = mask.layer;
    j["layer_dim"] = mask.layer_dim;
    j["classes"] = mask.classes;
    return j.dump();
}

SelectionMask mask_from_json(const std::string& text) {
    try {
        const auto j = nlohmann::json::parse(text);
        SelectionMask mask;
        mask.layer = j.at("layer").get<std::string>();
        mask.layer_dim = j.at("layer_dim").get<std::size_t>();
        mask.classes = j.at("classes").get<std::vector<std::vector<std::size_t>>>();
        validate_mask(mask);
        return mask;
    } catch (const nlohmann::json::exception& e) {
        throw SchemaError(std::string("malformed mask: ") + e.what());
    }
}

void save_mask(const SelectionMask& mask, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
    out << mask_to_json(mask) << '\n';
    if (!out) throw IoError("write error in '" + path.string() + "'");
}

SelectionMask load_mask(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open '" + path.string() + "'");
    std::stringstream buffer;
    buffer << in.rdbuf();
    return mask_from_json(buffer.str());
}

}  // namespace omsmon
