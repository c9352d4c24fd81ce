#include "omsmon/trace.hpp"

#include "omsmon/error.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

#include <zlib.h>

#include <json.hpp>

namespace omsmon {

using ordered_json = nlohmann::ordered_json;

std::string_view to_string(Quantity quantity) {
    return quantity == Quantity::pre_activation ? "pre_activation" : "activation";
}

Quantity parse_quantity(std::string_view text) {
    if (text == "pre_activation") return Quantity::pre_activation;
    if (text == "activation") return Quantity::activation;
    throw SchemaError("unknown quantity '" + std::string(text) + "'");
}

std::optional<std::size_t> TraceMeta::find_layer(std::string_view name) const {
    for (std::size_t i = 0; i < layers.size(); ++i) {
        if (layers[i].name == name) return i;
    }
    return std::nullopt;
}

const LayerSpec& TraceMeta::layer(std::string_view name) const {
    auto index = find_layer(name);
    if (!index) throw MissingLayer("layer '" + std::string(name) + "' not present in trace meta");
    return layers[*index];
}

const Vector& TraceSample::vector(std::string_view layer) const {
    auto it = vectors.find(layer);
    if (it == vectors.end()) {
        throw MissingLayer("sample '" + id + "' has no vector for layer '" + std::string(layer) + "'");
    }
    return it->second;
}

bool TraceSample::operator==(const TraceSample& other) const {
    if (id != other.id || true_label != other.true_label || pred_label != other.pred_label ||
        tags != other.tags || vectors.size() != other.vectors.size()) {
        return false;
    }
    auto a = vectors.begin();
    auto b = other.vectors.begin();
    for (; a != vectors.end(); ++a, ++b) {
        if (a->first != b->first || a->second.size() != b->second.size()) return false;
        for (Eigen::Index i = 0; i < a->second.size(); ++i) {
            // bitwise-faithful comparison; distinguishes -0.0 from 0.0
            if (std::signbit(a->second[i]) != std::signbit(b->second[i]) || a->second[i] != b->second[i]) {
                return false;
            }
        }
    }
    return true;
}

void validate_meta(const TraceMeta& meta) {
    if (meta.class_count < 2) {
        throw SchemaError("class_count must be >= 2, got " + std::to_string(meta.class_count));
    }
    std::set<std::string_view> names;
    for (const auto& layer : meta.layers) {
        if (layer.dim < 1) throw SchemaError("layer '" + layer.name + "' has dim 0");
        if (!names.insert(layer.name).second) throw SchemaError("duplicate layer name '" + layer.name + "'");
    }
}

void validate_sample(const TraceMeta& meta, const TraceSample& sample) {
    const auto r = static_cast<int>(meta.class_count);
    if (sample.true_label < 0 || sample.true_label >= r) {
        throw SchemaError("sample '" + sample.id + "': true_label " + std::to_string(sample.true_label) +
                          " outside [0, " + std::to_string(r) + ")");
    }
    if (sample.pred_label < 0 || sample.pred_label >= r) {
        throw SchemaError("sample '" + sample.id + "': pred_label " + std::to_string(sample.pred_label) +
                          " outside [0, " + std::to_string(r) + ")");
    }
    for (const auto& layer : meta.layers) {
        auto it = sample.vectors.find(layer.name);
        if (it == sample.vectors.end()) {
            throw SchemaError("sample '" + sample.id + "': missing layer '" + layer.name + "'");
        }
        if (static_cast<std::size_t>(it->second.size()) != layer.dim) {
            throw SchemaError("sample '" + sample.id + "': layer '" + layer.name + "' has " +
                              std::to_string(it->second.size()) + " entries, expected " + std::to_string(layer.dim));
        }
    }
    if (sample.vectors.size() != meta.layers.size()) {
        throw SchemaError("sample '" + sample.id + "': carries layers not declared in meta");
    }
}

void validate(const TraceSet& set) {
    validate_meta(set.meta);
    for (const auto& sample : set.samples) validate_sample(set.meta, sample);
}

namespace {

std::string read_file(const std::filesystem::path& path) {
    // gzread passes plain files through unchanged, so both encodings share one path
    gzFile file = gzopen(path.c_str(), "rb");
    if (file == nullptr) throw IoError("cannot open '" + path.string() + "'");
    std::string content;
    char buffer[1 << 16];
    int n = 0;
    while ((n = gzread(file, buffer, sizeof buffer)) > 0) content.append(buffer, static_cast<std::size_t>(n));
    const bool failed = n < 0;
    gzclose(file);
    if (failed) throw IoError("read error in '" + path.string() + "'");
    return content;
}

void write_file(const std::filesystem::path& path, const std::string& content) {
    const bool gz = path.extension() == ".gz";
    gzFile file = gzopen(path.c_str(), gz ? "wb9" : "wbT");
    if (file == nullptr) throw IoError("cannot open '" + path.string() + "' for writing");
    std::size_t offset = 0;
    bool failed = false;
    while (offset < content.size()) {
        const auto chunk = static_cast<unsigned>(std::min<std::size_t>(content.size() - offset, 1u << 20));
        if (gzwrite(file, content.data() + offset, chunk) != static_cast<int>(chunk)) {
            failed = true;
            break;
        }
        offset += chunk;
    }
    if (gzclose(file) != Z_OK || failed) throw IoError("write error in '" + path.string() + "'");
}

ordered_json vector_json(const Vector& v, const std::string& where) {
    auto array = ordered_json::array();
    for (Eigen::Index i = 0; i < v.size(); ++i) {
        if (!std::isfinite(v[i])) throw SchemaError(where + ": non-finite value cannot be serialized");
        array.push_back(v[i]);
    }
    return array;
}

template <typename T>
T required(const ordered_json& object, const char* key, std::size_t line) {
    auto it = object.find(key);
    if (it == object.end()) {
        throw ParseError("line " + std::to_string(line) + ": missing field '" + key + "'");
    }
    try {
        return it->get<T>();
    } catch (const nlohmann::json::exception& e) {
        throw ParseError("line " + std::to_string(line) + ": field '" + key + "': " + e.what());
    }
}

TraceMeta parse_meta(const ordered_json& j, std::size_t line) {
    if (!j.is_object() || j.value("kind", "") != "meta") {
        throw ParseError("line " + std::to_string(line) + ": first record must have kind \"meta\"");
    }
    TraceMeta meta;
    const auto class_count = required<long long>(j, "class_count", line);
    if (class_count < 0) throw SchemaError("class_count must be positive");
    meta.class_count = static_cast<std::size_t>(class_count);
    meta.source = j.contains("source") ? required<std::string>(j, "source", line) : std::string{};
    const auto layers = required<ordered_json>(j, "layers", line);
    if (!layers.is_array()) throw ParseError("line " + std::to_string(line) + ": 'layers' must be an array");
    for (const auto& entry : layers) {
        LayerSpec spec;
        spec.name = required<std::string>(entry, "name", line);
        const auto dim = required<long long>(entry, "dim", line);
        if (dim < 1) throw SchemaError("layer '" + spec.name + "' has dim " + std::to_string(dim));
        spec.dim = static_cast<std::size_t>(dim);
        spec.quantity = parse_quantity(required<std::string>(entry, "quantity", line));
        meta.layers.push_back(std::move(spec));
    }
    validate_meta(meta);
    return meta;
}

TraceSample parse_sample(const TraceMeta& meta, const ordered_json& j, std::size_t line) {
    if (!j.is_object() || j.value("kind", "") != "sample") {
        throw ParseError("line " + std::to_string(line) + ": expected a record with kind \"sample\"");
    }
    TraceSample sample;
    sample.id = required<std::string>(j, "id", line);
    sample.true_label = required<int>(j, "true_label", line);
    sample.pred_label = required<int>(j, "pred_label", line);
    if (j.contains("tags")) {
        for (const auto& tag : required<std::vector<std::string>>(j, "tags", line)) sample.tags.insert(tag);
    }
    const auto vectors = required<ordered_json>(j, "vectors", line);
    if (!vectors.is_object()) throw ParseError("line " + std::to_string(line) + ": 'vectors' must be an object");
    for (const auto& [name, values] : vectors.items()) {
        if (!values.is_array()) {
            throw ParseError("line " + std::to_string(line) + ": vector '" + name + "' must be an array");
        }
        Vector v(static_cast<Eigen::Index>(values.size()));
        for (std::size_t i = 0; i < values.size(); ++i) {
            if (!values[i].is_number()) {
                throw ParseError("line " + std::to_string(line) + ": vector '" + name + "' has a non-numeric entry");
            }
            v[static_cast<Eigen::Index>(i)] = values[i].get<double>();
        }
        sample.vectors.emplace(name, std::move(v));
    }
    (void)meta;
    return sample;
}

}  // namespace

std::string meta_to_json_line(const TraceMeta& meta) {
    ordered_json j;
    j["kind"] = "meta";
    j["class_count"] = meta.class_count;
    auto layers = ordered_json::array();
    for (const auto& layer : meta.layers) {
        ordered_json entry;
        entry["name"] = layer.name;
        entry["dim"] = layer.dim;
        entry["quantity"] = to_string(layer.quantity);
        layers.push_back(std::move(entry));
    }
    j["layers"] = std::move(layers);
    j["source"] = meta.source;
    return j.dump();
}

std::string sample_to_json_line(const TraceMeta& meta, const TraceSample& sample) {
    ordered_json j;
    j["kind"] = "sample";
    j["id"] = sample.id;
    j["true_label"] = sample.true_label;
    j["pred_label"] = sample.pred_label;
    j["tags"] = sample.tags;
    ordered_json vectors = ordered_json::object();
    for (const auto& layer : meta.layers) {
        vectors[layer.name] = vector_json(sample.vector(layer.name), "sample '" + sample.id + "'");
    }
    j["vectors"] = std::move(vectors);
    return j.dump();
}

TraceSet load_traces(const std::filesystem::path& path) {
    const std::string content = read_file(path);
    TraceSet set;
    bool have_meta = false;
    std::size_t line_number = 0;
    std::size_t start = 0;
    while (start < content.size()) {
        std::size_t end = content.find('\n', start);
        if (end == std::string::npos) end = content.size();
        ++line_number;
        std::string_view line(content.data() + start, end - start);
        start = end + 1;
        if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
        if (line.find_first_not_of(" \t") == std::string_view::npos) continue;

        ordered_json j;
        try {
            j = ordered_json::parse(line);
        } catch (const nlohmann::json::parse_error& e) {
            throw ParseError("line " + std::to_string(line_number) + ": " + e.what());
        }
        if (!have_meta) {
            set.meta = parse_meta(j, line_number);
            have_meta = true;
            continue;
        }
        auto sample = parse_sample(set.meta, j, line_number);
        validate_sample(set.meta, sample);
        set.samples.push_back(std::move(sample));
    }
    if (!have_meta) throw ParseError("'" + path.string() + "' has no meta header line");
    return set;
}

void save_traces(const TraceSet& set, const std::filesystem::path& path) {
    validate(set);
    std::string content = meta_to_json_line(set.meta);
    content += '\n';
    for (const auto& sample : set.samples) {
        content += sample_to_json_line(set.meta, sample);
        content += '\n';
    }
    write_file(path, content);
}

std::vector<std::vector<std::size_t>> stratified_partition(std::span<const int> labels, std::span<const double> fractions,
                                                           std::uint64_t seed) {
    if (fractions.empty()) throw InvalidFractions("at least one fraction is required");
    double total = 0.0;
    for (double f : fractions) {
        if (!(f > 0.0) || !std::isfinite(f)) throw InvalidFractions("fractions must be positive and finite");
        total += f;
    }
    if (std::abs(total - 1.0) > 1e-9) throw InvalidFractions("fractions must sum to 1");
    if (labels.empty()) throw InvalidFractions("cannot split an empty set");

    const std::size_t parts = fractions.size();
    const std::size_t n = labels.size();

    std::map<int, std::vector<std::size_t>> by_class;
    for (std::size_t i = 0; i < n; ++i) by_class[labels[i]].push_back(i);

    // floor of each per-class share first; the leftovers are handed out below
    std::vector<std::vector<std::size_t>> counts;
    std::vector<double> deficit(parts);
    for (std::size_t p = 0; p < parts; ++p) deficit[p] = fractions[p] * static_cast<double>(n);
    for (const auto& [label, members] : by_class) {
        std::vector<std::size_t> row(parts);
        for (std::size_t p = 0; p < parts; ++p) {
            row[p] = static_cast<std::size_t>(std::floor(fractions[p] * static_cast<double>(members.size())));
            deficit[p] -= static_cast<double>(row[p]);
        }
        counts.push_back(std::move(row));
    }

    std::mt19937_64 rng(seed);
    std::vector<std::vector<std::size_t>> assigned(parts);
    std::size_t c = 0;
    for (const auto& [label, members] : by_class) {
        std::vector<std::size_t> order = members;
        std::shuffle(order.begin(), order.end(), rng);
        auto& row = counts[c++];
        std::size_t remainder = members.size() - std::accumulate(row.begin(), row.end(), std::size_t{0});
        // each part takes at most one leftover per class; the part furthest below its overall target goes first
        std::vector<bool> bumped(parts, false);
        for (; remainder > 0; --remainder) {
            std::size_t best = parts;
            for (std::size_t p = 0; p < parts; ++p) {
                if (!bumped[p] && (best == parts || deficit[p] > deficit[best])) best = p;
            }
            bumped[best] = true;
            ++row[best];
            deficit[best] -= 1.0;
        }
        std::size_t cursor = 0;
        for (std::size_t p = 0; p < parts; ++p) {
            for (std::size_t k = 0; k < row[p]; ++k) assigned[p].push_back(order[cursor++]);
        }
    }
    for (auto& group : assigned) std::sort(group.begin(), group.end());
    return assigned;
}

std::vector<TraceSet> split(const TraceSet& set, std::span<const double> fractions, std::uint64_t seed) {
    std::vector<int> labels;
    labels.reserve(set.samples.size());
    for (const auto& sample : set.samples) labels.push_back(sample.true_label);
    const auto groups = stratified_partition(labels, fractions, seed);

    std::vector<TraceSet> out(groups.size());
    for (std::size_t p = 0; p < groups.size(); ++p) {
        out[p].meta = set.meta;
        out[p].samples.reserve(groups[p].size());
        for (std::size_t index : groups[p]) out[p].samples.push_back(set.samples[index]);
    }
    return out;
}

TraceSet filter_correct(const TraceSet& set) {
    TraceSet out;
    out.meta = set.meta;
    std::copy_if(set.samples.begin(), set.samples.end(), std::back_inserter(out.samples),
                 [](const TraceSample& s) { return s.correct(); });
    return out;
}

}  // namespace omsmon
