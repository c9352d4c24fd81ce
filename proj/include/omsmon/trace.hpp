#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "omsmon/types.hpp"

namespace omsmon {

struct LayerSpec {
    std::string name;
    std::size_t dim = 0;
    Quantity quantity = Quantity::pre_activation;

    bool operator==(const LayerSpec&) const = default;
};

struct TraceMeta {
    std::size_t class_count = 0;
    std::vector<LayerSpec> layers;
    std::string source;

    /// Index of `name` in `layers`, if present.
    std::optional<std::size_t> find_layer(std::string_view name) const;
    /// Throws MissingLayer when absent.
    const LayerSpec& layer(std::string_view name) const;

    bool operator==(const TraceMeta&) const = default;
};

/// One classified input with its recorded per-layer vectors. Correctness is
/// derived from the labels and never stored.
struct TraceSample {
    std::string id;
    int true_label = 0;
    int pred_label = 0;
    std::map<std::string, Vector, std::less<>> vectors;
    std::set<std::string> tags;

    bool correct() const { return true_label == pred_label; }
    /// Throws MissingLayer when the sample has no vector for `layer`.
    const Vector& vector(std::string_view layer) const;

    bool operator==(const TraceSample& other) const;
};

struct TraceSet {
    TraceMeta meta;
    std::vector<TraceSample> samples;

    bool operator==(const TraceSet&) const = default;
};

/// Checks the meta invariants (class_count >= 2, unique layer names, dims >= 1).
void validate_meta(const TraceMeta& meta);
/// Checks labels, layer presence and dimensions; throws SchemaError naming the sample.
void validate_sample(const TraceMeta& meta, const TraceSample& sample);
void validate(const TraceSet& set);

/// Reads a JSONL trace file (plain or gzip, detected by magic bytes).
TraceSet load_traces(const std::filesystem::path& path);
/// Writes a JSONL trace file; gzip-compressed when the path ends in ".gz".
void save_traces(const TraceSet& set, const std::filesystem::path& path);

std::string meta_to_json_line(const TraceMeta& meta);
std::string sample_to_json_line(const TraceMeta& meta, const TraceSample& sample);

/// Seeded partition of positions 0..labels.size()-1 into fraction-sized
/// groups, stratified by label. Each group is returned in ascending order.
std::vector<std::vector<std::size_t>> stratified_partition(std::span<const int> labels, std::span<const double> fractions,
                                                           std::uint64_t seed);

/// Stratified (by true_label), seeded partition of the samples.
std::vector<TraceSet> split(const TraceSet& set, std::span<const double> fractions, std::uint64_t seed);

TraceSet filter_correct(const TraceSet& set);

}  // namespace omsmon
