#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "cprobe/tensor.hpp"

namespace cprobe {

enum class Split { probe, eval };

std::string to_string(Split split);

struct InstanceMeta {
    std::string instance_id;
    std::filesystem::path path;  // as written in the manifest, relative to the dataset root
    std::size_t label = 0;
    Split split = Split::probe;
};

struct DatasetManifest {
    std::filesystem::path root;  // directory holding dataset.json
    std::vector<std::string> class_names;
    std::array<std::size_t, 3> image_shape{0, 0, 0};
    std::vector<InstanceMeta> instances;
    // Mean pixel value per channel over the probe split; filled by compute_channel_means.
    std::vector<double> channel_means;

    std::filesystem::path resolve(const InstanceMeta& instance) const { return root / instance.path; }
    const InstanceMeta& find(const std::string& instance_id) const;
    std::vector<const InstanceMeta*> split_instances(Split split) const;
};

// Parses `dataset.json` (or a directory containing it). Validates labels,
// splits and id uniqueness; does not read pixels.
DatasetManifest load_manifest(const std::filesystem::path& path);
DatasetManifest parse_manifest(const std::string& json_text, std::filesystem::path root);

// Probe-split instances of `class_k`, min(n, available) of them, drawn without
// replacement; the result is ordered as in the manifest. Deterministic in seed.
std::vector<InstanceMeta> sample_class_images(const DatasetManifest& manifest, std::size_t class_k, std::size_t n,
                                              std::uint64_t seed);

// Loads an image as (h, w, c) in [0, 1], replicating grayscale into the dataset's
// channel count. Throws DecodeError for unreadable files and ValidationError for
// a size mismatch.
Tensor load_image(const DatasetManifest& manifest, const InstanceMeta& instance);

// Per-channel mean over the probe split.
std::vector<double> compute_channel_means(const DatasetManifest& manifest);

}  // namespace cprobe
