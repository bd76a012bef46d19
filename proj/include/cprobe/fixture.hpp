#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "cprobe/dataset.hpp"
#include "cprobe/model.hpp"
#include "cprobe/segmentation.hpp"

namespace cprobe::fixture {

// Planted visual motifs. Object motifs belong to one class each; the two
// backgrounds are shared across classes.
enum class Motif : std::uint8_t { stripe, dot, plain, snow, grass };
inline constexpr std::size_t kMotifCount = 5;

std::string to_string(Motif m);
Motif motif_from_string(const std::string& s);

struct FixtureParams {
    std::uint64_t seed = 7;
    std::size_t probe_per_class = 50;
    std::size_t eval_per_class = 30;
    std::size_t image_size = 32;
    // Share of a class's images drawn on its majority background.
    double majority_background = 0.8;
};

struct FixtureImage {
    std::string instance_id;
    std::size_t label = 0;
    Split split = Split::probe;
    Tensor pixels;                     // quantized to 8 bits, as stored on disk
    std::vector<std::uint8_t> motifs;  // per-pixel Motif
};

const std::vector<std::string>& class_names();

// Capture layer of the planted model: a 1x1x4 map of per-channel maxima of the
// stripe, dot, snow and grass detectors.
inline constexpr const char* kCaptureLayer = "pool1";

std::vector<FixtureImage> generate_images(const FixtureParams& params);

// Hand-wired 6-layer classifier: conv1 detectors, relu1, global max pool1,
// identity 1x1 conv2, global average pool, dense head.
ModelGraph planted_model(std::size_t image_size = 32);

// Majority motif of a segment: the motif covering more than half of its
// pixels, or "mixed".
std::string segment_motif(const Segment& segment, const std::vector<std::uint8_t>& motifs);

struct Oracle {
    std::map<std::string, std::vector<std::uint8_t>> motif_maps;  // instance_id -> per-pixel Motif
    std::map<std::string, std::string> segment_motifs;           // segment_id -> motif or "mixed"
    std::vector<int> resolutions;
};

// Layout written by write_fixture:
//   dataset/dataset.json, dataset/images/*.png
//   model/model.json, model/tensors.bin
//   oracle.json
//   pipeline.json (a run configuration for the fixture)
void write_fixture(const std::filesystem::path& out_dir, const FixtureParams& params = {});

Oracle load_oracle(const std::filesystem::path& path);

}  // namespace cprobe::fixture
