#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "cprobe/tensor.hpp"

namespace cprobe {

struct LabelRaster {
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<int> labels;  // row-major, contiguous from 0
    int count = 0;

    int at(std::size_t y, std::size_t x) const { return labels[y * width + x]; }
};

struct SlicParams {
    double compactness = 10.0;
    int iterations = 10;

    friend bool operator==(const SlicParams&, const SlicParams&) = default;
};

struct SlicTrace {
    LabelRaster raw;                 // before connectivity enforcement (labels = center index)
    LabelRaster final;               // after enforcement
    std::vector<double> objective;   // sum of squared combined distances after each assignment step
    double grid_interval = 0.0;      // S
};

// SLIC superpixels in CIELAB. The algorithm is deterministic; `seed` is accepted
// for interface uniformity with the other pipeline stages.
LabelRaster slic(const Tensor& image, int n_segments, double compactness, int iterations, std::uint64_t seed);
SlicTrace slic_trace(const Tensor& image, int n_segments, const SlicParams& params = {});

// Relabels 4-connected components, merging those smaller than `min_size` into
// their largest neighbouring component.
LabelRaster enforce_connectivity(const LabelRaster& raw, double min_size);

// sRGB in [0,1] to CIELAB (D65).
std::array<double, 3> rgb_to_lab(double r, double g, double b);

enum class ResolutionLevel { coarse, medium, fine };
std::string to_string(ResolutionLevel level);
ResolutionLevel resolution_level_from_string(const std::string& s);

struct BBox {
    std::size_t top = 0;
    std::size_t left = 0;
    std::size_t height = 0;
    std::size_t width = 0;
    friend bool operator==(const BBox&, const BBox&) = default;
};

struct Segment {
    std::string segment_id;
    std::string instance_id;
    ResolutionLevel resolution_level = ResolutionLevel::coarse;
    int resolution = 0;           // requested superpixel count
    std::size_t height = 0;       // mask raster size (image size)
    std::size_t width = 0;
    std::vector<std::uint8_t> mask;
    BBox bbox;

    std::size_t pixel_count() const;
    friend bool operator==(const Segment&, const Segment&) = default;
};

struct SegmentationParams {
    SlicParams slic;
    std::size_t min_segment_pixels = 9;

    friend bool operator==(const SegmentationParams&, const SegmentationParams&) = default;
};

// Superpixels at every requested resolution, one Segment per surviving label.
// Resolutions are ranked ascending into coarse / medium / fine.
std::vector<Segment> extract_segments(const Tensor& image, const std::string& instance_id,
                                      const std::vector<int>& resolutions, std::uint64_t seed,
                                      const SegmentationParams& params = {});

struct Patch {
    std::string segment_id;
    Tensor pixels;
};

// Full-canvas patch: pixels outside the mask become `channel_means`, then the
// canvas is bilinearly resized (corner-aligned) to the model input size.
Patch segment_to_patch(const Tensor& image, const Segment& segment, const std::vector<double>& channel_means,
                       const std::array<std::size_t, 3>& model_input_shape);

// Bounding-box crop of the masked image, for display.
Tensor segment_thumbnail(const Tensor& image, const Segment& segment, const std::vector<double>& channel_means);

// Corner-aligned bilinear resize of an (h, w, c) tensor.
Tensor resize_bilinear(const Tensor& image, std::size_t out_h, std::size_t out_w);

// Run-length encoding of a binary mask in row-major order; runs alternate
// starting with a (possibly empty) run of zeros.
std::vector<std::uint32_t> rle_encode(const std::vector<std::uint8_t>& mask);
std::vector<std::uint8_t> rle_decode(const std::vector<std::uint32_t>& runs, std::size_t length);

// Closed outlines of a mask along pixel edges, as lists of (x, y) corner points.
std::vector<std::vector<std::array<int, 2>>> mask_outline(const std::vector<std::uint8_t>& mask, std::size_t height,
                                                          std::size_t width);

// True when the set pixels form one 4-connected region.
bool is_four_connected(const std::vector<std::uint8_t>& mask, std::size_t height, std::size_t width);

}  // namespace cprobe
