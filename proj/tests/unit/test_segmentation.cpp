#include <gtest/gtest.h>

#include <map>
#include <queue>
#include <set>

#include "cprobe/dataset.hpp"
#include "cprobe/errors.hpp"
#include "cprobe/segmentation.hpp"
#include "test_support.hpp"

namespace cprobe {
namespace {

// Number of 4-connected components among pixels carrying `label`.
std::size_t components_of(const LabelRaster& r, int label) {
    std::vector<char> seen(r.labels.size(), 0);
    std::size_t count = 0;
    for (std::size_t s = 0; s < r.labels.size(); ++s) {
        if (r.labels[s] != label || seen[s]) continue;
        ++count;
        std::queue<std::size_t> q;
        q.push(s);
        seen[s] = 1;
        while (!q.empty()) {
            const std::size_t p = q.front();
            q.pop();
            const long y = static_cast<long>(p / r.width), x = static_cast<long>(p % r.width);
            const long dy[4] = {-1, 1, 0, 0}, dx[4] = {0, 0, -1, 1};
            for (int d = 0; d < 4; ++d) {
                const long ny = y + dy[d], nx = x + dx[d];
                if (ny < 0 || nx < 0 || ny >= static_cast<long>(r.height) || nx >= static_cast<long>(r.width)) continue;
                const std::size_t np = static_cast<std::size_t>(ny) * r.width + static_cast<std::size_t>(nx);
                if (r.labels[np] == label && !seen[np]) {
                    seen[np] = 1;
                    q.push(np);
                }
            }
        }
    }
    return count;
}

// Left half red, right half blue.
Tensor two_tone(std::size_t h, std::size_t w) {
    Tensor img({h, w, 3});
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) {
            const bool left = x < w / 2;
            img.at(y, x, 0) = left ? 0.9 : 0.1;
            img.at(y, x, 1) = left ? 0.1 : 0.2;
            img.at(y, x, 2) = left ? 0.1 : 0.9;
        }
    return img;
}

TEST(Lab, KnownReferenceColours) {
    const auto white = rgb_to_lab(1, 1, 1);
    EXPECT_NEAR(white[0], 100.0, 1e-3);
    EXPECT_NEAR(white[1], 0.0, 1e-3);
    EXPECT_NEAR(white[2], 0.0, 1e-3);
    const auto black = rgb_to_lab(0, 0, 0);
    EXPECT_NEAR(black[0], 0.0, 1e-9);
    // sRGB red is L*=53.24, a*=80.09, b*=67.20 under D65.
    const auto red = rgb_to_lab(1, 0, 0);
    EXPECT_NEAR(red[0], 53.24, 0.01);
    EXPECT_NEAR(red[1], 80.09, 0.01);
    EXPECT_NEAR(red[2], 67.20, 0.01);
}

TEST(Slic, UniformImageGivesGridOfRectangles) {
    const LabelRaster r = slic(Tensor({8, 8, 3}, 0.5), 4, 10.0, 10, 0);
    ASSERT_EQ(r.count, 4);
    // With colour constant only the spatial term acts: each label is an
    // axis-aligned rectangle and the four meet at one grid point.
    for (int l = 0; l < 4; ++l) {
        std::size_t y0 = 8, y1 = 0, x0 = 8, x1 = 0, n = 0;
        for (std::size_t y = 0; y < 8; ++y)
            for (std::size_t x = 0; x < 8; ++x)
                if (r.at(y, x) == l) {
                    y0 = std::min(y0, y), y1 = std::max(y1, y), x0 = std::min(x0, x), x1 = std::max(x1, x);
                    ++n;
                }
        EXPECT_EQ(n, (y1 - y0 + 1) * (x1 - x0 + 1)) << "label " << l;
    }
    EXPECT_NE(r.at(0, 0), r.at(0, 7));
    EXPECT_NE(r.at(0, 0), r.at(7, 0));
    EXPECT_NE(r.at(0, 0), r.at(7, 7));
}

TEST(Slic, TwoToneImageSplitsAlongTheToneBoundary) {
    const LabelRaster r = slic(two_tone(16, 32), 2, 10.0, 10, 0);
    ASSERT_EQ(r.count, 2);
    for (std::size_t y = 0; y < 16; ++y)
        for (std::size_t x = 0; x < 32; ++x) EXPECT_EQ(r.at(y, x), r.at(0, x < 16 ? 0 : 31)) << y << "," << x;
    EXPECT_NE(r.at(0, 0), r.at(0, 31));
}

TEST(Slic, ObjectiveNeverIncreases) {
    const auto manifest = load_manifest(testing::fixture_root() / "dataset");
    for (std::size_t i = 0; i < 12; ++i) {
        const Tensor img = load_image(manifest, manifest.instances[i * 20]);
        for (int n : {15, 50, 80}) {
            const SlicTrace t = slic_trace(img, n);
            for (std::size_t s = 1; s < t.objective.size(); ++s)
                EXPECT_LE(t.objective[s], t.objective[s - 1] * (1 + 1e-12)) << "step " << s << " n=" << n;
        }
    }
}

TEST(Slic, FixtureLabelCountsStayNearRequested) {
    const auto manifest = load_manifest(testing::fixture_root() / "dataset");
    const std::map<int, std::pair<int, int>> bounds{{15, {8, 22}}, {50, {25, 75}}, {80, {40, 120}}};
    for (std::size_t i = 0; i < manifest.instances.size(); i += 8) {
        const Tensor img = load_image(manifest, manifest.instances[i]);
        for (const auto& [n, range] : bounds) {
            const LabelRaster r = slic(img, n, 10.0, 10, 0);
            EXPECT_GE(r.count, range.first) << manifest.instances[i].instance_id << " n=" << n;
            EXPECT_LE(r.count, range.second) << manifest.instances[i].instance_id << " n=" << n;
            // Exact partition with contiguous labels, each one 4-connected region.
            std::set<int> used(r.labels.begin(), r.labels.end());
            ASSERT_EQ(used.size(), static_cast<std::size_t>(r.count));
            EXPECT_EQ(*used.begin(), 0);
            EXPECT_EQ(*used.rbegin(), r.count - 1);
            for (int l = 0; l < r.count; ++l) EXPECT_EQ(components_of(r, l), 1u);
        }
    }
}

TEST(Slic, RejectsImpossibleRequests) {
    EXPECT_THROW(slic(Tensor({4, 4, 3}), 17, 10, 10, 0), ParameterError);
    EXPECT_THROW(slic(Tensor({4, 4, 3}), 1, 10, 10, 0), ParameterError);
    EXPECT_THROW(slic(Tensor({4, 4, 3}), 2, 10, 0, 0), ParameterError);
}

TEST(Connectivity, SplitsDisconnectedLabelsAndMergesSmallOnes) {
    // Label 0 appears in two separate columns; label 1 has one stray pixel.
    LabelRaster raw{4, 4, {0, 1, 1, 0,  //
                           0, 1, 1, 0,  //
                           0, 1, 1, 0,  //
                           0, 1, 1, 0},
                    2};
    const LabelRaster three = enforce_connectivity(raw, 0.0);
    EXPECT_EQ(three.count, 3);
    LabelRaster stray = raw;
    stray.labels[0] = 1;  // isolated from the other 1s
    const LabelRaster merged = enforce_connectivity(stray, 2.0);
    for (int l = 0; l < merged.count; ++l) EXPECT_EQ(components_of(merged, l), 1u);
    // The stray pixel joins its largest neighbouring component.
    EXPECT_EQ(merged.at(0, 0), merged.at(0, 1));
    EXPECT_EQ(merged.count, 3);
}

TEST(ExtractSegments, TagsEveryResolutionLevel) {
    const auto manifest = load_manifest(testing::fixture_root() / "dataset");
    const Tensor img = load_image(manifest, manifest.instances[0]);
    const auto segs = extract_segments(img, "img", {80, 15, 50}, 0);
    std::map<ResolutionLevel, int> resolution_of;
    for (const auto& s : segs) {
        EXPECT_EQ(s.instance_id, "img");
        EXPECT_GE(s.pixel_count(), 9u);
        const auto [it, inserted] = resolution_of.emplace(s.resolution_level, s.resolution);
        EXPECT_EQ(it->second, s.resolution);
    }
    EXPECT_EQ(resolution_of.at(ResolutionLevel::coarse), 15);
    EXPECT_EQ(resolution_of.at(ResolutionLevel::medium), 50);
    EXPECT_EQ(resolution_of.at(ResolutionLevel::fine), 80);
}

TEST(ExtractSegments, BoundingBoxesEncloseMasks) {
    const auto segs = extract_segments(two_tone(16, 32), "t", {2, 6}, 0);
    for (const auto& s : segs) {
        for (std::size_t y = 0; y < 16; ++y)
            for (std::size_t x = 0; x < 32; ++x)
                if (s.mask[y * 32 + x]) {
                    EXPECT_GE(y, s.bbox.top);
                    EXPECT_LT(y, s.bbox.top + s.bbox.height);
                    EXPECT_GE(x, s.bbox.left);
                    EXPECT_LT(x, s.bbox.left + s.bbox.width);
                }
    }
}

TEST(ExtractSegments, TwoToneAtResolutionTwoGivesTwoSegments) {
    EXPECT_EQ(extract_segments(two_tone(16, 32), "t", {2}, 0).size(), 2u);
}

TEST(ExtractSegments, AllSegmentsTooSmallGivesEmptyList) {
    SegmentationParams p;
    p.min_segment_pixels = 1000;
    EXPECT_TRUE(extract_segments(two_tone(16, 32), "t", {2, 4}, 0, p).empty());
    EXPECT_THROW(extract_segments(two_tone(16, 32), "t", {}, 0), ParameterError);
}

Segment full_segment(std::size_t h, std::size_t w, std::uint8_t value = 1) {
    Segment s;
    s.segment_id = "s";
    s.height = h;
    s.width = w;
    s.mask.assign(h * w, value);
    s.bbox = {0, 0, h, w};
    return s;
}

TEST(Patch, FullMaskReproducesImage) {
    Tensor img({6, 6, 3});
    for (std::size_t i = 0; i < img.size(); ++i) img[i] = static_cast<double>(i % 17) / 17.0;
    EXPECT_EQ(segment_to_patch(img, full_segment(6, 6), {0.5, 0.5, 0.5}, {6, 6, 3}).pixels, img);
    // Resized to a different model input, the full mask equals the resized image.
    EXPECT_EQ(segment_to_patch(img, full_segment(6, 6), {0.5, 0.5, 0.5}, {11, 11, 3}).pixels,
              resize_bilinear(img, 11, 11));
}

TEST(Patch, EmptyMaskIsPreconditionViolation) {
    EXPECT_THROW(segment_to_patch(Tensor({4, 4, 3}), full_segment(4, 4, 0), {0, 0, 0}, {4, 4, 3}), PreconditionError);
}

TEST(Patch, HalfMaskOnMeanColouredImageIsUniform) {
    const std::vector<double> means{0.2, 0.4, 0.6};
    Tensor img({8, 8, 3});
    for (std::size_t y = 0; y < 8; ++y)
        for (std::size_t x = 0; x < 8; ++x)
            for (std::size_t c = 0; c < 3; ++c) img.at(y, x, c) = means[c];
    Segment half = full_segment(8, 8, 0);
    for (std::size_t i = 0; i < 32; ++i) half.mask[i] = 1;
    const Tensor p = segment_to_patch(img, half, means, {16, 16, 3}).pixels;
    for (std::size_t y = 0; y < 16; ++y)
        for (std::size_t x = 0; x < 16; ++x)
            for (std::size_t c = 0; c < 3; ++c) EXPECT_NEAR(p.at(y, x, c), means[c], 1e-12);
}

TEST(Patch, ResizeIsCornerAligned) {
    Tensor img({2, 2, 1}, std::vector<double>{0.0, 1.0, 2.0, 3.0});
    const Tensor r = resize_bilinear(img, 3, 3);
    EXPECT_DOUBLE_EQ(r.at(0, 0, 0), 0.0);
    EXPECT_DOUBLE_EQ(r.at(0, 2, 0), 1.0);
    EXPECT_DOUBLE_EQ(r.at(2, 2, 0), 3.0);
    EXPECT_DOUBLE_EQ(r.at(1, 1, 0), 1.5);
}

TEST(Patch, ThumbnailCropsToBoundingBox) {
    Tensor img({4, 4, 3}, 0.9);
    Segment s = full_segment(4, 4, 0);
    s.mask[1 * 4 + 1] = s.mask[1 * 4 + 2] = s.mask[2 * 4 + 1] = 1;
    s.bbox = {1, 1, 2, 2};
    const Tensor t = segment_thumbnail(img, s, {0.1, 0.1, 0.1});
    EXPECT_EQ(t.shape(), (Shape{2, 2, 3}));
    EXPECT_DOUBLE_EQ(t.at(0, 0, 0), 0.9);
    EXPECT_DOUBLE_EQ(t.at(1, 1, 0), 0.1);  // outside the mask
}

TEST(Rle, RoundTripsAndStartsWithZeros) {
    const std::vector<std::uint8_t> mask{1, 1, 0, 0, 0, 1, 0};
    const auto runs = rle_encode(mask);
    EXPECT_EQ(runs, (std::vector<std::uint32_t>{0, 2, 3, 1, 1}));
    EXPECT_EQ(rle_decode(runs, mask.size()), mask);
    EXPECT_THROW(rle_decode(runs, mask.size() + 1), FormatError);
}

TEST(Outline, SinglePixelIsUnitSquare) {
    std::vector<std::uint8_t> mask(9, 0);
    mask[4] = 1;
    const auto loops = mask_outline(mask, 3, 3);
    ASSERT_EQ(loops.size(), 1u);
    std::set<std::array<int, 2>> corners(loops[0].begin(), loops[0].end());
    EXPECT_EQ(corners, (std::set<std::array<int, 2>>{{1, 1}, {2, 1}, {2, 2}, {1, 2}}));
}

TEST(Outline, RingHasOuterAndInnerLoops) {
    std::vector<std::uint8_t> mask(25, 0);
    for (std::size_t y = 1; y <= 3; ++y)
        for (std::size_t x = 1; x <= 3; ++x) mask[y * 5 + x] = (y == 2 && x == 2) ? 0 : 1;
    const auto loops = mask_outline(mask, 5, 5);
    ASSERT_EQ(loops.size(), 2u);
    for (const auto& l : loops) EXPECT_EQ(l.size(), 4u);
}

TEST(Connectivity, FourConnectedPredicate) {
    std::vector<std::uint8_t> diag{1, 0, 0, 1};
    EXPECT_FALSE(is_four_connected(diag, 2, 2));
    std::vector<std::uint8_t> ell{1, 0, 1, 1};
    EXPECT_TRUE(is_four_connected(ell, 2, 2));
}

}  // namespace
}  // namespace cprobe
