#include <gtest/gtest.h>

#include <map>
#include <set>

#include "cprobe/dataset.hpp"
#include "cprobe/file_util.hpp"
#include "cprobe/fixture.hpp"
#include "cprobe/model_io.hpp"
#include "test_support.hpp"

namespace cprobe {
namespace {

namespace fs = std::filesystem;
using fixture::Motif;

std::map<std::string, std::string> tree_contents(const fs::path& root) {
    std::map<std::string, std::string> out;
    for (const auto& e : fs::recursive_directory_iterator(root))
        if (e.is_regular_file()) out[fs::relative(e.path(), root).generic_string()] = read_file(e.path());
    return out;
}

std::size_t count_motif(const fixture::FixtureImage& im, Motif m) {
    return static_cast<std::size_t>(std::count(im.motifs.begin(), im.motifs.end(), static_cast<std::uint8_t>(m)));
}

TEST(Fixture, RegenerationIsByteIdentical) {
    const fs::path a = testing::fresh_dir("fixture-a");
    fixture::write_fixture(a);
    const auto files = tree_contents(a);
    EXPECT_EQ(files, tree_contents(testing::fixture_root()));
    EXPECT_TRUE(files.count("dataset/dataset.json"));
    EXPECT_TRUE(files.count("model/model.json"));
    EXPECT_TRUE(files.count("oracle.json"));
    EXPECT_TRUE(files.count("pipeline.json"));

    fixture::FixtureParams other;
    other.seed = 8;
    const fs::path b = testing::fresh_dir("fixture-b");
    fixture::write_fixture(b, other);
    EXPECT_NE(read_file(b / "oracle.json"), files.at("oracle.json"));
}

TEST(Fixture, SplitsAndLabels) {
    const auto images = fixture::generate_images({});
    ASSERT_EQ(images.size(), 240u);
    std::map<std::pair<std::size_t, Split>, std::size_t> counts;
    std::set<std::string> ids;
    for (const auto& im : images) {
        ++counts[{im.label, im.split}];
        ids.insert(im.instance_id);
        EXPECT_EQ(im.pixels.shape(), (Shape{32, 32, 3}));
        EXPECT_EQ(im.motifs.size(), 32u * 32u);
        for (double v : im.pixels.data()) EXPECT_EQ(v * 255.0, std::round(v * 255.0));
    }
    EXPECT_EQ(ids.size(), images.size());
    for (std::size_t k = 0; k < 3; ++k) {
        EXPECT_EQ((counts[{k, Split::probe}]), 50u);
        EXPECT_EQ((counts[{k, Split::eval}]), 30u);
    }
    const auto manifest = load_manifest(testing::fixture_root() / "dataset");
    EXPECT_EQ(manifest.instances.size(), 240u);
    EXPECT_EQ(manifest.class_names, fixture::class_names());
}

TEST(Fixture, MotifsFollowTheirClasses) {
    const auto images = fixture::generate_images({});
    const Motif object_of[3] = {Motif::stripe, Motif::dot, Motif::plain};
    std::size_t snow_major[3] = {0, 0, 0}, total[3] = {0, 0, 0};
    for (const auto& im : images) {
        EXPECT_GT(count_motif(im, object_of[im.label]), 0u) << im.instance_id;
        for (std::size_t k = 0; k < 3; ++k)
            if (k != im.label && object_of[k] != Motif::plain) EXPECT_EQ(count_motif(im, object_of[k]), 0u);
        snow_major[im.label] += count_motif(im, Motif::snow) > count_motif(im, Motif::grass);
        ++total[im.label];
    }
    // Striped and spotted images mostly sit on snow, plain ones on grass.
    EXPECT_GE(snow_major[0], total[0] * 7 / 10);
    EXPECT_GE(snow_major[1], total[1] * 7 / 10);
    EXPECT_LE(snow_major[2], total[2] * 3 / 10);
}

TEST(Fixture, OracleMatchesGeneratedMotifs) {
    const auto oracle = fixture::load_oracle(testing::fixture_root() / "oracle.json");
    const auto images = fixture::generate_images({});
    ASSERT_EQ(oracle.motif_maps.size(), images.size());
    for (const auto& im : images) EXPECT_EQ(oracle.motif_maps.at(im.instance_id), im.motifs);
    EXPECT_FALSE(oracle.segment_motifs.empty());
    EXPECT_FALSE(oracle.resolutions.empty());
}

TEST(Fixture, SegmentMotifNeedsAStrictMajority) {
    Segment s;
    s.height = s.width = 2;
    s.mask = {1, 1, 1, 1};
    s.bbox = {0, 0, 2, 2};
    const std::vector<std::uint8_t> half{0, 0, 3, 3}, most{0, 0, 0, 3};
    EXPECT_EQ(fixture::segment_motif(s, half), "mixed");
    EXPECT_EQ(fixture::segment_motif(s, most), "stripe");
    for (std::size_t m = 0; m < fixture::kMotifCount; ++m)
        EXPECT_EQ(fixture::motif_from_string(fixture::to_string(static_cast<Motif>(m))), static_cast<Motif>(m));
}

TEST(Fixture, PlantedModelClassifiesEvalImages) {
    const ModelGraph model = load_model(testing::fixture_root() / "model");
    std::size_t correct[3] = {0, 0, 0}, total[3] = {0, 0, 0};
    for (const auto& im : fixture::generate_images({})) {
        if (im.split != Split::eval) continue;
        const Prediction p = make_prediction(logits(model, im.pixels));
        ++total[im.label];
        correct[im.label] += p.predicted_class == im.label;
        if (im.label == 0) {
            EXPECT_EQ(p.predicted_class, 0u) << im.instance_id;
            EXPECT_GT(p.confidence, 0.8) << im.instance_id;
        }
    }
    EXPECT_EQ(correct[1], total[1]);
    EXPECT_GE(correct[0] + correct[1] + correct[2], 81u);  // at least 90%
}

TEST(Fixture, StoredModelIsThePlantedModelInSinglePrecision) {
    const ModelGraph stored = load_model(testing::fixture_root() / "model");
    const ModelGraph planted = fixture::planted_model();
    Rng rng(1);
    Tensor x({32, 32, 3});
    for (std::size_t i = 0; i < x.size(); ++i) x[i] = rng.uniform();
    const auto a = logits(stored, x), b = logits(planted, x);
    ASSERT_EQ(a.size(), b.size());
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-5 * (1 + std::abs(b[i])));
}

}  // namespace
}  // namespace cprobe
