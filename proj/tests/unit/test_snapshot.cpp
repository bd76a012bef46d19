#include <gtest/gtest.h>

#include <fstream>
#include <sstream>

#include "cprobe/errors.hpp"
#include "cprobe/file_util.hpp"
#include "cprobe/snapshot_io.hpp"
#include "test_support.hpp"

namespace cprobe {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream s;
    s << in.rdbuf();
    return s.str();
}

void spit(const fs::path& p, const std::string& bytes) {
    std::ofstream out(p, std::ios::binary | std::ios::trunc);
    out << bytes;
}

TEST(Sha256, KnownVectors) {
    EXPECT_EQ(sha256_hex(""), "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
    EXPECT_EQ(sha256_hex("abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}

TEST(Config, RoundTripsEveryField) {
    PipelineConfig c;
    c.dataset_path = "/d";
    c.model_path = "/m";
    c.layer = "pool1";
    c.images_per_class = 7;
    c.segment_resolutions = {3, 9};
    c.concepts_per_class = 4;
    c.n_cavs = 5;
    c.alpha = 0.05;
    c.clustering = {ClusterMethod::agglomerative, 6, 11};
    c.tsne_perplexity = 12.5;
    c.seed = 99;
    c.embedding_mode = EmbeddingMode::global_average;
    c.segmentation.slic = {20.0, 4};
    c.segmentation.min_segment_pixels = 3;
    c.discovery = {0.8, 5, 2, 50};
    c.cav_training = {0.01, 0.2, 100, 0.25};
    c.cliques = {0.1, 0.05};
    c.exported_patches_per_concept = 2;
    EXPECT_EQ(config_from_json(config_to_json(c)), c);
}

TEST(Config, MissingFieldsTakeDefaults) {
    const PipelineConfig c = config_from_json({{"dataset_path", "d"}, {"model_path", "m"}, {"layer", "l"}});
    PipelineConfig expected;
    expected.dataset_path = "d";
    expected.model_path = "m";
    expected.layer = "l";
    EXPECT_EQ(c, expected);
    EXPECT_FALSE(c.clustering.n_clusters);
}

TEST(Config, RejectsBadInput) {
    const json base{{"dataset_path", "d"}, {"model_path", "m"}, {"layer", "l"}};
    auto with = [&](const std::string& key, json value) {
        json j = base;
        j[key] = std::move(value);
        return j;
    };
    EXPECT_THROW(config_from_json(with("colour", 1)), ParameterError);
    EXPECT_THROW(config_from_json(with("n_cavs", 1)), ParameterError);
    EXPECT_THROW(config_from_json(with("alpha", 1.5)), ParameterError);
    EXPECT_THROW(config_from_json(with("alpha", "small")), ParameterError);
    EXPECT_THROW(config_from_json(with("segment_resolutions", json::array())), ParameterError);
    EXPECT_THROW(config_from_json(with("embedding_mode", "max")), ParameterError);
    EXPECT_THROW(config_from_json(with("clustering", {{"method", "dbscan"}})), ParameterError);
    EXPECT_THROW(config_from_json(with("clustering", {{"n_clusters", -2}})), ParameterError);
    EXPECT_THROW(config_from_json(with("slic", {{"shape", 1}})), ParameterError);
    EXPECT_THROW(config_from_json(json::array()), ParameterError);
    EXPECT_THROW(config_from_json({{"model_path", "m"}, {"layer", "l"}}), ParameterError);
    EXPECT_EQ(*config_from_json(with("clustering", {{"n_clusters", 4}})).clustering.n_clusters, 4u);
}

TEST(Config, FileLoadingResolvesRelativePaths) {
    const fs::path dir = testing::fresh_dir("config");
    spit(dir / "run.json", R"({"dataset_path": "data", "model_path": "/abs/model", "layer": "pool1"})");
    const PipelineConfig c = load_config(dir / "run.json");
    EXPECT_EQ(fs::path(c.dataset_path), dir / "data");
    EXPECT_EQ(c.model_path, "/abs/model");
    spit(dir / "bad.json", "{\"layer\": ");
    EXPECT_THROW(load_config(dir / "bad.json"), FormatError);
    EXPECT_THROW(load_config(dir / "missing.json"), IoError);
}

TEST(Snapshot, SaveLoadIsFieldEqual) {
    Snapshot snap = testing::fixture_snapshot();
    const fs::path root = testing::fresh_dir("snapshot-roundtrip");
    snap.snapshot_id.clear();
    const fs::path dir = save_snapshot(snap, root);
    EXPECT_EQ(dir, root / snap.snapshot_id);
    EXPECT_EQ(snap.snapshot_id, testing::fixture_snapshot().snapshot_id);
    EXPECT_EQ(snap.snapshot_id.size(), 16u);
    const Snapshot loaded = load_snapshot(dir);
    EXPECT_EQ(loaded, snap);
    EXPECT_EQ(compute_snapshot_id(loaded), snap.snapshot_id);
    for (const auto& id : snap.exported_patches) EXPECT_TRUE(fs::exists(dir / "patches" / (id + ".png"))) << id;
    EXPECT_FALSE(snap.exported_patches.empty());
}

TEST(Snapshot, IdIgnoresCreationTime) {
    Snapshot a = testing::fixture_snapshot();
    Snapshot b = a;
    b.created_at = "1999-01-01T00:00:00Z";
    EXPECT_EQ(compute_snapshot_id(a), compute_snapshot_id(b));
    b.warnings.push_back("changed");
    EXPECT_NE(compute_snapshot_id(a), compute_snapshot_id(b));
}

TEST(Snapshot, QuantizedValuesSurviveStorageExactly) {
    Snapshot s = testing::fixture_snapshot();
    const Snapshot before = s;
    quantize_for_storage(s);
    EXPECT_EQ(s, before);  // already quantized once stored
    s.concepts[0].record.centroid[0] = 0.1;
    quantize_for_storage(s);
    EXPECT_EQ(s.concepts[0].record.centroid[0], static_cast<double>(0.1f));
}

TEST(Snapshot, FlippedTensorByteIsCorruption) {
    const fs::path dir = testing::copy_snapshot(testing::fixture_snapshot_dir(), testing::fresh_dir("corrupt"));
    std::string bytes = slurp(dir / "tensors.bin");
    ASSERT_GT(bytes.size(), 100u);
    bytes[bytes.size() - 5] ^= 0x01;
    spit(dir / "tensors.bin", bytes);
    EXPECT_THROW(load_snapshot(dir), CorruptionError);
}

TEST(Snapshot, EditedManifestIsCorruption) {
    const fs::path dir = testing::copy_snapshot(testing::fixture_snapshot_dir(), testing::fresh_dir("edited"));
    json j = json::parse(slurp(dir / "manifest.json"));
    j["warnings"].push_back("tampered");
    spit(dir / "manifest.json", j.dump());
    EXPECT_THROW(load_snapshot(dir), CorruptionError);
    spit(dir / "manifest.json", "{not json");
    EXPECT_THROW(load_snapshot(dir), CorruptionError);
}

TEST(Snapshot, OtherSchemaVersionIsUnsupported) {
    const fs::path dir = testing::copy_snapshot(testing::fixture_snapshot_dir(), testing::fresh_dir("version"));
    json j = json::parse(slurp(dir / "manifest.json"));
    j["schema_version"] = 2;
    spit(dir / "manifest.json", j.dump());
    EXPECT_THROW(load_snapshot(dir), UnsupportedVersionError);
}

TEST(Snapshot, MissingDirectoryIsIoError) {
    EXPECT_THROW(load_snapshot(testing::fresh_dir("empty")), IoError);
}

TEST(Snapshot, ExportInlinesEveryTensor) {
    const Snapshot& snap = testing::fixture_snapshot();
    const json j = snapshot_to_json(snap);
    EXPECT_EQ(j.at("snapshot_id"), snap.snapshot_id);
    EXPECT_EQ(j.at("schema_version"), kSnapshotSchemaVersion);
    const json& first = j.at("concepts").at(0);
    ASSERT_TRUE(first.at("centroid").is_array());
    EXPECT_EQ(first.at("centroid").get<std::vector<double>>(), snap.concepts[0].record.centroid);
    EXPECT_EQ(j.at("concepts").size(), snap.concepts.size());
    const json& influence = j.at("influence").at(0).at("influence");
    EXPECT_TRUE(influence.at("data").is_array());
    EXPECT_EQ(influence.at("data").size(), snap.influence[0].influence.data.size());
}

TEST(Snapshot, SavingTwiceReusesTheDirectory) {
    Snapshot snap = testing::fixture_snapshot();
    const fs::path root = testing::fresh_dir("twice");
    const fs::path a = save_snapshot(snap, root);
    const auto stamp = fs::last_write_time(a / "manifest.json");
    const fs::path b = save_snapshot(snap, root);
    EXPECT_EQ(a, b);
    EXPECT_EQ(fs::last_write_time(b / "manifest.json"), stamp);
    std::size_t entries = 0;
    for ([[maybe_unused]] const auto& e : fs::directory_iterator(root)) ++entries;
    EXPECT_EQ(entries, 1u);
}

TEST(ConceptCheckpoint, RoundTripsAtFullPrecision) {
    const auto& entries = testing::fixture_snapshot().concepts;
    std::vector<ConceptEntry> tweaked = entries;
    tweaked[0].record.centroid[0] += 1e-13;
    EXPECT_EQ(concept_entries_from_json(concept_entries_to_json(tweaked)), tweaked);
}

}  // namespace
}  // namespace cprobe
