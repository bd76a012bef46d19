#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "cprobe/analytics.hpp"
#include "cprobe/clustering.hpp"
#include "cprobe/discovery.hpp"
#include "cprobe/layout.hpp"
#include "cprobe/segmentation.hpp"
#include "cprobe/tcav.hpp"

namespace cprobe {

inline constexpr int kSnapshotSchemaVersion = 1;

struct PipelineConfig {
    std::string dataset_path;
    std::string model_path;
    std::string layer;
    std::size_t images_per_class = 50;
    std::vector<int> segment_resolutions{15, 50, 80};
    std::size_t concepts_per_class = 10;
    std::size_t n_cavs = 20;
    double alpha = 0.01;
    ClusteringConfig clustering;
    double tsne_perplexity = 30.0;
    std::uint64_t seed = 0;
    EmbeddingMode embedding_mode = EmbeddingMode::flatten;
    SegmentationParams segmentation;
    DiscoveryParams discovery;
    CavTrainingParams cav_training;
    CliqueParams cliques;
    std::size_t exported_patches_per_concept = 5;

    // Throws ParameterError when a field is out of range.
    void validate() const;

    friend bool operator==(const PipelineConfig&, const PipelineConfig&) = default;
};

struct ClassInfo {
    std::size_t class_k = 0;
    std::string name;
    ClassAccuracy accuracy;
    Point2 position{};
    std::vector<double> mean_latent;  // mean activation over the class's eval instances

    friend bool operator==(const ClassInfo&, const ClassInfo&) = default;
};

struct ConceptEntry {
    ConceptRecord record;
    CavEnsemble ensemble;
    bool retained = false;
    std::vector<double> member_distances;  // parallel to record.member_segment_ids

    friend bool operator==(const ConceptEntry&, const ConceptEntry&) = default;
};

// Influence of a class's retained concepts on its eval instances.
struct ClassInfluence {
    std::size_t class_k = 0;
    std::vector<std::string> instance_ids;  // order_instances order
    std::vector<std::string> concept_ids;
    Matrix influence;                       // (concepts, instances); NaN-free, untestable concepts absent
    std::vector<Matrix> raw_s;              // per concept: (trained CAVs, instances)
    std::vector<std::vector<std::size_t>> cav_indices;  // per concept: trained CAV indices

    friend bool operator==(const ClassInfluence&, const ClassInfluence&) = default;
};

struct Snapshot {
    int schema_version = kSnapshotSchemaVersion;
    std::string snapshot_id;
    std::string created_at;
    PipelineConfig config;
    std::vector<std::string> class_names;
    std::array<std::size_t, 3> image_shape{0, 0, 0};
    std::vector<double> channel_means;
    std::vector<Prediction> predictions;
    std::vector<PredictionFailure> prediction_failures;
    std::vector<ClassInfo> classes;
    std::vector<Clique> cliques;
    std::vector<ConceptEntry> concepts;  // every discovered concept; `retained` marks the filtered set
    std::vector<ConceptCluster> clusters;
    std::size_t n_clusters = 0;
    std::map<std::size_t, double> silhouette;
    std::map<std::string, Point2> concept_positions;
    HexAssignment hex;
    std::vector<HexEdge> boundaries;
    std::map<std::string, Segment> segments;  // members of every stored concept
    std::vector<ClassInfluence> influence;
    std::vector<std::string> warnings;
    std::vector<std::string> exported_patches;  // segment ids with a PNG under patches/

    const ConceptEntry* find_concept(const std::string& concept_id) const;
    const ConceptCluster* find_cluster(const std::string& cluster_id) const;
    const Prediction* find_prediction(const std::string& instance_id) const;
    std::vector<const ConceptEntry*> retained_concepts() const;

    friend bool operator==(const Snapshot&, const Snapshot&) = default;
};


}  // namespace cprobe
