#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "cprobe/model.hpp"
#include "cprobe/segmentation.hpp"
#include "cprobe/tensor.hpp"

namespace cprobe {

struct PatchEmbedding {
    std::string segment_id;
    std::string instance_id;
    std::vector<double> vector;
};

enum class EmbeddingMode { flatten, global_average };

// One embedding per patch: the activation at `layer`, flattened (or averaged
// over spatial positions for rank-3 activations in global_average mode).
std::vector<PatchEmbedding> embed_patches(const ModelGraph& model, const std::vector<Patch>& patches,
                                          const std::string& layer, EmbeddingMode mode = EmbeddingMode::flatten);

struct KMeansResult {
    std::vector<std::size_t> assignments;
    Matrix centroids;
    double inertia = 0.0;
    std::vector<double> inertia_trace;  // after every assignment step
    int iterations = 0;
};

// k-means++ seeding followed by Lloyd iterations until the assignment is a
// fixpoint or `max_iterations` is reached. An emptied cluster is re-seeded at
// the point farthest from its own centroid.
KMeansResult kmeans(const Matrix& vectors, std::size_t k, std::uint64_t seed, int max_iterations = 300);

struct TcavStats {
    std::vector<double> per_cav_scores;
    double mean_score = 0.0;
    double p_value = 1.0;
    bool significant = false;

    friend bool operator==(const TcavStats&, const TcavStats&) = default;
};

struct ConceptRecord {
    std::string concept_id;
    std::size_t class_k = 0;
    std::string display_name;
    std::vector<std::string> member_segment_ids;
    std::vector<double> centroid;
    // Largest member-to-centroid distance; the presence test radius.
    double radius = 0.0;
    std::optional<TcavStats> tcav;
    std::optional<std::string> cluster_id;

    friend bool operator==(const ConceptRecord&, const ConceptRecord&) = default;
};

struct DiscoveryParams {
    double keep_fraction = 0.9;
    std::size_t min_concept_size = 10;
    std::size_t min_distinct_images = 3;
    int max_iterations = 300;

    friend bool operator==(const DiscoveryParams&, const DiscoveryParams&) = default;
};

struct DiscoveryResult {
    std::vector<ConceptRecord> concepts;  // ordered by size, largest first
    std::vector<std::string> warnings;
};

DiscoveryResult discover_concepts(std::size_t class_k, const std::string& class_name,
                                  const std::vector<PatchEmbedding>& embeddings, std::size_t k_concepts,
                                  std::uint64_t seed, const DiscoveryParams& params = {});

Matrix to_matrix(const std::vector<PatchEmbedding>& embeddings);

struct SegmentedInstance {
    std::vector<Segment> segments;
    std::vector<PatchEmbedding> embeddings;  // parallel to segments
};

struct EmbeddingSetup {
    std::string layer;
    EmbeddingMode mode = EmbeddingMode::flatten;
    std::vector<int> resolutions{15, 50, 80};
    SegmentationParams segmentation;
    std::vector<double> channel_means;

    friend bool operator==(const EmbeddingSetup&, const EmbeddingSetup&) = default;
};

// Segments an image at every resolution and embeds each segment's patch.
SegmentedInstance segment_and_embed(const ModelGraph& model, const Tensor& image, const std::string& instance_id,
                                    const EmbeddingSetup& setup);

}  // namespace cprobe
