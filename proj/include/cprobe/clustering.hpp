#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "cprobe/discovery.hpp"
#include "cprobe/tensor.hpp"

namespace cprobe {

enum class ClusterMethod { kmeans, agglomerative };

std::string to_string(ClusterMethod m);
ClusterMethod cluster_method_from_string(const std::string& s);

struct ClusteringConfig {
    ClusterMethod method = ClusterMethod::kmeans;
    std::optional<std::size_t> n_clusters;  // empty = choose by silhouette
    // Pipeline runs mix this into the run seed; direct calls use it as is.
    std::uint64_t seed = 0;

    friend bool operator==(const ClusteringConfig&, const ClusteringConfig&) = default;
};

struct ConceptCluster {
    std::string cluster_id;  // "CC{n}", numbered by descending size
    std::vector<std::string> member_concept_ids;
    std::string medoid_concept_id;
    std::string annotation;

    friend bool operator==(const ConceptCluster&, const ConceptCluster&) = default;
};

struct WardResult {
    std::vector<std::size_t> assignments;
    std::vector<double> merge_costs;  // increase in within-cluster sum of squares per merge
};

// Ward-linkage agglomeration stopped at n_clusters groups.
WardResult ward_agglomerative(const Matrix& vectors, std::size_t n_clusters);

// Raw labels in [0, n_clusters) for the chosen method.
std::vector<std::size_t> cluster_labels(const Matrix& vectors, ClusterMethod method, std::size_t n_clusters,
                                        std::uint64_t seed);

// Mean silhouette coefficient; singleton points contribute 0.
double silhouette_score(const Matrix& vectors, const std::vector<std::size_t>& assignments);

struct ClusterCountSelection {
    std::size_t best_k = 0;
    std::map<std::size_t, double> scores;
};

// Silhouette at each k of k_range; ties go to the smaller k.
ClusterCountSelection select_cluster_count(const Matrix& vectors, ClusterMethod method,
                                           const std::vector<std::size_t>& k_range, std::uint64_t seed);

// Default search range [2, min(30, n - 1)].
std::vector<std::size_t> default_k_range(std::size_t n_concepts);

struct ClusteringResult {
    std::vector<ConceptCluster> clusters;
    std::size_t n_clusters = 0;
    std::map<std::size_t, double> silhouette;  // filled when the count was chosen automatically
};

// Partitions concepts by their centroids. Writes cluster_id into each concept.
ClusteringResult cluster_concepts(std::vector<ConceptRecord>& concepts, const ClusteringConfig& config);

// 1 when both concepts sit in the same cluster, else 0.
int concept_similarity(const std::string& concept_a, const std::string& concept_b,
                       const std::vector<ConceptCluster>& clusters);

}  // namespace cprobe
