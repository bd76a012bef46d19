#pragma once

#include <optional>
#include <string>
#include <vector>

#include "cprobe/clustering.hpp"
#include "cprobe/dataset.hpp"
#include "cprobe/discovery.hpp"
#include "cprobe/model.hpp"
#include "cprobe/tcav.hpp"

namespace cprobe {

struct PredictionFailure {
    std::string instance_id;
    std::string message;

    friend bool operator==(const PredictionFailure&, const PredictionFailure&) = default;
};

struct PredictAllResult {
    std::vector<Prediction> predictions;  // eval split, manifest order, labelled
    std::vector<PredictionFailure> failures;
};

// The image resized to the model's input size when the two differ.
Tensor fit_to_model(const ModelGraph& model, const Tensor& image);

// Predicts every eval-split instance; unreadable images are recorded and skipped.
PredictAllResult predict_all(const ModelGraph& model, const DatasetManifest& manifest);

struct ClassAccuracy {
    std::size_t class_k = 0;
    std::size_t correct = 0;
    std::size_t total = 0;
    double accuracy = 0.0;

    friend bool operator==(const ClassAccuracy&, const ClassAccuracy&) = default;
};

struct AccuracyHistogram {
    std::vector<std::size_t> counts;        // n_bins equal-width bins on [0, 1]
    std::vector<ClassAccuracy> classes;     // classes with eval instances
    std::vector<std::size_t> bin_of_class;  // parallel to classes
    std::vector<std::size_t> excluded_classes;
};

std::vector<ClassAccuracy> class_accuracies(const std::vector<Prediction>& predictions, std::size_t n_classes);

// Bin of a value in [0, 1]; the last bin is closed on the right.
std::size_t histogram_bin(double value, std::size_t n_bins);

AccuracyHistogram accuracy_histogram(const std::vector<Prediction>& predictions, std::size_t n_classes,
                                     std::size_t n_bins);

struct ConfusionMatrix {
    std::vector<std::size_t> class_subset;
    // rows: true class in subset order; columns: predicted class in subset order, then "other".
    std::vector<std::vector<std::size_t>> counts;
    std::vector<std::vector<std::vector<std::string>>> cell_instances;  // by descending confidence
};

ConfusionMatrix confusion(const std::vector<Prediction>& predictions, const std::vector<std::size_t>& class_subset);

struct InfluenceSample {
    std::size_t cav_index = 0;
    double s = 0.0;
    bool positive = false;
};

struct InstanceInfluenceRow {
    std::string instance_id;
    std::string concept_id;
    std::optional<double> influence;  // absent for untestable concepts
    std::vector<InfluenceSample> samples;
};

// Vote fraction of the concept's trained CAVs with a strictly positive
// directional derivative against `gradient` (embedding space, concept's class logit).
InstanceInfluenceRow instance_influence(const std::string& instance_id, const std::vector<double>& gradient,
                                        const std::string& concept_id, const CavEnsemble& ensemble);

InstanceInfluenceRow instance_influence(const ModelGraph& model, const Tensor& image, const std::string& instance_id,
                                        const ConceptRecord& concept_record, const CavEnsemble& ensemble,
                                        const std::string& layer, EmbeddingMode mode = EmbeddingMode::flatten);

// Correct predictions by descending confidence, then misclassified ones by
// ascending confidence; ties by instance id.
std::vector<std::string> order_instances(const std::vector<Prediction>& predictions_of_class);

struct ConceptPresence {
    std::string instance_id;
    std::string concept_id;
    std::vector<std::string> matching_segment_ids;
    bool present = false;
};

// A segment matches concept c when its embedding lies within c's radius of c's centroid.
std::vector<ConceptPresence> concept_presence(const std::string& instance_id,
                                              const std::vector<PatchEmbedding>& segment_embeddings,
                                              const std::vector<ConceptRecord>& concepts_of_interest);

std::vector<ConceptPresence> concept_presence(const ModelGraph& model, const Tensor& image,
                                              const std::string& instance_id,
                                              const std::vector<ConceptRecord>& concepts_of_interest,
                                              const EmbeddingSetup& setup);

struct BoxStats {
    double min = 0.0;
    double q1 = 0.0;
    double median = 0.0;
    double q3 = 0.0;
    double max = 0.0;
};

BoxStats box_stats(std::span<const double> values);

struct SummaryRow {
    std::string cluster_id;
    std::vector<std::string> concept_ids;
    std::vector<double> scores;  // mean TCAV score per concept
    BoxStats box;
    std::size_t frequency = 0;   // concepts in this cluster across the selected classes
};

struct ClassConceptSummary {
    std::size_t class_k = 0;
    std::vector<std::size_t> histogram;  // 10 bins of mean TCAV score on [0, 1]
    std::vector<SummaryRow> rows;        // by descending frequency, then cluster order
};

// Card data for one class. `concepts` are the retained, clustered concepts of
// all classes; `selected_classes` defines the frequency scope (all classes when empty).
ClassConceptSummary class_concept_summary(std::size_t class_k, const std::vector<ConceptRecord>& concepts,
                                          const std::vector<ConceptCluster>& clusters,
                                          const std::vector<std::size_t>& selected_classes = {});

}  // namespace cprobe
