#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "cprobe/discovery.hpp"
#include "cprobe/model.hpp"
#include "cprobe/tensor.hpp"

namespace cprobe {

// Unit-norm normal of a hyperplane separating concept activations (positive
// side) from counterexample activations.
struct Cav {
    std::vector<double> weight;
    double bias = 0.0;
    double validation_accuracy = 0.0;
    std::uint64_t counterexample_seed = 0;

    friend bool operator==(const Cav&, const Cav&) = default;
};

struct CavTrainingParams {
    double l2 = 1e-3;
    double learning_rate = 0.1;
    int steps = 500;
    double validation_fraction = 0.2;

    friend bool operator==(const CavTrainingParams&, const CavTrainingParams&) = default;
};

// Full-batch logistic regression with an L2 penalty on the weights. A
// stratified `validation_fraction` of each set (chosen by `seed`) is held out
// for validation_accuracy. Throws TrainingError on degenerate input.
Cav train_cav(const Matrix& positives, const Matrix& counter, std::uint64_t seed, const CavTrainingParams& params = {});

struct LabeledEmbeddings {
    Matrix vectors;
    std::vector<std::size_t> labels;  // class of the image each row came from
};

struct CounterPool {
    Matrix vectors;
    std::vector<std::size_t> source_rows;
    bool with_replacement = false;
    std::optional<std::string> warning;
};

// Uniform sample of embeddings from classes other than `class_k`, without
// replacement unless the pool is too small.
CounterPool build_counterexample_pool(const LabeledEmbeddings& all, std::size_t class_k, std::size_t pool_size,
                                      std::uint64_t seed);

// Gradient in the embedding space: identity for flattened embeddings, summed
// over spatial positions for globally averaged ones.
std::vector<double> embedding_gradient(const Tensor& gradient, EmbeddingMode mode);

// <gradient of logit_k at `layer`, cav.weight>.
double directional_derivative(const ModelGraph& model, const Tensor& image, const std::string& layer,
                              std::size_t class_k, const Cav& cav, EmbeddingMode mode = EmbeddingMode::flatten);
double directional_derivative(std::span<const double> gradient, const Cav& cav);

// Fraction of instances whose directional derivative is strictly positive.
double tcav_score(const ModelGraph& model, const std::vector<Tensor>& class_instances, const std::string& layer,
                  std::size_t class_k, const Cav& cav, EmbeddingMode mode = EmbeddingMode::flatten);
double tcav_score_from_gradients(const std::vector<std::vector<double>>& gradients, const Cav& cav);

struct CavEnsemble {
    std::vector<std::optional<Cav>> cavs;             // indexed by cav_index; empty when training failed
    std::vector<std::optional<double>> scores;        // per cav_index
    std::optional<TcavStats> stats;                   // absent when the concept is untestable
    bool untestable = false;
    std::vector<std::string> warnings;

    friend bool operator==(const CavEnsemble&, const CavEnsemble&) = default;
};

struct EnsembleParams {
    std::size_t n_cavs = 20;
    double alpha = 0.01;
    CavTrainingParams training;
};

// Trains n_cavs CAVs against independent counterexample pools of the concept's
// size, scores each over the class gradients, and t-tests the scores against 0.5.
CavEnsemble tcav_ensemble(const Matrix& concept_embeddings, const LabeledEmbeddings& pool_source, std::size_t class_k,
                          const std::vector<std::vector<double>>& class_gradients, std::uint64_t seed,
                          const EnsembleParams& params = {});

// Convenience form computing the class gradients from images.
CavEnsemble tcav_ensemble(const ModelGraph& model, const Matrix& concept_embeddings,
                          const LabeledEmbeddings& pool_source, const std::vector<Tensor>& class_instances,
                          const std::string& layer, std::size_t class_k, std::uint64_t seed,
                          const EnsembleParams& params = {}, EmbeddingMode mode = EmbeddingMode::flatten);

TcavStats make_tcav_stats(std::vector<double> per_cav_scores, double alpha);

struct FilterResult {
    std::vector<ConceptRecord> retained;
    std::vector<ConceptRecord> discarded;
};

// Retains concepts whose ensemble rejects a neutral 0.5 score: p < alpha.
FilterResult filter_concepts(std::vector<ConceptRecord> concepts, double alpha);

}  // namespace cprobe
