#include "cprobe/tcav.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>

#include "cprobe/errors.hpp"
#include "cprobe/rng.hpp"
#include "cprobe/stats.hpp"

namespace cprobe {

namespace {

using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

bool all_rows_identical(const Matrix& a, const Matrix& b) {
    const auto ref = a.row(0);
    for (std::size_t i = 0; i < a.rows; ++i)
        if (!std::equal(ref.begin(), ref.end(), a.row(i).begin())) return false;
    for (std::size_t i = 0; i < b.rows; ++i)
        if (!std::equal(ref.begin(), ref.end(), b.row(i).begin())) return false;
    return true;
}

std::size_t validation_count(std::size_t n, double fraction) {
    if (n < 2) return 0;
    const auto v = static_cast<std::size_t>(std::lround(fraction * static_cast<double>(n)));
    return std::clamp<std::size_t>(v, 1, n - 1);
}

}  // namespace

Cav train_cav(const Matrix& positives, const Matrix& counter, std::uint64_t seed, const CavTrainingParams& params) {
    if (positives.rows == 0 || counter.rows == 0) throw PreconditionError("CAV training needs both example sets");
    if (positives.cols != counter.cols) throw PreconditionError("concept and counterexample dimensionality differ");
    if (all_rows_identical(positives, counter)) throw TrainingError("all training points are identical");

    Rng rng(seed);
    std::vector<std::size_t> ci(positives.rows), ni(counter.rows);
    for (std::size_t i = 0; i < ci.size(); ++i) ci[i] = i;
    for (std::size_t i = 0; i < ni.size(); ++i) ni[i] = i;
    rng.shuffle(ci);
    rng.shuffle(ni);
    const std::size_t cv = validation_count(ci.size(), params.validation_fraction);
    const std::size_t nv = validation_count(ni.size(), params.validation_fraction);

    const std::size_t dim = positives.cols;
    const std::size_t n_train = (ci.size() - cv) + (ni.size() - nv);
    RowMajor x(n_train, dim);
    Eigen::VectorXd y(n_train);
    std::size_t r = 0;
    for (std::size_t i = cv; i < ci.size(); ++i, ++r) {
        x.row(r) = Eigen::Map<const Eigen::RowVectorXd>(positives.row(ci[i]).data(), dim);
        y[r] = 1.0;
    }
    for (std::size_t i = nv; i < ni.size(); ++i, ++r) {
        x.row(r) = Eigen::Map<const Eigen::RowVectorXd>(counter.row(ni[i]).data(), dim);
        y[r] = 0.0;
    }

    Eigen::VectorXd w = Eigen::VectorXd::Zero(dim);
    double b = 0.0;
    const double inv_n = 1.0 / static_cast<double>(n_train);
    Eigen::VectorXd z(n_train);
    for (int step = 0; step < params.steps; ++step) {
        z.noalias() = x * w;
        for (std::size_t i = 0; i < n_train; ++i) {
            const double p = 1.0 / (1.0 + std::exp(-(z[i] + b)));
            z[i] = (p - y[i]) * inv_n;
        }
        Eigen::VectorXd grad_w = x.transpose() * z;
        grad_w += params.l2 * w;
        const double grad_b = z.sum();
        w -= params.learning_rate * grad_w;
        b -= params.learning_rate * grad_b;
    }

    const double norm = w.norm();
    if (!(norm > 0.0) || !std::isfinite(norm)) throw TrainingError("separator collapsed to a zero weight vector");

    Cav cav;
    cav.weight.resize(dim);
    for (std::size_t j = 0; j < dim; ++j) cav.weight[j] = w[j] / norm;
    cav.bias = b / norm;
    cav.counterexample_seed = seed;

    auto classify = [&](std::span<const double> v) { return dot(v, cav.weight) + cav.bias > 0.0; };
    std::size_t correct = 0, total = 0;
    if (cv + nv > 0) {
        for (std::size_t i = 0; i < cv; ++i, ++total) correct += classify(positives.row(ci[i])) ? 1 : 0;
        for (std::size_t i = 0; i < nv; ++i, ++total) correct += classify(counter.row(ni[i])) ? 0 : 1;
    } else {
        for (std::size_t i = 0; i < positives.rows; ++i, ++total) correct += classify(positives.row(i)) ? 1 : 0;
        for (std::size_t i = 0; i < counter.rows; ++i, ++total) correct += classify(counter.row(i)) ? 0 : 1;
    }
    cav.validation_accuracy = static_cast<double>(correct) / static_cast<double>(total);
    return cav;
}

CounterPool build_counterexample_pool(const LabeledEmbeddings& all, std::size_t class_k, std::size_t pool_size,
                                      std::uint64_t seed) {
    std::vector<std::size_t> candidates;
    for (std::size_t i = 0; i < all.labels.size(); ++i)
        if (all.labels[i] != class_k) candidates.push_back(i);
    if (candidates.empty()) throw PreconditionError("no segments from other classes for counterexamples");

    CounterPool pool;
    Rng rng(seed);
    if (pool_size <= candidates.size()) {
        for (std::size_t i = 0; i < pool_size; ++i)
            std::swap(candidates[i], candidates[i + rng.below(candidates.size() - i)]);
        pool.source_rows.assign(candidates.begin(), candidates.begin() + static_cast<std::ptrdiff_t>(pool_size));
    } else {
        pool.with_replacement = true;
        pool.warning = "counterexample pool of " + std::to_string(candidates.size()) +
                       " segments is smaller than the requested " + std::to_string(pool_size) +
                       "; sampled with replacement";
        for (std::size_t i = 0; i < pool_size; ++i) pool.source_rows.push_back(candidates[rng.below(candidates.size())]);
    }
    pool.vectors = Matrix(pool.source_rows.size(), all.vectors.cols);
    for (std::size_t i = 0; i < pool.source_rows.size(); ++i) {
        const auto src = all.vectors.row(pool.source_rows[i]);
        std::copy(src.begin(), src.end(), pool.vectors.row(i).begin());
    }
    return pool;
}

std::vector<double> embedding_gradient(const Tensor& gradient, EmbeddingMode mode) {
    if (mode == EmbeddingMode::global_average && gradient.rank() == 3) {
        const std::size_t c = gradient.shape()[2];
        std::vector<double> out(c, 0.0);
        for (std::size_t i = 0; i < gradient.size(); ++i) out[i % c] += gradient[i];
        return out;
    }
    return gradient.data();
}

double directional_derivative(std::span<const double> gradient, const Cav& cav) {
    if (gradient.size() != cav.weight.size())
        throw PreconditionError("gradient has " + std::to_string(gradient.size()) + " values but the CAV has " +
                                std::to_string(cav.weight.size()));
    return dot(gradient, cav.weight);
}

double directional_derivative(const ModelGraph& model, const Tensor& image, const std::string& layer,
                              std::size_t class_k, const Cav& cav, EmbeddingMode mode) {
    return directional_derivative(embedding_gradient(gradient_at_layer(model, image, layer, class_k), mode), cav);
}

double tcav_score_from_gradients(const std::vector<std::vector<double>>& gradients, const Cav& cav) {
    if (gradients.empty()) throw PreconditionError("TCAV score needs at least one class instance");
    std::size_t positive = 0;
    for (const auto& g : gradients)
        if (directional_derivative(g, cav) > 0.0) ++positive;
    return static_cast<double>(positive) / static_cast<double>(gradients.size());
}

double tcav_score(const ModelGraph& model, const std::vector<Tensor>& class_instances, const std::string& layer,
                  std::size_t class_k, const Cav& cav, EmbeddingMode mode) {
    std::vector<std::vector<double>> grads;
    grads.reserve(class_instances.size());
    for (const auto& img : class_instances)
        grads.push_back(embedding_gradient(gradient_at_layer(model, img, layer, class_k), mode));
    return tcav_score_from_gradients(grads, cav);
}

TcavStats make_tcav_stats(std::vector<double> per_cav_scores, double alpha) {
    TcavStats s;
    s.per_cav_scores = std::move(per_cav_scores);
    s.mean_score = mean(s.per_cav_scores);
    s.p_value = one_sample_t_test(s.per_cav_scores, 0.5).p_value;
    s.significant = s.p_value < alpha;
    return s;
}

CavEnsemble tcav_ensemble(const Matrix& concept_embeddings, const LabeledEmbeddings& pool_source, std::size_t class_k,
                          const std::vector<std::vector<double>>& class_gradients, std::uint64_t seed,
                          const EnsembleParams& params) {
    if (params.n_cavs < 2) throw ParameterError("a CAV ensemble needs n_cavs >= 2");
    if (concept_embeddings.rows == 0) throw PreconditionError("concept has no embeddings");
    CavEnsemble ens;
    ens.cavs.resize(params.n_cavs);
    ens.scores.resize(params.n_cavs);
    std::vector<double> scores;
    for (std::size_t i = 0; i < params.n_cavs; ++i) {
        const std::uint64_t pool_seed = derive_seed(seed, {i, 0});
        const std::uint64_t split_seed = derive_seed(seed, {i, 1});
        CounterPool pool = build_counterexample_pool(pool_source, class_k, concept_embeddings.rows, pool_seed);
        if (pool.warning && i == 0) ens.warnings.push_back(*pool.warning);
        try {
            Cav cav = train_cav(concept_embeddings, pool.vectors, split_seed, params.training);
            cav.counterexample_seed = pool_seed;
            const double score = tcav_score_from_gradients(class_gradients, cav);
            ens.scores[i] = score;
            scores.push_back(score);
            ens.cavs[i] = std::move(cav);
        } catch (const TrainingError& e) {
            ens.warnings.push_back("CAV " + std::to_string(i) + ": " + e.what());
        }
    }
    const std::size_t failed = params.n_cavs - scores.size();
    if (2 * failed > params.n_cavs || scores.size() < 2) {
        ens.untestable = true;
        ens.warnings.push_back(std::to_string(failed) + " of " + std::to_string(params.n_cavs) +
                               " CAVs failed to train; concept untestable");
        return ens;
    }
    ens.stats = make_tcav_stats(std::move(scores), params.alpha);
    return ens;
}

CavEnsemble tcav_ensemble(const ModelGraph& model, const Matrix& concept_embeddings,
                          const LabeledEmbeddings& pool_source, const std::vector<Tensor>& class_instances,
                          const std::string& layer, std::size_t class_k, std::uint64_t seed,
                          const EnsembleParams& params, EmbeddingMode mode) {
    std::vector<std::vector<double>> grads;
    grads.reserve(class_instances.size());
    for (const auto& img : class_instances)
        grads.push_back(embedding_gradient(gradient_at_layer(model, img, layer, class_k), mode));
    return tcav_ensemble(concept_embeddings, pool_source, class_k, grads, seed, params);
}

FilterResult filter_concepts(std::vector<ConceptRecord> concepts, double alpha) {
    FilterResult out;
    for (auto& c : concepts) {
        if (c.tcav && c.tcav->p_value < alpha)
            out.retained.push_back(std::move(c));
        else
            out.discarded.push_back(std::move(c));
    }
    return out;
}

}  // namespace cprobe
