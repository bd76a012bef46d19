#include "cprobe/discovery.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <unordered_map>
#include <unordered_set>

#include "cprobe/errors.hpp"
#include "cprobe/rng.hpp"

namespace cprobe {

std::vector<PatchEmbedding> embed_patches(const ModelGraph& model, const std::vector<Patch>& patches,
                                          const std::string& layer, EmbeddingMode mode) {
    std::vector<PatchEmbedding> out;
    out.reserve(patches.size());
    for (const auto& patch : patches) {
        Tensor act = forward(model, patch.pixels, layer).activation;
        PatchEmbedding e;
        e.segment_id = patch.segment_id;
        if (mode == EmbeddingMode::global_average && act.rank() == 3) {
            const std::size_t h = act.shape()[0], w = act.shape()[1], c = act.shape()[2];
            e.vector.assign(c, 0.0);
            for (std::size_t i = 0; i < act.size(); ++i) e.vector[i % c] += act[i];
            for (double& v : e.vector) v /= static_cast<double>(h * w);
        } else {
            e.vector = act.data();
        }
        out.push_back(std::move(e));
    }
    return out;
}

Matrix to_matrix(const std::vector<PatchEmbedding>& embeddings) {
    Matrix m(embeddings.size(), embeddings.empty() ? 0 : embeddings.front().vector.size());
    for (std::size_t i = 0; i < embeddings.size(); ++i) {
        if (embeddings[i].vector.size() != m.cols) throw PreconditionError("embeddings differ in dimensionality");
        std::copy(embeddings[i].vector.begin(), embeddings[i].vector.end(), m.row(i).begin());
    }
    return m;
}

namespace {

// Nearest centroid; the lowest index wins ties.
std::pair<std::size_t, double> nearest(const Matrix& centroids, std::span<const double> v) {
    std::size_t best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < centroids.rows; ++c) {
        const double d = squared_distance(centroids.row(c), v);
        if (d < best_d) {
            best_d = d;
            best = c;
        }
    }
    return {best, best_d};
}

Matrix plus_plus_seeding(const Matrix& x, std::size_t k, Rng& rng) {
    Matrix centroids(k, x.cols);
    std::vector<std::uint8_t> chosen(x.rows, 0);
    std::size_t first = rng.below(x.rows);
    chosen[first] = 1;
    std::copy(x.row(first).begin(), x.row(first).end(), centroids.row(0).begin());
    std::vector<double> d2(x.rows);
    for (std::size_t i = 0; i < x.rows; ++i) d2[i] = squared_distance(x.row(i), centroids.row(0));
    for (std::size_t c = 1; c < k; ++c) {
        const double total = std::accumulate(d2.begin(), d2.end(), 0.0);
        std::size_t pick = x.rows;
        if (total > 0.0) {
            double r = rng.uniform() * total;
            for (std::size_t i = 0; i < x.rows; ++i) {
                if (d2[i] <= 0.0) continue;
                r -= d2[i];
                pick = i;
                if (r < 0.0) break;
            }
        }
        if (pick == x.rows) {
            // All remaining mass is zero: take a uniformly random unchosen point.
            std::vector<std::size_t> rest;
            for (std::size_t i = 0; i < x.rows; ++i)
                if (!chosen[i]) rest.push_back(i);
            pick = rest[rng.below(rest.size())];
        }
        chosen[pick] = 1;
        std::copy(x.row(pick).begin(), x.row(pick).end(), centroids.row(c).begin());
        for (std::size_t i = 0; i < x.rows; ++i) d2[i] = std::min(d2[i], squared_distance(x.row(i), centroids.row(c)));
    }
    return centroids;
}

}  // namespace

KMeansResult kmeans(const Matrix& x, std::size_t k, std::uint64_t seed, int max_iterations) {
    if (k < 1) throw ParameterError("k-means needs k >= 1");
    if (k > x.rows)
        throw ParameterError("k-means with k=" + std::to_string(k) + " on " + std::to_string(x.rows) + " vectors");
    Rng rng(seed);
    KMeansResult res;
    res.centroids = plus_plus_seeding(x, k, rng);
    res.assignments.assign(x.rows, k);  // k = unassigned sentinel

    std::vector<double> dist(x.rows, 0.0);
    for (int iter = 0; iter < max_iterations; ++iter) {
        bool changed = false;
        for (std::size_t i = 0; i < x.rows; ++i) {
            const auto [c, d] = nearest(res.centroids, x.row(i));
            if (c != res.assignments[i]) {
                res.assignments[i] = c;
                changed = true;
            }
            dist[i] = d;
        }
        res.inertia = std::accumulate(dist.begin(), dist.end(), 0.0);
        res.inertia_trace.push_back(res.inertia);
        res.iterations = iter + 1;
        if (!changed && iter > 0) break;

        Matrix sums(k, x.cols);
        std::vector<std::size_t> counts(k, 0);
        for (std::size_t i = 0; i < x.rows; ++i) {
            auto s = sums.row(res.assignments[i]);
            const auto v = x.row(i);
            for (std::size_t j = 0; j < x.cols; ++j) s[j] += v[j];
            ++counts[res.assignments[i]];
        }
        for (std::size_t c = 0; c < k; ++c) {
            if (counts[c] == 0) {
                // Re-seed at the point farthest from its own centroid.
                std::size_t far = 0;
                double far_d = -1.0;
                for (std::size_t i = 0; i < x.rows; ++i) {
                    if (dist[i] > far_d) {
                        far_d = dist[i];
                        far = i;
                    }
                }
                std::copy(x.row(far).begin(), x.row(far).end(), res.centroids.row(c).begin());
                dist[far] = 0.0;
                continue;
            }
            auto dst = res.centroids.row(c);
            const auto s = sums.row(c);
            for (std::size_t j = 0; j < x.cols; ++j) dst[j] = s[j] / static_cast<double>(counts[c]);
        }
    }
    return res;
}

DiscoveryResult discover_concepts(std::size_t class_k, const std::string& class_name,
                                  const std::vector<PatchEmbedding>& embeddings, std::size_t k_concepts,
                                  std::uint64_t seed, const DiscoveryParams& params) {
    DiscoveryResult result;
    if (embeddings.empty()) {
        result.warnings.push_back("class '" + class_name + "': no embeddings, no concepts discovered");
        return result;
    }
    if (k_concepts == 0) throw ParameterError("concepts_per_class must be >= 1");
    std::size_t k = k_concepts;
    if (embeddings.size() < k) {
        k = embeddings.size();
        result.warnings.push_back("class '" + class_name + "': only " + std::to_string(embeddings.size()) +
                                  " embeddings, k reduced from " + std::to_string(k_concepts) + " to " +
                                  std::to_string(k));
    }
    const Matrix x = to_matrix(embeddings);
    const KMeansResult km = kmeans(x, k, seed, params.max_iterations);

    struct Candidate {
        std::size_t cluster;
        std::vector<std::size_t> members;
    };
    std::vector<Candidate> kept;
    for (std::size_t c = 0; c < k; ++c) {
        std::vector<std::pair<double, std::size_t>> members;
        for (std::size_t i = 0; i < x.rows; ++i)
            if (km.assignments[i] == c) members.emplace_back(squared_distance(x.row(i), km.centroids.row(c)), i);
        if (members.empty()) continue;
        std::sort(members.begin(), members.end());
        const auto keep = std::max<std::size_t>(
            1, static_cast<std::size_t>(std::floor(params.keep_fraction * static_cast<double>(members.size()))));
        members.resize(std::min(keep, members.size()));
        Candidate cand{c, {}};
        for (const auto& m : members) cand.members.push_back(m.second);
        if (cand.members.size() < params.min_concept_size) continue;
        std::unordered_set<std::string> images;
        for (std::size_t i : cand.members) images.insert(embeddings[i].instance_id);
        if (images.size() < params.min_distinct_images) continue;
        kept.push_back(std::move(cand));
    }
    std::stable_sort(kept.begin(), kept.end(),
                     [](const Candidate& a, const Candidate& b) { return a.members.size() > b.members.size(); });

    for (std::size_t rank = 0; rank < kept.size(); ++rank) {
        ConceptRecord rec;
        rec.class_k = class_k;
        rec.display_name = class_name + "_concept_" + std::to_string(rank + 1);
        rec.concept_id = rec.display_name;
        rec.centroid.assign(x.cols, 0.0);
        for (std::size_t i : kept[rank].members) {
            rec.member_segment_ids.push_back(embeddings[i].segment_id);
            const auto v = x.row(i);
            for (std::size_t j = 0; j < x.cols; ++j) rec.centroid[j] += v[j];
        }
        // Centroid and radius are kept float32-representable so that a persisted
        // concept reproduces the same membership test.
        for (double& v : rec.centroid)
            v = static_cast<double>(static_cast<float>(v / static_cast<double>(kept[rank].members.size())));
        for (std::size_t i : kept[rank].members)
            rec.radius = std::max(rec.radius, euclidean_distance(x.row(i), rec.centroid));
        float r32 = static_cast<float>(rec.radius);
        if (static_cast<double>(r32) < rec.radius) r32 = std::nextafter(r32, std::numeric_limits<float>::infinity());
        rec.radius = r32;
        result.concepts.push_back(std::move(rec));
    }
    return result;
}

SegmentedInstance segment_and_embed(const ModelGraph& model, const Tensor& image, const std::string& instance_id,
                                    const EmbeddingSetup& setup) {
    SegmentedInstance out;
    out.segments = extract_segments(image, instance_id, setup.resolutions, 0, setup.segmentation);
    std::vector<Patch> patches;
    patches.reserve(out.segments.size());
    for (const auto& seg : out.segments)
        patches.push_back(segment_to_patch(image, seg, setup.channel_means, model.input_shape()));
    out.embeddings = embed_patches(model, patches, setup.layer, setup.mode);
    for (auto& e : out.embeddings) e.instance_id = instance_id;
    return out;
}

}  // namespace cprobe
