#include "cprobe/clustering.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "cprobe/errors.hpp"

namespace cprobe {

std::string to_string(ClusterMethod m) { return m == ClusterMethod::kmeans ? "kmeans" : "agglomerative"; }

ClusterMethod cluster_method_from_string(const std::string& s) {
    if (s == "kmeans" || s == "k-means") return ClusterMethod::kmeans;
    if (s == "agglomerative") return ClusterMethod::agglomerative;
    throw ParameterError("unknown clustering method '" + s + "'");
}

WardResult ward_agglomerative(const Matrix& x, std::size_t n_clusters) {
    if (n_clusters < 1 || n_clusters > x.rows) throw ParameterError("invalid cluster count for Ward linkage");
    const std::size_t n = x.rows;
    std::vector<std::vector<double>> centroid(n);
    std::vector<std::size_t> size(n, 1);
    std::vector<bool> active(n, true);
    std::vector<std::size_t> owner(n);
    std::iota(owner.begin(), owner.end(), 0);
    for (std::size_t i = 0; i < n; ++i) centroid[i].assign(x.row(i).begin(), x.row(i).end());

    WardResult res;
    for (std::size_t groups = n; groups > n_clusters; --groups) {
        std::size_t bi = 0, bj = 0;
        double best = std::numeric_limits<double>::infinity();
        for (std::size_t i = 0; i < n; ++i) {
            if (!active[i]) continue;
            for (std::size_t j = i + 1; j < n; ++j) {
                if (!active[j]) continue;
                const double ni = static_cast<double>(size[i]), nj = static_cast<double>(size[j]);
                const double cost = ni * nj / (ni + nj) * squared_distance(centroid[i], centroid[j]);
                if (cost < best) {
                    best = cost;
                    bi = i;
                    bj = j;
                }
            }
        }
        const double ni = static_cast<double>(size[bi]), nj = static_cast<double>(size[bj]);
        for (std::size_t d = 0; d < x.cols; ++d)
            centroid[bi][d] = (ni * centroid[bi][d] + nj * centroid[bj][d]) / (ni + nj);
        size[bi] += size[bj];
        active[bj] = false;
        for (auto& o : owner)
            if (o == bj) o = bi;
        res.merge_costs.push_back(best);
    }
    std::vector<std::size_t> remap(n, n);
    std::size_t next = 0;
    res.assignments.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        if (remap[owner[i]] == n) remap[owner[i]] = next++;
        res.assignments[i] = remap[owner[i]];
    }
    return res;
}

std::vector<std::size_t> cluster_labels(const Matrix& vectors, ClusterMethod method, std::size_t n_clusters,
                                        std::uint64_t seed) {
    if (method == ClusterMethod::kmeans) return kmeans(vectors, n_clusters, seed).assignments;
    return ward_agglomerative(vectors, n_clusters).assignments;
}

double silhouette_score(const Matrix& x, const std::vector<std::size_t>& assignments) {
    if (assignments.size() != x.rows) throw ParameterError("one assignment per vector required");
    std::vector<std::size_t> ids = assignments;
    std::sort(ids.begin(), ids.end());
    ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
    if (ids.size() < 2) throw ParameterError("silhouette is undefined for a single cluster");
    std::vector<std::size_t> index(x.rows);
    std::vector<std::size_t> counts(ids.size(), 0);
    for (std::size_t i = 0; i < x.rows; ++i) {
        index[i] = static_cast<std::size_t>(std::lower_bound(ids.begin(), ids.end(), assignments[i]) - ids.begin());
        ++counts[index[i]];
    }

    double total = 0.0;
    std::vector<double> sums(ids.size());
    for (std::size_t i = 0; i < x.rows; ++i) {
        const std::size_t own = index[i];
        if (counts[own] == 1) continue;  // singleton contributes 0
        std::fill(sums.begin(), sums.end(), 0.0);
        for (std::size_t j = 0; j < x.rows; ++j)
            if (j != i) sums[index[j]] += euclidean_distance(x.row(i), x.row(j));
        const double a = sums[own] / static_cast<double>(counts[own] - 1);
        double b = std::numeric_limits<double>::infinity();
        for (std::size_t c = 0; c < ids.size(); ++c)
            if (c != own) b = std::min(b, sums[c] / static_cast<double>(counts[c]));
        const double denom = std::max(a, b);
        if (denom > 0.0) total += (b - a) / denom;
    }
    return total / static_cast<double>(x.rows);
}

ClusterCountSelection select_cluster_count(const Matrix& vectors, ClusterMethod method,
                                           const std::vector<std::size_t>& k_range, std::uint64_t seed) {
    if (k_range.empty()) throw ParameterError("empty cluster-count range");
    ClusterCountSelection sel;
    double best = -std::numeric_limits<double>::infinity();
    std::vector<std::size_t> ks = k_range;
    std::sort(ks.begin(), ks.end());
    for (std::size_t k : ks) {
        if (k < 2 || k + 1 > vectors.rows)
            throw ParameterError("cluster count " + std::to_string(k) + " outside [2, " +
                                 std::to_string(vectors.rows > 0 ? vectors.rows - 1 : 0) + "]");
        const auto labels = cluster_labels(vectors, method, k, seed);
        // Coincident points can collapse into one cluster; score it as 0.
        const bool single = std::all_of(labels.begin(), labels.end(), [&](std::size_t l) { return l == labels[0]; });
        const double s = single ? 0.0 : silhouette_score(vectors, labels);
        sel.scores[k] = s;
        if (s > best) {
            best = s;
            sel.best_k = k;
        }
    }
    return sel;
}

std::vector<std::size_t> default_k_range(std::size_t n_concepts) {
    std::vector<std::size_t> ks;
    if (n_concepts < 3) return ks;
    for (std::size_t k = 2; k <= std::min<std::size_t>(30, n_concepts - 1); ++k) ks.push_back(k);
    return ks;
}

ClusteringResult cluster_concepts(std::vector<ConceptRecord>& concepts, const ClusteringConfig& config) {
    if (concepts.size() < 2) throw PreconditionError("concept clustering needs at least 2 concepts");
    Matrix x(concepts.size(), concepts.front().centroid.size());
    for (std::size_t i = 0; i < concepts.size(); ++i) {
        if (concepts[i].centroid.size() != x.cols) throw PreconditionError("concept centroids differ in dimensionality");
        std::copy(concepts[i].centroid.begin(), concepts[i].centroid.end(), x.row(i).begin());
    }

    ClusteringResult result;
    std::size_t k = 0;
    if (config.n_clusters) {
        k = *config.n_clusters;
        if (k > concepts.size())
            throw ParameterError("n_clusters " + std::to_string(k) + " exceeds " + std::to_string(concepts.size()) +
                                 " concepts");
        if (k < 1) throw ParameterError("n_clusters must be positive");
    } else {
        const auto range = default_k_range(concepts.size());
        if (range.empty()) {
            k = concepts.size();
        } else {
            auto sel = select_cluster_count(x, config.method, range, config.seed);
            k = sel.best_k;
            result.silhouette = std::move(sel.scores);
        }
    }
    result.n_clusters = k;
    const auto labels = cluster_labels(x, config.method, k, config.seed);

    std::vector<std::vector<std::size_t>> groups(k);
    for (std::size_t i = 0; i < labels.size(); ++i) groups[labels[i]].push_back(i);
    groups.erase(std::remove_if(groups.begin(), groups.end(), [](const auto& g) { return g.empty(); }), groups.end());
    std::stable_sort(groups.begin(), groups.end(), [](const auto& a, const auto& b) {
        if (a.size() != b.size()) return a.size() > b.size();
        return a.front() < b.front();
    });

    for (std::size_t g = 0; g < groups.size(); ++g) {
        ConceptCluster cc;
        cc.cluster_id = "CC" + std::to_string(g + 1);
        double best = std::numeric_limits<double>::infinity();
        for (std::size_t i : groups[g]) {
            cc.member_concept_ids.push_back(concepts[i].concept_id);
            concepts[i].cluster_id = cc.cluster_id;
            double total = 0.0;
            for (std::size_t j : groups[g]) total += euclidean_distance(x.row(i), x.row(j));
            if (total < best) {
                best = total;
                cc.medoid_concept_id = concepts[i].concept_id;
            }
        }
        result.clusters.push_back(std::move(cc));
    }
    return result;
}

int concept_similarity(const std::string& concept_a, const std::string& concept_b,
                       const std::vector<ConceptCluster>& clusters) {
    auto cluster_of = [&](const std::string& id) -> const std::string& {
        for (const auto& c : clusters)
            if (std::find(c.member_concept_ids.begin(), c.member_concept_ids.end(), id) != c.member_concept_ids.end())
                return c.cluster_id;
        throw LookupError("concept '" + id + "' is not assigned to a cluster");
    };
    return cluster_of(concept_a) == cluster_of(concept_b) ? 1 : 0;
}

}  // namespace cprobe
