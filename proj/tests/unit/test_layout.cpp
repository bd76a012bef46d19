#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include "cprobe/errors.hpp"
#include "cprobe/layout.hpp"
#include "test_support.hpp"

namespace cprobe {
namespace {

double dist(const Point2& a, const Point2& b) { return std::hypot(a[0] - b[0], a[1] - b[1]); }

TEST(Tsne, AffinityRowsHitTargetEntropy) {
    const Matrix x = testing::gaussian_blobs({{0, 0, 0}, {4, 0, 0}}, 30, 1.0, 1);
    for (double perplexity : {5.0, 15.0}) {
        const auto aff = tsne_affinities(x, perplexity);
        for (std::size_t i = 0; i < x.rows; ++i) {
            double sum = 0.0, h = 0.0;
            for (std::size_t j = 0; j < x.rows; ++j) {
                const double p = aff.conditional(i, j);
                sum += p;
                if (p > 0) h -= p * std::log(p);
            }
            EXPECT_EQ(aff.conditional(i, i), 0.0);
            EXPECT_NEAR(sum, 1.0, 1e-12);
            EXPECT_NEAR(h, std::log(perplexity), 1e-4);
            EXPECT_NEAR(aff.entropy[i], h, 1e-9);
        }
    }
    EXPECT_THROW(tsne_affinities(x, 30.0), ParameterError);
    EXPECT_THROW(tsne_affinities(Matrix(3, 2), 1.0), ParameterError);
}

TEST(Tsne, KeepsSeparatedBlobsApart) {
    std::vector<std::size_t> truth;
    const Matrix x = testing::gaussian_blobs(
        {{0, 0, 0, 0, 0, 0}, {6, 0, 0, 0, 0, 0}, {0, 6, 0, 0, 0, 0}}, 20, 1.0, 2, &truth);
    const auto y = tsne_embed(x, 10.0, 3);
    std::size_t pure = 0;
    for (std::size_t i = 0; i < y.size(); ++i) {
        std::size_t nn = i == 0 ? 1 : 0;
        for (std::size_t j = 0; j < y.size(); ++j)
            if (j != i && dist(y[i], y[j]) < dist(y[i], y[nn])) nn = j;
        pure += truth[nn] == truth[i];
    }
    EXPECT_GE(static_cast<double>(pure) / static_cast<double>(y.size()), 0.95);
}

TEST(Tsne, DuplicatesLandTogetherAndRunsRepeat) {
    Matrix x = testing::gaussian_blobs({{0, 0, 0}, {5, 5, 5}}, 12, 1.0, 4);
    std::copy(x.row(3).begin(), x.row(3).end(), x.row(7).begin());
    const auto y = tsne_embed(x, 4.0, 5);
    // Each copy is the other's nearest neighbour in the map.
    for (std::size_t i = 0; i < y.size(); ++i) {
        if (i == 3 || i == 7) continue;
        EXPECT_LT(dist(y[3], y[7]), dist(y[3], y[i])) << i;
        EXPECT_LT(dist(y[3], y[7]), dist(y[7], y[i])) << i;
    }
    EXPECT_EQ(tsne_embed(x, 4.0, 5), y);
}

TEST(Mds, RecoversPlanarConfigurationDistances) {
    // A planar point set embedded in 4D by an orthonormal pair of directions.
    Rng rng(6);
    const std::vector<double> u{0.5, 0.5, 0.5, 0.5}, v{0.5, -0.5, 0.5, -0.5};
    std::vector<Point2> plane(9);
    Matrix x(9, 4);
    for (std::size_t i = 0; i < 9; ++i) {
        plane[i] = {rng.normal(), rng.normal()};
        for (std::size_t d = 0; d < 4; ++d) x(i, d) = plane[i][0] * u[d] + plane[i][1] * v[d] + 1.0;
    }
    const auto y = classical_mds(x);
    for (std::size_t i = 0; i < 9; ++i)
        for (std::size_t j = 0; j < 9; ++j) EXPECT_NEAR(dist(y[i], y[j]), dist(plane[i], plane[j]), 1e-9);
}

TEST(Mds, SmallInputsUseMds) {
    const Matrix x = Matrix::from_rows({{0, 0}, {3, 4}, {6, 8}});
    const auto y = embed_2d(x, 30.0, 1);
    EXPECT_NEAR(dist(y[0], y[2]), 10.0, 1e-9);
    EXPECT_EQ(classical_mds(Matrix::from_rows({{1, 2}})), (std::vector<Point2>{{0, 0}}));
    EXPECT_EQ(embed_2d(testing::gaussian_blobs({{0, 0}}, 8, 1.0, 1), 30.0, 2).size(), 8u);
}

TEST(Hungarian, MatchesExhaustiveSearch) {
    Rng rng(7);
    for (int t = 0; t < 100; ++t) {
        const std::size_t n = 1 + rng.below(7), m = n + rng.below(3);
        Matrix c(n, m);
        for (double& v : c.data) v = t % 3 == 0 ? static_cast<double>(rng.below(4)) : rng.uniform(0, 10);
        const Assignment a = hungarian(c);
        EXPECT_NEAR(a.total_cost, testing::brute_force_assignment_cost(c), 1e-9);
        std::set<std::size_t> used(a.column_of_row.begin(), a.column_of_row.end());
        EXPECT_EQ(used.size(), n);
        double sum = 0.0;
        for (std::size_t i = 0; i < n; ++i) sum += c(i, a.column_of_row[i]);
        EXPECT_DOUBLE_EQ(sum, a.total_cost);
    }
    EXPECT_THROW(hungarian(Matrix(3, 2)), ParameterError);
    EXPECT_TRUE(hungarian(Matrix(0, 2)).column_of_row.empty());
}

TEST(Hex, NeighboursAreOneSpacingApartAndShareAnEdge) {
    for (int row = 0; row < 4; ++row)
        for (int col = 0; col < 4; ++col) {
            const HexCell cell{col, row};
            const auto corners = hex_corners(cell);
            for (int s = 0; s < 6; ++s) {
                const HexCell nb = hex_neighbor(cell, s);
                EXPECT_NEAR(dist(hex_center(cell), hex_center(nb)), std::sqrt(3.0), 1e-12);
                EXPECT_EQ(hex_neighbor(nb, (s + 3) % 6), cell);
                const auto other = hex_corners(nb);
                const int o = (s + 3) % 6;
                EXPECT_NEAR(dist(corners[s], other[(o + 1) % 6]), 0.0, 1e-12);
                EXPECT_NEAR(dist(corners[(s + 1) % 6], other[o]), 0.0, 1e-12);
                EXPECT_NEAR(dist(corners[s], hex_center(cell)), 1.0, 1e-12);
            }
        }
    EXPECT_THROW(hex_neighbor({0, 0}, 6), ParameterError);
}

TEST(Hex, GridSizeIsNearSquare) {
    EXPECT_EQ(hex_grid_size(0), (std::pair<int, int>{0, 0}));
    EXPECT_EQ(hex_grid_size(1), (std::pair<int, int>{1, 1}));
    EXPECT_EQ(hex_grid_size(5), (std::pair<int, int>{3, 2}));
    EXPECT_EQ(hex_grid_size(29), (std::pair<int, int>{6, 5}));
    for (std::size_t n = 1; n < 200; ++n) {
        const auto [c, r] = hex_grid_size(n);
        EXPECT_GE(static_cast<std::size_t>(c * r), n);
        EXPECT_LT(static_cast<std::size_t>(c * (r - 1)), n);
        EXPECT_LE(r, c);
    }
}

TEST(Isomatch, SingleConceptTakesOrigin) {
    const auto a = isomatch_layout({"x"}, {{{5.0, -2.0}}});
    EXPECT_EQ(a.cells.at("x"), (HexCell{0, 0}));
    EXPECT_EQ(a.grid_cols, 1);
    EXPECT_TRUE(isomatch_layout({}, {}).cells.empty());
    EXPECT_THROW(isomatch_layout({"x"}, {}), ParameterError);
}

TEST(Isomatch, IsInjectiveAndOptimal) {
    Rng rng(8);
    for (int t = 0; t < 30; ++t) {
        const std::size_t n = 2 + rng.below(7);
        std::vector<std::string> ids;
        std::vector<Point2> pos;
        for (std::size_t i = 0; i < n; ++i) {
            ids.push_back("c" + std::to_string(i));
            pos.push_back({rng.normal(), rng.normal()});
        }
        const HexAssignment a = isomatch_layout(ids, pos);
        std::set<HexCell> cells;
        for (const auto& [id, cell] : a.cells) {
            cells.insert(cell);
            EXPECT_GE(cell.col, 0);
            EXPECT_LT(cell.col, a.grid_cols);
            EXPECT_LT(cell.row, a.grid_rows);
        }
        EXPECT_EQ(cells.size(), n);

        // Independent cost: positions scaled per axis onto the cell-center box.
        std::vector<Point2> centers;
        for (int r = 0; r < a.grid_rows; ++r)
            for (int c = 0; c < a.grid_cols; ++c) centers.push_back(hex_center({c, r}));
        Matrix cost(n, centers.size());
        for (int axis = 0; axis < 2; ++axis) {
            auto [plo, phi] = std::minmax_element(pos.begin(), pos.end(),
                                                  [&](const Point2& p, const Point2& q) { return p[axis] < q[axis]; });
            auto [clo, chi] = std::minmax_element(
                centers.begin(), centers.end(), [&](const Point2& p, const Point2& q) { return p[axis] < q[axis]; });
            for (std::size_t i = 0; i < n; ++i) {
                const double v = (*clo)[axis] + (pos[i][axis] - (*plo)[axis]) / ((*phi)[axis] - (*plo)[axis]) *
                                                    ((*chi)[axis] - (*clo)[axis]);
                for (std::size_t j = 0; j < centers.size(); ++j) cost(i, j) += (v - centers[j][axis]) * (v - centers[j][axis]);
            }
        }
        EXPECT_NEAR(a.total_cost, testing::brute_force_assignment_cost(cost), 1e-9);
    }
}

std::size_t recount_boundaries(const HexAssignment& a, const std::map<std::string, std::string>& cluster_of) {
    std::map<HexCell, std::string> occ;
    for (const auto& [id, cell] : a.cells) occ[cell] = cluster_of.at(id);
    std::size_t open = 0, shared = 0;
    for (const auto& [cell, cl] : occ)
        for (int s = 0; s < 6; ++s) {
            const auto it = occ.find(hex_neighbor(cell, s));
            if (it == occ.end()) ++open;
            else if (it->second != cl) ++shared;
        }
    return open + shared / 2;
}

TEST(Boundaries, PairOfCellsCountsOuterAndSharedEdges) {
    HexAssignment a;
    a.cells = {{"a", {0, 0}}, {"b", {1, 0}}};
    EXPECT_EQ(cluster_boundaries(a, {{"a", "CC1"}, {"b", "CC1"}}).size(), 10u);
    const auto edges = cluster_boundaries(a, {{"a", "CC1"}, {"b", "CC2"}});
    EXPECT_EQ(edges.size(), 11u);
    std::size_t internal = 0;
    for (const auto& e : edges) {
        EXPECT_NEAR(dist(e.from, e.to), 1.0, 1e-12);
        if (e.cell == HexCell{0, 0} && e.side == 0) ++internal;
    }
    EXPECT_EQ(internal, 1u);
    EXPECT_THROW(cluster_boundaries(a, {{"a", "CC1"}}), PreconditionError);
}

TEST(Boundaries, FixtureSnapshotEdgesRecount) {
    const Snapshot& snap = testing::fixture_snapshot();
    std::map<std::string, std::string> cluster_of;
    for (const auto& c : snap.clusters)
        for (const auto& id : c.member_concept_ids) cluster_of[id] = c.cluster_id;
    EXPECT_EQ(snap.boundaries.size(), recount_boundaries(snap.hex, cluster_of));
    EXPECT_EQ(cluster_boundaries(snap.hex, cluster_of), snap.boundaries);
}

std::vector<ClassPoint> points_at(const std::vector<Point2>& pos) {
    std::vector<ClassPoint> out;
    for (std::size_t k = 0; k < pos.size(); ++k) out.push_back({k, pos[k], {}});
    return out;
}

// Connected components of the "within threshold" graph, by transitive closure.
std::set<std::set<std::size_t>> single_linkage(const std::vector<Point2>& pos, double threshold) {
    const std::size_t n = pos.size();
    std::vector<std::vector<bool>> reach(n, std::vector<bool>(n));
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) reach[i][j] = i == j || dist(pos[i], pos[j]) <= threshold;
    for (std::size_t k = 0; k < n; ++k)
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < n; ++j) reach[i][j] = reach[i][j] || (reach[i][k] && reach[k][j]);
    std::set<std::set<std::size_t>> groups;
    for (std::size_t i = 0; i < n; ++i) {
        std::set<std::size_t> g;
        for (std::size_t j = 0; j < n; ++j)
            if (reach[i][j]) g.insert(j);
        groups.insert(g);
    }
    return groups;
}

TEST(Cliques, ZeroThresholdKeepsEveryClassAlone) {
    const auto pts = points_at({{0, 0}, {0, 0}, {1, 1}});
    CliqueParams p;
    p.merge_distance_fraction = 0.0;
    const auto q = build_cliques(pts, {}, p);
    ASSERT_EQ(q.size(), 3u);
    for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(q[i].member_classes, (std::vector<std::size_t>{i}));
    p.merge_distance_fraction = 1.0;
    EXPECT_EQ(build_cliques(pts, {}, p).size(), 1u);
}

TEST(Cliques, SevenNearbyClassesChainIntoOneClique) {
    // Seven classes spaced just under the merge distance along a line, plus
    // two far-away classes; single linkage chains the seven together.
    std::vector<Point2> pos;
    for (int i = 0; i < 7; ++i) pos.push_back({0.3 * i, 0.05 * (i % 2)});
    pos.push_back({100, 0});
    pos.push_back({100, 60});
    CliqueParams p;
    p.merge_distance_fraction = 0.01;
    double lo0 = INFINITY, hi0 = -INFINITY, lo1 = INFINITY, hi1 = -INFINITY;
    for (const auto& q : pos) lo0 = std::min(lo0, q[0]), hi0 = std::max(hi0, q[0]), lo1 = std::min(lo1, q[1]), hi1 = std::max(hi1, q[1]);
    const double threshold = 0.01 * std::hypot(hi0 - lo0, hi1 - lo1);
    const auto expected = single_linkage(pos, threshold);
    const auto cliques = build_cliques(points_at(pos), {}, p);
    std::set<std::set<std::size_t>> got;
    for (const auto& c : cliques) got.insert({c.member_classes.begin(), c.member_classes.end()});
    EXPECT_EQ(got, expected);
    ASSERT_EQ(cliques.size(), 3u);
    EXPECT_EQ(cliques[0].member_classes.size(), 7u);
    EXPECT_NEAR(cliques[0].radius, 0.02 * std::hypot(hi0 - lo0, hi1 - lo1) * std::sqrt(7.0), 1e-9);
    EXPECT_NEAR(cliques[0].center[0], 0.9, 1e-12);
}

TEST(Cliques, RandomLayoutsMatchSingleLinkage) {
    Rng rng(10);
    for (int t = 0; t < 30; ++t) {
        std::vector<Point2> pos(3 + rng.below(10));
        for (auto& q : pos) q = {rng.uniform(), rng.uniform()};
        CliqueParams p;
        p.merge_distance_fraction = 0.15;
        double lo0 = INFINITY, hi0 = -INFINITY, lo1 = INFINITY, hi1 = -INFINITY;
        for (const auto& q : pos) lo0 = std::min(lo0, q[0]), hi0 = std::max(hi0, q[0]), lo1 = std::min(lo1, q[1]), hi1 = std::max(hi1, q[1]);
        std::set<std::set<std::size_t>> got;
        for (const auto& c : build_cliques(points_at(pos), {}, p)) got.insert({c.member_classes.begin(), c.member_classes.end()});
        EXPECT_EQ(got, single_linkage(pos, 0.15 * std::hypot(hi0 - lo0, hi1 - lo1)));
    }
}

TEST(Cliques, AccuracyAndRepresentatives) {
    auto pred = [](std::string id, std::size_t label, std::size_t predicted, double conf) {
        Prediction p;
        p.instance_id = std::move(id);
        p.label = label;
        p.predicted_class = predicted;
        p.confidence = conf;
        return p;
    };
    const std::vector<Prediction> preds{pred("a1", 0, 0, 0.7), pred("a2", 0, 0, 0.9), pred("a3", 0, 1, 0.99),
                                        pred("b1", 1, 0, 0.8), pred("b2", 1, 0, 0.6)};
    CliqueParams p;
    p.merge_distance_fraction = 1.0;
    const auto q = build_cliques(points_at({{0, 0}, {1, 0}, {2, 0}}), preds, p);
    ASSERT_EQ(q.size(), 1u);
    // Class 2 has no predictions and is left out of the mean.
    EXPECT_NEAR(q[0].mean_accuracy, (2.0 / 3.0 + 0.0) / 2.0, 1e-12);
    EXPECT_EQ(q[0].representative_images, (std::vector<std::string>{"a2", "b1", ""}));
    EXPECT_EQ(q[0].clique_id, "Q1");
}

}  // namespace
}  // namespace cprobe
