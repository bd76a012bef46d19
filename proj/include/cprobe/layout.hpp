#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "cprobe/clustering.hpp"
#include "cprobe/model.hpp"
#include "cprobe/tensor.hpp"

namespace cprobe {

using Point2 = std::array<double, 2>;

// ---- t-SNE ---------------------------------------------------------------

struct TsneParams {
    double perplexity = 30.0;
    int iterations = 1000;
    double learning_rate = 200.0;
    double exaggeration = 12.0;
    int exaggeration_steps = 250;
    int momentum_switch = 250;
    double initial_momentum = 0.5;
    double final_momentum = 0.8;
    double init_scale = 1e-4;
};

struct TsneAffinities {
    Matrix conditional;            // row-normalized p_{j|i}
    std::vector<double> entropy;   // achieved Shannon entropy (nats) per row
    std::vector<double> beta;      // precision 1 / (2 sigma^2) per row
};

// Per-point Gaussian bandwidths found by bisection so each row's entropy
// matches log(perplexity).
TsneAffinities tsne_affinities(const Matrix& vectors, double perplexity);

// Exact t-SNE into 2D.
std::vector<Point2> tsne_embed(const Matrix& vectors, double perplexity, std::uint64_t seed, int iterations = 1000);
std::vector<Point2> tsne_embed(const Matrix& vectors, std::uint64_t seed, const TsneParams& params);

// Classical multidimensional scaling into 2D; used when there are too few
// points for a meaningful perplexity.
std::vector<Point2> classical_mds(const Matrix& vectors);

// t-SNE with perplexity clamped to the feasible range, or MDS for fewer than
// five points.
std::vector<Point2> embed_2d(const Matrix& vectors, double perplexity, std::uint64_t seed);

// ---- Hungarian -------------------------------------------------------------

struct Assignment {
    std::vector<std::size_t> column_of_row;
    double total_cost = 0.0;
};

// Minimum-cost assignment of every row to a distinct column (rows <= cols).
Assignment hungarian(const Matrix& cost);

// ---- Hex grid --------------------------------------------------------------

struct HexCell {
    int col = 0;
    int row = 0;
    friend bool operator==(const HexCell&, const HexCell&) = default;
    friend auto operator<=>(const HexCell&, const HexCell&) = default;
};

// Pointy-top hexes of unit circumradius in odd-row offset layout.
Point2 hex_center(const HexCell& cell);
std::array<Point2, 6> hex_corners(const HexCell& cell);
// Neighbour across side s (0 = east, then clockwise in screen coordinates: SE, SW, W, NW, NE).
HexCell hex_neighbor(const HexCell& cell, int side);

struct HexAssignment {
    std::map<std::string, HexCell> cells;  // concept_id -> cell
    int grid_cols = 0;
    int grid_rows = 0;
    double total_cost = 0.0;

    friend bool operator==(const HexAssignment&, const HexAssignment&) = default;
};

// Smallest near-square grid holding n cells.
std::pair<int, int> hex_grid_size(std::size_t n);

// Overlap-free placement: positions are normalized into the grid extent and
// matched to cell centers by minimum total squared distance.
HexAssignment isomatch_layout(const std::vector<std::string>& concept_ids, const std::vector<Point2>& positions);

struct HexEdge {
    HexCell cell;
    int side = 0;
    Point2 from{};
    Point2 to{};

    friend bool operator==(const HexEdge&, const HexEdge&) = default;
};

// Edges between occupied cells of different clusters, or between an occupied
// cell and an empty/out-of-grid one. Each edge is reported once.
std::vector<HexEdge> cluster_boundaries(const HexAssignment& assignment,
                                        const std::map<std::string, std::string>& cluster_of_concept);

// ---- Class navigation ------------------------------------------------------

struct ClassPoint {
    std::size_t class_k = 0;
    Point2 position{};
    std::vector<double> mean_latent;

    friend bool operator==(const ClassPoint&, const ClassPoint&) = default;
};

struct Clique {
    std::string clique_id;
    std::vector<std::size_t> member_classes;
    Point2 center{};
    double radius = 0.0;
    double mean_accuracy = 0.0;
    std::vector<std::string> representative_images;  // one per member class, "" when none

    friend bool operator==(const Clique&, const Clique&) = default;
};

struct CliqueParams {
    double merge_distance_fraction = 0.04;
    double radius_fraction = 0.02;  // radius = radius_fraction * diagonal * sqrt(members)

    friend bool operator==(const CliqueParams&, const CliqueParams&) = default;
};

// Single-linkage grouping of class positions at threshold
// merge_distance_fraction x layout diagonal. A zero threshold disables merging.
std::vector<Clique> build_cliques(const std::vector<ClassPoint>& class_points, const std::vector<Prediction>& predictions,
                                  const CliqueParams& params = {});

}  // namespace cprobe
