#include "cprobe/layout.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <set>

#include "cprobe/errors.hpp"

namespace cprobe {

Assignment hungarian(const Matrix& cost) {
    const std::size_t n = cost.rows, m = cost.cols;
    Assignment result;
    if (n == 0) return result;
    if (n > m) throw ParameterError("assignment needs rows <= columns");
    constexpr double inf = std::numeric_limits<double>::infinity();
    // Shortest augmenting path with potentials; 1-based with a sentinel column 0.
    std::vector<double> u(n + 1, 0.0), v(m + 1, 0.0);
    std::vector<std::size_t> match(m + 1, 0), way(m + 1, 0);
    for (std::size_t i = 1; i <= n; ++i) {
        match[0] = i;
        std::size_t j0 = 0;
        std::vector<double> minv(m + 1, inf);
        std::vector<bool> used(m + 1, false);
        do {
            used[j0] = true;
            const std::size_t i0 = match[j0];
            double delta = inf;
            std::size_t j1 = 0;
            for (std::size_t j = 1; j <= m; ++j) {
                if (used[j]) continue;
                const double cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                if (cur < minv[j]) {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if (minv[j] < delta) {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for (std::size_t j = 0; j <= m; ++j) {
                if (used[j]) {
                    u[match[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
        } while (match[j0] != 0);
        do {
            const std::size_t j1 = way[j0];
            match[j0] = match[j1];
            j0 = j1;
        } while (j0 != 0);
    }
    result.column_of_row.assign(n, 0);
    for (std::size_t j = 1; j <= m; ++j)
        if (match[j]) result.column_of_row[match[j] - 1] = j - 1;
    for (std::size_t i = 0; i < n; ++i) result.total_cost += cost(i, result.column_of_row[i]);
    return result;
}

Point2 hex_center(const HexCell& cell) {
    return {std::sqrt(3.0) * (cell.col + 0.5 * (cell.row & 1)), 1.5 * cell.row};
}

std::array<Point2, 6> hex_corners(const HexCell& cell) {
    const Point2 c = hex_center(cell);
    std::array<Point2, 6> out{};
    for (int i = 0; i < 6; ++i) {
        const double a = (60.0 * i - 30.0) * std::acos(-1.0) / 180.0;
        out[i] = {c[0] + std::cos(a), c[1] + std::sin(a)};
    }
    return out;
}

HexCell hex_neighbor(const HexCell& cell, int side) {
    const bool odd = (cell.row & 1) != 0;
    switch (side) {
        case 0: return {cell.col + 1, cell.row};
        case 1: return {odd ? cell.col + 1 : cell.col, cell.row + 1};
        case 2: return {odd ? cell.col : cell.col - 1, cell.row + 1};
        case 3: return {cell.col - 1, cell.row};
        case 4: return {odd ? cell.col : cell.col - 1, cell.row - 1};
        case 5: return {odd ? cell.col + 1 : cell.col, cell.row - 1};
        default: throw ParameterError("hex side must be in [0, 6)");
    }
}

std::pair<int, int> hex_grid_size(std::size_t n) {
    if (n == 0) return {0, 0};
    const auto cols = static_cast<int>(std::ceil(std::sqrt(static_cast<double>(n))));
    const int rows = static_cast<int>((n + cols - 1) / cols);
    return {cols, rows};
}

HexAssignment isomatch_layout(const std::vector<std::string>& concept_ids, const std::vector<Point2>& positions) {
    if (concept_ids.size() != positions.size()) throw ParameterError("one position per concept required");
    HexAssignment out;
    const std::size_t n = concept_ids.size();
    if (n == 0) return out;
    const auto [cols, rows] = hex_grid_size(n);
    out.grid_cols = cols;
    out.grid_rows = rows;

    std::vector<HexCell> cells;
    for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c) cells.push_back({c, r});
    std::vector<Point2> centers;
    for (const auto& cell : cells) centers.push_back(hex_center(cell));

    auto extent = [](const std::vector<Point2>& pts, int axis) {
        double lo = std::numeric_limits<double>::infinity(), hi = -lo;
        for (const auto& p : pts) {
            lo = std::min(lo, p[axis]);
            hi = std::max(hi, p[axis]);
        }
        return std::pair{lo, hi};
    };
    std::vector<Point2> normalized(n);
    for (int axis = 0; axis < 2; ++axis) {
        const auto [plo, phi] = extent(positions, axis);
        const auto [clo, chi] = extent(centers, axis);
        for (std::size_t i = 0; i < n; ++i) {
            normalized[i][axis] = phi > plo ? clo + (positions[i][axis] - plo) / (phi - plo) * (chi - clo)
                                            : 0.5 * (clo + chi);
        }
    }

    Matrix cost(n, cells.size());
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < cells.size(); ++j) {
            const double dx = normalized[i][0] - centers[j][0], dy = normalized[i][1] - centers[j][1];
            cost(i, j) = dx * dx + dy * dy;
        }
    const Assignment a = hungarian(cost);
    for (std::size_t i = 0; i < n; ++i) out.cells[concept_ids[i]] = cells[a.column_of_row[i]];
    out.total_cost = a.total_cost;
    return out;
}

std::vector<HexEdge> cluster_boundaries(const HexAssignment& assignment,
                                        const std::map<std::string, std::string>& cluster_of_concept) {
    std::map<HexCell, std::string> occupant;
    for (const auto& [concept_id, cell] : assignment.cells) {
        const auto it = cluster_of_concept.find(concept_id);
        if (it == cluster_of_concept.end())
            throw PreconditionError("concept '" + concept_id + "' has no cluster assignment");
        occupant[cell] = it->second;
    }
    std::vector<HexEdge> edges;
    for (const auto& [cell, cluster] : occupant) {
        const auto corners = hex_corners(cell);
        for (int side = 0; side < 6; ++side) {
            const HexCell nb = hex_neighbor(cell, side);
            const auto it = occupant.find(nb);
            if (it != occupant.end()) {
                if (it->second == cluster || nb < cell) continue;  // same cluster, or reported from the other side
            }
            edges.push_back({cell, side, corners[side], corners[(side + 1) % 6]});
        }
    }
    return edges;
}

std::vector<Clique> build_cliques(const std::vector<ClassPoint>& class_points, const std::vector<Prediction>& predictions,
                                  const CliqueParams& params) {
    const std::size_t n = class_points.size();
    std::vector<Clique> out;
    if (n == 0) return out;

    double lo[2] = {INFINITY, INFINITY}, hi[2] = {-INFINITY, -INFINITY};
    for (const auto& p : class_points)
        for (int k = 0; k < 2; ++k) {
            lo[k] = std::min(lo[k], p.position[k]);
            hi[k] = std::max(hi[k], p.position[k]);
        }
    const double diagonal = std::hypot(hi[0] - lo[0], hi[1] - lo[1]);
    const double threshold = params.merge_distance_fraction * diagonal;

    std::vector<std::size_t> parent(n);
    std::iota(parent.begin(), parent.end(), 0);
    auto find = [&](std::size_t a) {
        while (parent[a] != a) a = parent[a] = parent[parent[a]];
        return a;
    };
    if (params.merge_distance_fraction > 0.0) {
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = i + 1; j < n; ++j) {
                const double d = std::hypot(class_points[i].position[0] - class_points[j].position[0],
                                            class_points[i].position[1] - class_points[j].position[1]);
                if (d <= threshold) parent[find(j)] = find(i);
            }
    }

    // Per-class eval accuracy and representative instance.
    std::map<std::size_t, std::pair<std::size_t, std::size_t>> tally;  // class -> (correct, total)
    std::map<std::size_t, const Prediction*> best_correct, best_any;
    auto better = [](const Prediction* cur, const Prediction& cand) {
        return !cur || cand.confidence > cur->confidence ||
               (cand.confidence == cur->confidence && cand.instance_id < cur->instance_id);
    };
    for (const auto& p : predictions) {
        if (!p.label) continue;
        auto& t = tally[*p.label];
        ++t.second;
        if (p.correct()) {
            ++t.first;
            if (better(best_correct[*p.label], p)) best_correct[*p.label] = &p;
        }
        if (better(best_any[*p.label], p)) best_any[*p.label] = &p;
    }

    std::map<std::size_t, std::vector<std::size_t>> groups;  // root -> point indices (ascending)
    for (std::size_t i = 0; i < n; ++i) groups[find(i)].push_back(i);
    std::vector<std::vector<std::size_t>> ordered;
    for (auto& [root, members] : groups) ordered.push_back(members);
    std::sort(ordered.begin(), ordered.end(), [&](const auto& a, const auto& b) {
        return class_points[a.front()].class_k < class_points[b.front()].class_k;
    });

    const double scale = diagonal > 0.0 ? diagonal : 1.0;
    for (std::size_t g = 0; g < ordered.size(); ++g) {
        Clique q;
        q.clique_id = "Q" + std::to_string(g + 1);
        double acc_sum = 0.0;
        std::size_t acc_n = 0;
        for (std::size_t i : ordered[g]) {
            const std::size_t k = class_points[i].class_k;
            q.member_classes.push_back(k);
            q.center[0] += class_points[i].position[0];
            q.center[1] += class_points[i].position[1];
            if (auto it = tally.find(k); it != tally.end() && it->second.second > 0) {
                acc_sum += static_cast<double>(it->second.first) / static_cast<double>(it->second.second);
                ++acc_n;
            }
            const Prediction* rep = best_correct.count(k) ? best_correct[k] : (best_any.count(k) ? best_any[k] : nullptr);
            q.representative_images.push_back(rep ? rep->instance_id : std::string{});
        }
        const double m = static_cast<double>(ordered[g].size());
        q.center[0] /= m;
        q.center[1] /= m;
        q.radius = params.radius_fraction * scale * std::sqrt(m);
        q.mean_accuracy = acc_n ? acc_sum / static_cast<double>(acc_n) : 0.0;
        out.push_back(std::move(q));
    }
    return out;
}

}  // namespace cprobe
