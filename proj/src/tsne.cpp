#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>

#include "cprobe/errors.hpp"
#include "cprobe/layout.hpp"
#include "cprobe/rng.hpp"

namespace cprobe {

namespace {

constexpr double kEntropyTolerance = 1e-5;
constexpr int kMaxBisectionSteps = 500;

Matrix pairwise_squared(const Matrix& x) {
    Matrix d(x.rows, x.rows);
    for (std::size_t i = 0; i < x.rows; ++i)
        for (std::size_t j = i + 1; j < x.rows; ++j) d(i, j) = d(j, i) = squared_distance(x.row(i), x.row(j));
    return d;
}

}  // namespace

TsneAffinities tsne_affinities(const Matrix& x, double perplexity) {
    const std::size_t n = x.rows;
    if (n < 4) throw ParameterError("t-SNE needs at least 4 points");
    if (!(perplexity >= 1.0) || !(perplexity < static_cast<double>(n - 1) / 3.0))
        throw ParameterError("perplexity " + std::to_string(perplexity) + " infeasible for " + std::to_string(n) +
                             " points (needs 1 <= perplexity < (n-1)/3)");
    const Matrix d = pairwise_squared(x);
    const double target = std::log(perplexity);

    TsneAffinities out{Matrix(n, n), std::vector<double>(n), std::vector<double>(n)};
    std::vector<double> p(n);
    for (std::size_t i = 0; i < n; ++i) {
        double dmin = std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < n; ++j)
            if (j != i) dmin = std::min(dmin, d(i, j));
        double beta = 1.0, lo = 0.0, hi = std::numeric_limits<double>::infinity();
        double entropy = 0.0;
        for (int step = 0; step < kMaxBisectionSteps; ++step) {
            double sum = 0.0, weighted = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
                if (j == i) {
                    p[j] = 0.0;
                    continue;
                }
                const double shifted = d(i, j) - dmin;
                p[j] = std::exp(-shifted * beta);
                sum += p[j];
                weighted += shifted * p[j];
            }
            entropy = std::log(sum) + beta * weighted / sum;
            for (std::size_t j = 0; j < n; ++j) p[j] /= sum;
            const double diff = entropy - target;
            if (std::fabs(diff) < kEntropyTolerance) break;
            if (diff > 0.0) {
                lo = beta;
                beta = std::isinf(hi) ? beta * 2.0 : 0.5 * (beta + hi);
            } else {
                hi = beta;
                beta = 0.5 * (beta + lo);
            }
        }
        std::copy(p.begin(), p.end(), out.conditional.row(i).begin());
        out.entropy[i] = entropy;
        out.beta[i] = beta;
    }
    return out;
}

std::vector<Point2> tsne_embed(const Matrix& x, double perplexity, std::uint64_t seed, int iterations) {
    TsneParams params;
    params.perplexity = perplexity;
    params.iterations = iterations;
    return tsne_embed(x, seed, params);
}

std::vector<Point2> tsne_embed(const Matrix& x, std::uint64_t seed, const TsneParams& params) {
    const std::size_t n = x.rows;
    const TsneAffinities aff = tsne_affinities(x, params.perplexity);

    Matrix P(n, n);
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            P(i, j) = aff.conditional(i, j) + aff.conditional(j, i);
            total += P(i, j);
        }
    for (double& v : P.data) v = std::max(v / total, 1e-12);

    Rng rng(seed);
    std::vector<Point2> y(n), velocity(n, Point2{0, 0}), gains(n, Point2{1, 1}), grad(n);
    for (auto& p : y) p = {params.init_scale * rng.normal(), params.init_scale * rng.normal()};

    Matrix num(n, n);
    for (int iter = 0; iter < params.iterations; ++iter) {
        const double exaggeration = iter < params.exaggeration_steps ? params.exaggeration : 1.0;
        const double momentum = iter < params.momentum_switch ? params.initial_momentum : params.final_momentum;

        double zsum = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            num(i, i) = 0.0;
            for (std::size_t j = i + 1; j < n; ++j) {
                const double dx = y[i][0] - y[j][0], dy = y[i][1] - y[j][1];
                const double q = 1.0 / (1.0 + dx * dx + dy * dy);
                num(i, j) = num(j, i) = q;
                zsum += 2.0 * q;
            }
        }
        for (std::size_t i = 0; i < n; ++i) {
            Point2 g{0, 0};
            for (std::size_t j = 0; j < n; ++j) {
                if (j == i) continue;
                const double q = std::max(num(i, j) / zsum, 1e-12);
                const double m = (exaggeration * P(i, j) - q) * num(i, j);
                g[0] += m * (y[i][0] - y[j][0]);
                g[1] += m * (y[i][1] - y[j][1]);
            }
            grad[i] = {4.0 * g[0], 4.0 * g[1]};
        }
        Point2 centroid{0, 0};
        for (std::size_t i = 0; i < n; ++i) {
            for (int k = 0; k < 2; ++k) {
                const bool same_sign = (grad[i][k] > 0.0) == (velocity[i][k] > 0.0);
                gains[i][k] = same_sign ? gains[i][k] * 0.8 : gains[i][k] + 0.2;
                gains[i][k] = std::max(gains[i][k], 0.01);
                velocity[i][k] = momentum * velocity[i][k] - params.learning_rate * gains[i][k] * grad[i][k];
                y[i][k] += velocity[i][k];
                centroid[k] += y[i][k];
            }
        }
        for (auto& p : y) {
            p[0] -= centroid[0] / static_cast<double>(n);
            p[1] -= centroid[1] / static_cast<double>(n);
        }
    }
    return y;
}

std::vector<Point2> classical_mds(const Matrix& x) {
    const std::size_t n = x.rows;
    std::vector<Point2> out(n, Point2{0, 0});
    if (n < 2) return out;
    Eigen::MatrixXd d2(n, n);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) d2(i, j) = squared_distance(x.row(i), x.row(j));
    const Eigen::MatrixXd centering =
        Eigen::MatrixXd::Identity(n, n) - Eigen::MatrixXd::Constant(n, n, 1.0 / static_cast<double>(n));
    const Eigen::MatrixXd b = -0.5 * centering * d2 * centering;
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(b);
    for (int axis = 0; axis < 2 && axis < static_cast<int>(n); ++axis) {
        const Eigen::Index col = static_cast<Eigen::Index>(n) - 1 - axis;  // eigenvalues ascend
        const double lambda = std::max(0.0, eig.eigenvalues()[col]);
        Eigen::VectorXd v = eig.eigenvectors().col(col);
        Eigen::Index arg = 0;
        v.cwiseAbs().maxCoeff(&arg);
        if (v[arg] < 0) v = -v;
        for (std::size_t i = 0; i < n; ++i) out[i][axis] = v[static_cast<Eigen::Index>(i)] * std::sqrt(lambda);
    }
    return out;
}

std::vector<Point2> embed_2d(const Matrix& x, double perplexity, std::uint64_t seed) {
    if (x.rows < 5) return classical_mds(x);
    const double feasible = 0.95 * static_cast<double>(x.rows - 1) / 3.0;
    return tsne_embed(x, std::max(1.0, std::min(perplexity, feasible)), seed);
}

}  // namespace cprobe
