#include "carn/lae.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>

#include <Eigen/Dense>

#include "carn/tensor.hpp"

namespace carn {

namespace {

double squared_distance(std::span<const double> a, std::span<const double> b) {
    double s = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = a[i] - b[i];
        s += d * d;
    }
    return s;
}

void check_dims(std::span<const double> y, std::span<const IndexVector> neighbors) {
    if (neighbors.empty()) throw ShapeError("lae_solve: need at least one neighbor");
    for (const auto& b : neighbors) {
        if (b.size() != y.size()) {
            throw ShapeError("lae_solve: neighbor dimension " + std::to_string(b.size()) +
                             " differs from target dimension " + std::to_string(y.size()));
        }
    }
}

}  // namespace

NeighborSet knn_targets(std::span<const IndexVector> targets, std::size_t query, std::size_t k) {
    const std::size_t n = targets.size();
    if (k == 0) throw ShapeError("knn_targets: k must be positive");
    if (k >= n) {
        throw ShapeError("knn_targets: k=" + std::to_string(k) + " needs more than " +
                         std::to_string(n) + " samples");
    }
    if (query >= n) throw ShapeError("knn_targets: query index out of range");
    const auto& y = targets[query];
    std::vector<std::pair<double, std::size_t>> order;
    order.reserve(n - 1);
    for (std::size_t j = 0; j < n; ++j) {
        if (j == query) continue;
        if (targets[j].size() != y.size()) throw ShapeError("knn_targets: inconsistent target dimensions");
        order.emplace_back(squared_distance(y, targets[j]), j);
    }
    std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end());
    NeighborSet out;
    for (std::size_t j = 0; j < k; ++j) {
        out.indices.push_back(order[j].second);
        out.targets.push_back(targets[order[j].second]);
    }
    return out;
}

SimplexWeights project_simplex(std::span<const double> v) {
    if (v.empty()) throw ShapeError("project_simplex: empty input");
    std::vector<double> u(v.begin(), v.end());
    std::sort(u.begin(), u.end(), std::greater<>());
    double cumulative = 0, theta = 0;
    for (std::size_t j = 0; j < u.size(); ++j) {
        cumulative += u[j];
        const double t = (cumulative - 1.0) / static_cast<double>(j + 1);
        if (u[j] - t > 0) theta = t;
    }
    SimplexWeights w;
    w.alpha.resize(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) w.alpha[i] = std::max(v[i] - theta, 0.0);
    return w;
}

double lae_objective(std::span<const double> y, std::span<const IndexVector> neighbors,
                     std::span<const double> alpha) {
    double s = 0;
    for (std::size_t i = 0; i < y.size(); ++i) {
        double r = y[i];
        for (std::size_t j = 0; j < neighbors.size(); ++j) r -= alpha[j] * neighbors[j][i];
        s += r * r;
    }
    return 0.5 * s;
}

LaeResult lae_solve_detailed(std::span<const double> y, std::span<const IndexVector> neighbors,
                             const LaeOptions& options) {
    check_dims(y, neighbors);
    const std::size_t k = neighbors.size(), d = y.size();

    // Center on the neighbor mean.
    std::vector<double> center(d, 0.0);
    for (const auto& b : neighbors)
        for (std::size_t i = 0; i < d; ++i) center[i] += b[i] / static_cast<double>(k);
    std::vector<IndexVector> bc(k, IndexVector(d));
    std::vector<double> yc(d);
    for (std::size_t i = 0; i < d; ++i) yc[i] = y[i] - center[i];
    for (std::size_t j = 0; j < k; ++j)
        for (std::size_t i = 0; i < d; ++i) bc[j][i] = neighbors[j][i] - center[i];

    // Gram matrix G = Bc Bc^T and linear term c = Bc yc; grad = G a - c.
    std::vector<double> gram(k * k), lin(k);
    for (std::size_t a = 0; a < k; ++a) {
        for (std::size_t b = a; b < k; ++b) {
            double s = 0;
            for (std::size_t i = 0; i < d; ++i) s += bc[a][i] * bc[b][i];
            gram[a * k + b] = gram[b * k + a] = s;
        }
        double s = 0;
        for (std::size_t i = 0; i < d; ++i) s += bc[a][i] * yc[i];
        lin[a] = s;
    }
    auto objective = [&](const std::vector<double>& a) { return lae_objective(yc, bc, a); };

    // Largest eigenvalue of G. The centered Gram matrix always has the
    // all-ones vector in its null space, so power iteration from a uniform
    // start stalls at zero.
    const Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> gmat(
        gram.data(), static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(k));
    const double lipschitz =
        k > 1 ? Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(gmat, Eigen::EigenvaluesOnly).eigenvalues().maxCoeff() *
                    (1.0 + 1e-9)
              : 0.0;

    auto gradient = [&](const std::vector<double>& a, std::vector<double>& g) {
        for (std::size_t i = 0; i < k; ++i) {
            double s = -lin[i];
            for (std::size_t j = 0; j < k; ++j) s += gram[i * k + j] * a[j];
            g[i] = s;
        }
    };

    LaeResult result;
    std::vector<double> alpha(k, 0.0);
    {
        std::size_t best = 0;
        double best_d = squared_distance(yc, bc[0]);
        for (std::size_t j = 1; j < k; ++j) {
            const double dj = squared_distance(yc, bc[j]);
            if (dj < best_d) {
                best_d = dj;
                best = j;
            }
        }
        alpha[best] = 1.0;
    }
    double f = objective(alpha);

    if (lipschitz > 0) {
        std::vector<double> z = alpha, prev = alpha, step(k), g(k);
        double t = 1.0;
        for (std::size_t it = 0; it < options.max_iterations; ++it) {
            gradient(z, g);
            for (std::size_t a = 0; a < k; ++a) step[a] = z[a] - g[a] / lipschitz;
            auto candidate = project_simplex(step).alpha;
            const double fc = objective(candidate);
            ++result.iterations;
            const bool plain_step = (z == alpha);
            double moved = 0;
            for (std::size_t a = 0; a < k; ++a) moved = std::max(moved, std::abs(candidate[a] - z[a]));
            if (fc > f) {
                // momentum overshot: restart from the best point
                if (plain_step) break;
                z = alpha;
                t = 1.0;
                result.best_objective.push_back(f);
                continue;
            }
            prev = alpha;
            alpha = std::move(candidate);
            f = fc;
            result.best_objective.push_back(f);
            if (plain_step && moved < options.tolerance) break;
            const double t_next = 0.5 * (1.0 + std::sqrt(1.0 + 4.0 * t * t));
            for (std::size_t a = 0; a < k; ++a) z[a] = alpha[a] + ((t - 1.0) / t_next) * (alpha[a] - prev[a]);
            t = t_next;
        }

        // Polish: solve the equality-constrained problem on the support.
        std::vector<std::size_t> support;
        for (std::size_t a = 0; a < k; ++a)
            if (alpha[a] > 1e-9) support.push_back(a);
        const auto s = static_cast<Eigen::Index>(support.size());
        Eigen::MatrixXd kkt = Eigen::MatrixXd::Zero(s + 1, s + 1);
        Eigen::VectorXd rhs(s + 1);
        for (Eigen::Index i = 0; i < s; ++i) {
            for (Eigen::Index j = 0; j < s; ++j) kkt(i, j) = gram[support[i] * k + support[j]];
            kkt(i, s) = kkt(s, i) = 1.0;
            rhs(i) = lin[support[i]];
        }
        rhs(s) = 1.0;
        const Eigen::VectorXd sol = kkt.completeOrthogonalDecomposition().solve(rhs);
        if (sol.head(s).minCoeff() >= 0.0) {
            std::vector<double> polished(k, 0.0);
            for (Eigen::Index i = 0; i < s; ++i) polished[support[i]] = sol(i);
            const double fp = objective(polished);
            if (fp <= f) {
                alpha = std::move(polished);
                f = fp;
                result.best_objective.push_back(f);
            }
        }
    }

    // Clamp round-off and renormalize.
    double total = 0;
    for (auto& a : alpha) {
        a = std::max(a, 0.0);
        total += a;
    }
    for (auto& a : alpha) a /= total;
    result.weights.alpha = std::move(alpha);
    result.objective = lae_objective(y, neighbors, result.weights.alpha);
    return result;
}

SimplexWeights lae_solve(std::span<const double> y, std::span<const IndexVector> neighbors,
                         const LaeOptions& options) {
    return lae_solve_detailed(y, neighbors, options).weights;
}

IndexVector reconstruct(std::span<const IndexVector> neighbors, const SimplexWeights& weights) {
    if (neighbors.size() != weights.alpha.size()) {
        throw ShapeError("reconstruct: " + std::to_string(weights.alpha.size()) + " weights for " +
                         std::to_string(neighbors.size()) + " neighbors");
    }
    IndexVector out(neighbors.empty() ? 0 : neighbors[0].size(), 0.0);
    for (std::size_t j = 0; j < neighbors.size(); ++j) {
        if (neighbors[j].size() != out.size()) throw ShapeError("reconstruct: inconsistent dimensions");
        for (std::size_t i = 0; i < out.size(); ++i) out[i] += weights.alpha[j] * neighbors[j][i];
    }
    return out;
}

}  // namespace carn
