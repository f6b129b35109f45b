#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <random>

#include "carn/lae.hpp"
#include "carn/tensor.hpp"
#include "oracles.hpp"

using namespace carn;

namespace {

std::vector<IndexVector> random_points(std::size_t n, std::size_t d, std::mt19937_64& rng) {
    std::normal_distribution<double> g(0.0, 1.0);
    std::vector<IndexVector> out(n, IndexVector(d));
    for (auto& p : out)
        for (auto& v : p) v = g(rng);
    return out;
}

void expect_on_simplex(const std::vector<double>& a, double tol) {
    double s = 0;
    for (double v : a) {
        EXPECT_GE(v, -tol);
        s += v;
    }
    EXPECT_NEAR(s, 1.0, tol);
}

}  // namespace

TEST(Knn, MatchesBruteForce) {
    std::mt19937_64 rng(21);
    for (std::size_t d : {2u, 30u}) {
        const auto pts = random_points(40, d, rng);
        for (std::size_t q = 0; q < pts.size(); q += 7) {
            const auto nb = knn_targets(pts, q, 5);
            EXPECT_EQ(nb.indices, oracle::knn(pts, q, 5));
            for (std::size_t j = 0; j < 5; ++j) EXPECT_EQ(nb.targets[j], pts[nb.indices[j]]);
        }
    }
}

TEST(Knn, TiesGoToLowerIndexAndQueryIsExcluded) {
    const std::vector<IndexVector> pts{{0, 0}, {1, 0}, {0, 0}, {-1, 0}, {0, 0}};
    const auto nb = knn_targets(pts, 2, 3);
    EXPECT_EQ(nb.indices, (std::vector<std::size_t>{0, 4, 1}));
}

TEST(Knn, Errors) {
    const std::vector<IndexVector> pts{{0, 0}, {1, 0}, {2, 0}};
    EXPECT_THROW(knn_targets(pts, 0, 3), ShapeError);
    EXPECT_THROW(knn_targets(pts, 0, 0), ShapeError);
    EXPECT_THROW(knn_targets(pts, 3, 1), ShapeError);
    const std::vector<IndexVector> ragged{{0, 0}, {1}, {2, 0}};
    EXPECT_THROW(knn_targets(ragged, 0, 2), ShapeError);
}

TEST(SimplexProjection, KnownCases) {
    EXPECT_EQ(project_simplex(std::vector<double>{0.25, 0.75}).alpha, (std::vector<double>{0.25, 0.75}));
    EXPECT_EQ(project_simplex(std::vector<double>{3.0, 0.0}).alpha, (std::vector<double>{1.0, 0.0}));
    const auto a = project_simplex(std::vector<double>{1.0, 1.0, 1.0}).alpha;
    for (double v : a) EXPECT_NEAR(v, 1.0 / 3.0, 1e-15);
    EXPECT_THROW(project_simplex(std::vector<double>{}), ShapeError);
}

TEST(SimplexProjection, SatisfiesVariationalInequality) {
    // p is the projection of v iff <v - p, q - p> <= 0 for every q on the simplex
    std::mt19937_64 rng(22);
    std::normal_distribution<double> g(0.0, 2.0);
    std::gamma_distribution<double> e(1.0, 1.0);
    for (int trial = 0; trial < 200; ++trial) {
        const std::size_t k = 2 + static_cast<std::size_t>(trial % 6);
        std::vector<double> v(k);
        for (auto& x : v) x = g(rng);
        const auto p = project_simplex(v).alpha;
        expect_on_simplex(p, 1e-12);
        for (int s = 0; s < 20; ++s) {
            std::vector<double> q(k);
            for (auto& x : q) x = e(rng);
            const double total = std::accumulate(q.begin(), q.end(), 0.0);
            double dot = 0;
            for (std::size_t i = 0; i < k; ++i) dot += (v[i] - p[i]) * (q[i] / total - p[i]);
            EXPECT_LE(dot, 1e-12);
        }
    }
}

TEST(Lae, MatchesExactAndGridSearch) {
    std::mt19937_64 rng(23);
    std::normal_distribution<double> g(0.0, 1.0);
    for (int trial = 0; trial < 40; ++trial) {
        const std::size_t k = trial % 2 == 0 ? 2 : 3;
        const std::size_t d = (trial / 2) % 2 == 0 ? 2 : 30;
        const auto b = random_points(k, d, rng);
        IndexVector y(d);
        for (auto& v : y) v = g(rng);
        const auto r = lae_solve_detailed(y, b);
        expect_on_simplex(r.weights.alpha, 1e-9);
        const double exact = oracle::lae_exact_min(y, b);
        EXPECT_NEAR(r.objective, exact, 1e-9);
        EXPECT_NEAR(r.objective, lae_objective(y, b, r.weights.alpha), 1e-12);
        EXPECT_NEAR(r.objective, oracle::lae_objective(y, b, r.weights.alpha), 1e-12);
        EXPECT_LE(r.objective, oracle::lae_grid_min(y, b, 1e-2) + 1e-12);
    }
}

TEST(Lae, BestObjectiveNeverIncreases) {
    std::mt19937_64 rng(24);
    const auto b = random_points(5, 30, rng);
    const auto y = random_points(1, 30, rng)[0];
    const auto r = lae_solve_detailed(y, b);
    ASSERT_FALSE(r.best_objective.empty());
    for (std::size_t i = 1; i < r.best_objective.size(); ++i) EXPECT_LE(r.best_objective[i], r.best_objective[i - 1]);
    EXPECT_NEAR(r.objective, oracle::lae_exact_min(y, b), 1e-9);
}

TEST(Lae, BarycentricPointsAreRecoveredExactly) {
    const std::vector<IndexVector> tri{{0, 0}, {4, 0}, {0, 2}};
    const std::vector<double> w{0.2, 0.3, 0.5};
    const auto y = reconstruct(tri, {w});
    const auto a = lae_solve(y, tri).alpha;
    for (std::size_t j = 0; j < 3; ++j) EXPECT_NEAR(a[j], w[j], 1e-8);

    // a vertex
    const auto v = lae_solve(IndexVector{4, 0}, tri).alpha;
    EXPECT_NEAR(v[1], 1.0, 1e-8);

    // beyond an edge midpoint: projection onto that edge
    const auto m = lae_solve(IndexVector{3, 2}, tri).alpha;
    EXPECT_NEAR(m[0], 0.0, 1e-8);
    EXPECT_NEAR(m[1], 0.6, 1e-8);
    EXPECT_NEAR(m[2], 0.4, 1e-8);

    // segment: clamped scalar projection
    const std::vector<IndexVector> seg{{0, 0, 0}, {2, 0, 0}};
    EXPECT_NEAR(lae_solve(IndexVector{0.5, 1, -1}, seg).alpha[1], 0.25, 1e-8);
    EXPECT_NEAR(lae_solve(IndexVector{5, 1, 1}, seg).alpha[1], 1.0, 1e-8);
}

TEST(Lae, DuplicateNeighborsAndSingleNeighbor) {
    const std::vector<IndexVector> dup{{1, 1}, {1, 1}, {3, 1}};
    const auto r = lae_solve_detailed(IndexVector{2, 5}, dup);
    expect_on_simplex(r.weights.alpha, 1e-9);
    EXPECT_NEAR(reconstruct(dup, r.weights)[0], 2.0, 1e-8);
    const std::vector<IndexVector> one{{1, 2}};
    EXPECT_EQ(lae_solve(IndexVector{7, 7}, one).alpha, (std::vector<double>{1.0}));
}

TEST(Lae, Errors) {
    const std::vector<IndexVector> none;
    EXPECT_THROW(lae_solve(IndexVector{1, 2}, none), ShapeError);
    const std::vector<IndexVector> b{{1, 2, 3}};
    EXPECT_THROW(lae_solve(IndexVector{1, 2}, b), ShapeError);
    EXPECT_THROW(reconstruct(b, SimplexWeights{{0.5, 0.5}}), ShapeError);
}
