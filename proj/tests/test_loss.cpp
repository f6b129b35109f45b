#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "carn/loss.hpp"
#include "carn/ops.hpp"
#include "oracles.hpp"

using namespace carn;

namespace {

std::vector<IndexVector> curve_points(std::size_t n, std::size_t d, std::mt19937_64& rng) {
    // a smooth 1-d curve in R^d
    std::uniform_real_distribution<double> u(0.0, 3.0);
    std::vector<IndexVector> out;
    for (std::size_t i = 0; i < n; ++i) {
        const double s = u(rng);
        IndexVector p(d);
        for (std::size_t j = 0; j < d; ++j) p[j] = std::sin(s * (1.0 + 0.1 * static_cast<double>(j))) + 0.2 * s;
        out.push_back(p);
    }
    return out;
}

Var<double> mat(std::size_t r, std::size_t c, std::vector<double> v, bool param = false) {
    Tensor<double> t({r, c}, std::move(v));
    return param ? Var<double>::parameter(t) : Var<double>::constant(t);
}

}  // namespace

TEST(Loss, PreliminaryValue) {
    auto pred = mat(2, 2, {1, 2, 3, 4}, true);
    auto target = mat(2, 2, {1, 0, 4, 4});
    auto w1 = mat(1, 2, {3, 4}, true), w2 = mat(1, 1, {2}, true);
    const std::vector<Var<double>> ws{w1, w2};
    EXPECT_DOUBLE_EQ(loss_p(pred, target, std::span<const Var<double>>(ws), 0.5).value()[0], 0.75 + 0.5 * (5 + 2));
    EXPECT_DOUBLE_EQ(loss_p(pred, target, std::span<const Var<double>>(ws), 0.5, true).value()[0],
                     0.75 + 0.5 * (25 + 4));
    EXPECT_DOUBLE_EQ(loss_p(pred, target, std::span<const Var<double>>{}, 0.5).value()[0], 0.75);
}

TEST(Loss, TotalIsPreliminaryPlusWeightedManifoldTerm) {
    auto pred = mat(2, 2, {1, 2, 3, 4}, true);
    auto target = mat(2, 2, {1, 0, 4, 4});
    Tensor<double> yt({2, 2}, std::vector<double>{0, 2, 3, 6});
    LossConfig cfg;
    cfg.lambda_l = 2.0;
    cfg.lambda_p = 0.0;
    const auto t = loss_t(pred, target, yt, std::span<const Var<double>>{}, cfg);
    EXPECT_DOUBLE_EQ(t.preliminary, 0.75);
    EXPECT_DOUBLE_EQ(t.manifold, 0.75);
    EXPECT_DOUBLE_EQ(t.total.value()[0], 0.75 + 2.0 * 0.75);
    EXPECT_DOUBLE_EQ(loss_l(pred, yt).value()[0], 0.75);
}

TEST(Loss, ZeroManifoldWeightReducesToPreliminary) {
    std::mt19937_64 rng(31);
    std::normal_distribution<double> g(0.0, 1.0);
    std::vector<double> pv(12), tv(12), yv(12), wv(6);
    for (auto* v : {&pv, &tv, &yv, &wv})
        for (auto& x : *v) x = g(rng);
    auto p1 = mat(3, 4, pv, true), p2 = mat(3, 4, pv, true);
    auto w1 = mat(2, 3, wv, true), w2 = mat(2, 3, wv, true);
    const auto target = mat(3, 4, tv);
    LossConfig cfg;
    cfg.lambda_l = 0.0;
    const std::vector<Var<double>> ws1{w1}, ws2{w2};
    const auto lt = loss_t(p1, target, Tensor<double>({3, 4}, yv), std::span<const Var<double>>(ws1), cfg);
    const auto lp = loss_p(p2, target, std::span<const Var<double>>(ws2), cfg.lambda_p);
    EXPECT_EQ(lt.total.value()[0], lp.value()[0]);
    backward(lt.total);
    backward(lp);
    EXPECT_EQ(p1.grad(), p2.grad());
    EXPECT_EQ(w1.grad(), w2.grad());
}

TEST(Loss, TotalNeverBelowPreliminary) {
    std::mt19937_64 rng(32);
    std::normal_distribution<double> g(0.0, 1.0);
    LossConfig cfg;
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<double> pv(6), tv(6), yv(6);
        for (auto* v : {&pv, &tv, &yv})
            for (auto& x : *v) x = g(rng);
        const auto t = loss_t(mat(2, 3, pv), mat(2, 3, tv), Tensor<double>({2, 3}, yv),
                              std::span<const Var<double>>{}, cfg);
        EXPECT_GE(t.total.value()[0], t.preliminary);
        EXPECT_GE(t.manifold, 0.0);
    }
}

TEST(Reconstruction, MatchesBruteForceNeighborsAndExactSolve) {
    std::mt19937_64 rng(33);
    const auto pts = curve_points(30, 6, rng);
    const auto table = precompute_reconstructions(pts, 3);
    ASSERT_EQ(table.size(), 30u);
    EXPECT_EQ(table.k, 3u);
    for (std::size_t i = 0; i < pts.size(); ++i) {
        const auto nb = oracle::knn(pts, i, 3);
        EXPECT_EQ(table.neighbors[i], nb);
        std::vector<oracle::Vec> b;
        for (auto j : nb) b.push_back(pts[j]);
        const double exact = oracle::lae_exact_min(pts[i], b);
        EXPECT_NEAR(oracle::lae_objective(pts[i], b, table.alphas[i].alpha), exact, 1e-9);
        const auto y = reconstruct(b, table.alphas[i]);
        for (std::size_t j = 0; j < y.size(); ++j) EXPECT_DOUBLE_EQ(y[j], table.y_tilde[i][j]);
    }
}

TEST(Reconstruction, CloserThanNearestNeighborOnACurve) {
    std::mt19937_64 rng(34);
    const auto pts = curve_points(100, 30, rng);
    const auto table = precompute_reconstructions(pts, 5);
    double recon = 0, nn = 0;
    for (std::size_t i = 0; i < pts.size(); ++i) {
        double r = 0, d = 0;
        const auto& nearest = pts[oracle::knn(pts, i, 1)[0]];
        for (std::size_t j = 0; j < 30; ++j) {
            r += (pts[i][j] - table.y_tilde[i][j]) * (pts[i][j] - table.y_tilde[i][j]);
            d += (pts[i][j] - nearest[j]) * (pts[i][j] - nearest[j]);
        }
        recon += std::sqrt(r);
        nn += std::sqrt(d);
    }
    EXPECT_LT(recon, nn);
}

TEST(Reconstruction, ArchiveRoundTripAndBatch) {
    std::mt19937_64 rng(35);
    const auto table = precompute_reconstructions(curve_points(12, 4, rng), 5);
    const auto bytes = table.to_archive().encode();
    const auto back = ReconstructionTable::from_archive(Archive::decode(bytes));
    EXPECT_EQ(back.to_archive().encode(), bytes);
    EXPECT_EQ(back.y_tilde, table.y_tilde);
    EXPECT_EQ(back.neighbors, table.neighbors);

    const std::vector<std::size_t> ids{3, 0, 3};
    const auto b = table.batch<double>(ids);
    EXPECT_EQ(b.shape(), (Shape{3, 4}));
    EXPECT_EQ(b.at(0, 2), table.y_tilde[3][2]);
    EXPECT_EQ(b.at(1, 1), table.y_tilde[0][1]);

    EXPECT_THROW(ReconstructionTable::from_archive(Archive("carn-checkpoint")), FormatError);
}

TEST(Reconstruction, NeedsMoreSamplesThanNeighbors) {
    std::mt19937_64 rng(36);
    EXPECT_THROW(precompute_reconstructions(curve_points(5, 3, rng), 5), ShapeError);
    EXPECT_NO_THROW(precompute_reconstructions(curve_points(6, 3, rng), 5));
}
