#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "carn/amplifier_unit.hpp"

using namespace carn;

namespace {

Tensor<double> randn(const Shape& s, std::mt19937_64& rng, double sd = 1.0) {
    std::normal_distribution<double> n(0.0, sd);
    Tensor<double> t(s);
    for (auto& v : t.storage()) v = n(rng);
    return t;
}

}  // namespace

TEST(AmplifierUnit, FactorStaysStrictlyInsideZeroTwo) {
    std::mt19937_64 rng(11);
    auto p = init_amplifier_unit<double>(4, 8, rng);
    // 25 * 4 * 32 * 32 = 102400 elements
    const auto t = randn({25, 4, 32, 32}, rng, 2.0);
    const auto f = amplification_factor(t, p);
    ASSERT_EQ(f.shape(), t.shape());
    const auto [lo, hi] = std::minmax_element(f.storage().begin(), f.storage().end());
    EXPECT_GT(*lo, 0.0);
    EXPECT_LT(*hi, 2.0);
    // both suppression and stimulation occur
    EXPECT_LT(*lo, 1.0);
    EXPECT_GT(*hi, 1.0);
}

TEST(AmplifierUnit, ZeroGatePassesInputThroughExactly) {
    std::mt19937_64 rng(12);
    auto p = init_amplifier_unit<double>(3, 5, rng);
    p.gate.kernel.mutable_value().fill(0.0);
    p.gate.bias.mutable_value().fill(0.0);
    const auto t = randn({2, 3, 6, 6}, rng);
    const auto a = au_forward_traced(Var<double>::constant(t), p, Mode::train);
    EXPECT_EQ(a.selected.value(), t);
    for (double v : amplification_factor(t, p).storage()) EXPECT_EQ(v, 1.0);
}

TEST(AmplifierUnit, GainFormEqualsResidualForm) {
    std::mt19937_64 rng(13);
    auto p = init_amplifier_unit<double>(3, 4, rng);
    const auto t = randn({2, 3, 8, 8}, rng);
    const auto a = au_forward_traced(Var<double>::constant(t), p, Mode::train);
    const auto& fg = a.gate.value();
    for (std::size_t i = 0; i < t.size(); ++i) {
        const double residual = t[i] * fg[i] + t[i];
        EXPECT_NEAR(a.selected.value()[i], residual, 1e-12);
    }
}

TEST(AmplifierUnit, ShapesAndConcatOrder) {
    std::mt19937_64 rng(14);
    auto p = init_amplifier_unit<double>(3, 5, rng);
    EXPECT_EQ(p.in_channels(), 3u);
    EXPECT_EQ(p.linear_channels(), 5u);
    EXPECT_EQ(p.out_channels(), 8u);
    const auto t = randn({2, 3, 4, 6}, rng);
    const auto a = au_forward_traced(Var<double>::constant(t), p, Mode::train);
    EXPECT_EQ(a.linear.shape(), (Shape{2, 5, 4, 6}));
    EXPECT_EQ(a.nonlinear.shape(), (Shape{2, 5, 4, 6}));
    EXPECT_EQ(a.gate.shape(), (Shape{2, 3, 4, 6}));
    EXPECT_EQ(a.selected.shape(), (Shape{2, 3, 4, 6}));
    EXPECT_EQ(a.output.shape(), (Shape{2, 8, 4, 6}));
    // the nonlinear path comes first: its channels are relu outputs before bn_out,
    // so with identity bn_out parameters their batch mean is zero
    for (std::size_t c = 0; c < 8; ++c) {
        double s = 0;
        for (std::size_t b = 0; b < 2; ++b)
            for (std::size_t i = 0; i < 24; ++i) s += a.output.value()[(b * 8 + c) * 24 + i];
        EXPECT_NEAR(s, 0.0, 1e-9);
    }
}

TEST(AmplifierUnit, WorksOnOddAndTinySpatialSizes) {
    std::mt19937_64 rng(15);
    auto p = init_amplifier_unit<double>(2, 2, rng);
    EXPECT_EQ(au_forward(Var<double>::constant(randn({2, 2, 1, 1}, rng)), p, Mode::train).shape(),
              (Shape{2, 4, 1, 1}));
    EXPECT_EQ(au_forward(Var<double>::constant(randn({2, 2, 3, 5}, rng)), p, Mode::train).shape(),
              (Shape{2, 4, 3, 5}));
}

TEST(AmplifierUnit, RunningStatsOnlyWhenAsked) {
    std::mt19937_64 rng(16);
    auto p = init_amplifier_unit<double>(2, 3, rng);
    const auto t = Var<double>::constant(randn({3, 2, 4, 4}, rng, 2.0));
    au_forward(t, p, Mode::train, false);
    EXPECT_EQ(p.bn_mid.state.running_mean[0], 0.0);
    EXPECT_EQ(p.bn_out.state.running_var[0], 1.0);
    au_forward(t, p, Mode::train, true);
    EXPECT_NE(p.bn_mid.state.running_mean[0], 0.0);
    const auto before = p.bn_out.state.running_mean;
    au_forward(t, p, Mode::infer);
    EXPECT_EQ(p.bn_out.state.running_mean, before);
}

TEST(AmplifierUnit, Errors) {
    std::mt19937_64 rng(17);
    auto p = init_amplifier_unit<double>(3, 4, rng);
    EXPECT_THROW(au_forward(Var<double>::constant(randn({2, 2, 4, 4}, rng)), p, Mode::train), ShapeError);
    EXPECT_THROW(au_forward(Var<double>::constant(randn({2, 3, 4}, rng)), p, Mode::train), ShapeError);
    EXPECT_THROW(amplification_factor(randn({2, 4, 4, 4}, rng), p), ShapeError);
    EXPECT_THROW(init_amplifier_unit<double>(3, 4, rng, 2), ShapeError);
}
