#pragma once

#include <cstddef>
#include <random>

#include "carn/ops.hpp"

namespace carn {

template <typename T>
struct ConvParams {
    Var<T> kernel;  // [F,C,kh,kw]
    Var<T> bias;    // [F]
};

template <typename T>
struct BatchNormParams {
    Var<T> gamma;
    Var<T> beta;
    BatchNormState<T> state;

    std::size_t channels() const { return gamma.value().size(); }
};

template <typename T>
struct DenseParams {
    Var<T> weight;  // [m,n]
    Var<T> bias;    // [m]
};

enum class InitScheme { he, xavier, lecun };

/// Zero-mean normal weights scaled by fan-in (and fan-out for xavier);
/// zero bias.
template <typename T>
ConvParams<T> init_conv(std::size_t out_channels, std::size_t in_channels, std::size_t kh,
                        std::size_t kw, InitScheme scheme, std::mt19937_64& rng);

template <typename T>
DenseParams<T> init_dense(std::size_t out_features, std::size_t in_features, InitScheme scheme,
                          std::mt19937_64& rng);

/// gamma 1, beta 0, running mean 0, running variance 1.
template <typename T>
BatchNormParams<T> init_batchnorm(std::size_t channels);

/// Runs batch norm with these parameters. In train mode the running moments
/// are updated only when `update_running_stats` is set.
template <typename T>
Var<T> apply(BatchNormParams<T>& bn, const Var<T>& x, Mode mode, bool update_running_stats) {
    BatchNormState<T>* state = (mode == Mode::infer || update_running_stats) ? &bn.state : nullptr;
    return batchnorm(x, bn.gamma, bn.beta, mode, state);
}

}  // namespace carn
