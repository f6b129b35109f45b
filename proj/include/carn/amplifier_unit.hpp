#pragma once

#include <cstddef>
#include <random>

#include "carn/layers.hpp"

namespace carn {

/// Learnable state of one amplifier unit.
///
/// The unit maps t [B,c_in,H,W] to [B,c_in+c_l,H,W]:
///
///     f_l = linear * t                       (3x3 conv, c_in -> c_l)
///     f_n = relu(bn_mid(f_l))
///     f_g = tanh(gate * f_l)                 (gate conv, c_l -> c_in)
///     f_s = t * (f_g + 1)                    elementwise gain in (0, 2)
///     out = bn_out(concat(f_n, f_s))
template <typename T>
struct AUParams {
    ConvParams<T> linear;
    ConvParams<T> gate;
    BatchNormParams<T> bn_mid;
    BatchNormParams<T> bn_out;

    std::size_t in_channels() const { return linear.kernel.value().dim(1); }
    std::size_t linear_channels() const { return linear.kernel.value().dim(0); }
    std::size_t out_channels() const { return in_channels() + linear_channels(); }
};

/// He-style init for the linear conv, Xavier-style for the tanh gate.
/// `gate_kernel` must be odd (default 3).
template <typename T>
AUParams<T> init_amplifier_unit(std::size_t in_channels, std::size_t linear_channels,
                                std::mt19937_64& rng, std::size_t gate_kernel = 3);

/// Intermediate maps of one AU evaluation.
template <typename T>
struct AUActivations {
    Var<T> linear;    // f_l
    Var<T> nonlinear; // f_n
    Var<T> gate;      // f_g
    Var<T> selected;  // f_s
    Var<T> output;    // f_out
};

template <typename T>
AUActivations<T> au_forward_traced(const Var<T>& t, AUParams<T>& params, Mode mode,
                                   bool update_running_stats = true);

template <typename T>
Var<T> au_forward(const Var<T>& t, AUParams<T>& params, Mode mode,
                  bool update_running_stats = true) {
    return au_forward_traced(t, params, mode, update_running_stats).output;
}

/// f_g(t) + 1. Depends only on the conv weights, so no batch-norm state is
/// read or written.
template <typename T>
Tensor<T> amplification_factor(const Tensor<T>& t, const AUParams<T>& params);

}  // namespace carn
