#pragma once

#include <cstddef>
#include <string_view>

#include "carn/autodiff.hpp"
#include "carn/tensor.hpp"

namespace carn {

enum class Padding { same, valid };
enum class Mode { train, infer };
enum class Activation { relu, tanh };
enum class Elementwise { mul, add };

/// Running per-channel moments of one batch-norm layer.
template <typename T>
struct BatchNormState {
    Tensor<T> running_mean;
    Tensor<T> running_var;

    static BatchNormState identity(std::size_t channels) {
        return {Tensor<T>(Shape{channels}, T(0)), Tensor<T>(Shape{channels}, T(1))};
    }
};

inline constexpr double kBatchNormEpsilon = 1e-5;
inline constexpr double kBatchNormMomentum = 0.9;

/// Cross-correlation of input [B,C,H,W] with kernel [F,C,kh,kw] plus bias [F].
/// "same" padding uses pad = (k-1)/2 and requires odd kernel sizes.
template <typename T>
Var<T> conv2d(const Var<T>& input, const Var<T>& kernel, const Var<T>& bias, std::size_t stride,
              Padding padding);

template <typename T>
Var<T> maxpool2(const Var<T>& input);

/// Per-channel batch normalization of [B,C,H,W] or [B,C]. In train mode the
/// batch statistics are used and, when `state` is non-null, folded into the
/// running moments (new = momentum*old + (1-momentum)*batch, running variance
/// unbiased). Infer mode reads the running moments from `state`.
template <typename T>
Var<T> batchnorm(const Var<T>& input, const Var<T>& gamma, const Var<T>& beta, Mode mode,
                 BatchNormState<T>* state);

template <typename T>
Var<T> activation(const Var<T>& input, Activation kind);

template <typename T>
Var<T> relu(const Var<T>& input) {
    return activation(input, Activation::relu);
}

template <typename T>
Var<T> tanh(const Var<T>& input) {
    return activation(input, Activation::tanh);
}

/// input [B,n], weight [m,n], bias [m] -> [B,m]
template <typename T>
Var<T> dense(const Var<T>& input, const Var<T>& weight, const Var<T>& bias);

/// [B,C,H,W] -> [B,C]
template <typename T>
Var<T> global_avg_pool(const Var<T>& input);

/// Channel-axis concatenation, `a` first.
template <typename T>
Var<T> concat_channels(const Var<T>& a, const Var<T>& b);

template <typename T>
Var<T> elementwise(const Var<T>& a, const Var<T>& b, Elementwise kind);

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
    return elementwise(a, b, Elementwise::mul);
}

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
    return elementwise(a, b, Elementwise::add);
}

/// x + c elementwise.
template <typename T>
Var<T> add_scalar(const Var<T>& x, T c);

/// c * x
template <typename T>
Var<T> scale(const Var<T>& x, T c);

/// Scalar sum of all elements.
template <typename T>
Var<T> sum(const Var<T>& x);

/// Scalar mean over all elements of |a - b|. The subgradient of |.| at 0 is 0.
template <typename T>
Var<T> mean_abs_diff(const Var<T>& a, const Var<T>& b);

/// Scalar Euclidean norm of the flattened tensor (squared=false), or its
/// square. The subgradient of the non-squared norm at 0 is 0.
template <typename T>
Var<T> l2_norm(const Var<T>& x, bool squared = false);

/// Output size of conv2d along one axis; throws on invalid geometry.
std::size_t conv_output_size(std::size_t in, std::size_t k, std::size_t stride, Padding padding);
std::size_t same_padding(std::size_t k);

}  // namespace carn
