#include "carn/layers.hpp"

#include <cmath>

namespace carn {

namespace {

template <typename T>
Tensor<T> normal_tensor(Shape shape, double stddev, std::mt19937_64& rng) {
    Tensor<T> t(std::move(shape));
    std::normal_distribution<double> dist(0.0, stddev);
    for (auto& v : t.storage()) v = static_cast<T>(dist(rng));
    return t;
}

double init_stddev(InitScheme scheme, std::size_t fan_in, std::size_t fan_out) {
    switch (scheme) {
        case InitScheme::he:
            return std::sqrt(2.0 / static_cast<double>(fan_in));
        case InitScheme::xavier:
            return std::sqrt(2.0 / static_cast<double>(fan_in + fan_out));
        case InitScheme::lecun:
            break;
    }
    return std::sqrt(1.0 / static_cast<double>(fan_in));
}

}  // namespace

template <typename T>
ConvParams<T> init_conv(std::size_t out_channels, std::size_t in_channels, std::size_t kh,
                        std::size_t kw, InitScheme scheme, std::mt19937_64& rng) {
    const double sd = init_stddev(scheme, in_channels * kh * kw, out_channels * kh * kw);
    return {Var<T>::parameter(normal_tensor<T>(Shape{out_channels, in_channels, kh, kw}, sd, rng)),
            Var<T>::parameter(Tensor<T>(Shape{out_channels}, T(0)))};
}

template <typename T>
DenseParams<T> init_dense(std::size_t out_features, std::size_t in_features, InitScheme scheme,
                          std::mt19937_64& rng) {
    const double sd = init_stddev(scheme, in_features, out_features);
    return {Var<T>::parameter(normal_tensor<T>(Shape{out_features, in_features}, sd, rng)),
            Var<T>::parameter(Tensor<T>(Shape{out_features}, T(0)))};
}

template <typename T>
BatchNormParams<T> init_batchnorm(std::size_t channels) {
    return {Var<T>::parameter(Tensor<T>(Shape{channels}, T(1))),
            Var<T>::parameter(Tensor<T>(Shape{channels}, T(0))),
            BatchNormState<T>::identity(channels)};
}

template ConvParams<float> init_conv<float>(std::size_t, std::size_t, std::size_t, std::size_t,
                                            InitScheme, std::mt19937_64&);
template ConvParams<double> init_conv<double>(std::size_t, std::size_t, std::size_t, std::size_t,
                                              InitScheme, std::mt19937_64&);
template DenseParams<float> init_dense<float>(std::size_t, std::size_t, InitScheme, std::mt19937_64&);
template DenseParams<double> init_dense<double>(std::size_t, std::size_t, InitScheme,
                                                std::mt19937_64&);
template BatchNormParams<float> init_batchnorm<float>(std::size_t);
template BatchNormParams<double> init_batchnorm<double>(std::size_t);

}  // namespace carn
