#include "carn/amplifier_unit.hpp"

namespace carn {

namespace {

template <typename T>
void check_input(const Tensor<T>& t, const AUParams<T>& p) {
    require_rank(t, 4, "amplifier unit input");
    if (t.dim(1) != p.in_channels()) {
        throw ShapeError("amplifier unit: input has " + std::to_string(t.dim(1)) +
                         " channels, parameters expect " + std::to_string(p.in_channels()));
    }
}

template <typename T>
Var<T> gate_map(const Var<T>& f_l, const AUParams<T>& p) {
    return tanh(conv2d(f_l, p.gate.kernel, p.gate.bias, 1, Padding::same));
}

}  // namespace

template <typename T>
AUParams<T> init_amplifier_unit(std::size_t in_channels, std::size_t linear_channels,
                                std::mt19937_64& rng, std::size_t gate_kernel) {
    same_padding(gate_kernel);
    AUParams<T> p;
    p.linear = init_conv<T>(linear_channels, in_channels, 3, 3, InitScheme::he, rng);
    p.gate = init_conv<T>(in_channels, linear_channels, gate_kernel, gate_kernel,
                          InitScheme::xavier, rng);
    p.bn_mid = init_batchnorm<T>(linear_channels);
    p.bn_out = init_batchnorm<T>(in_channels + linear_channels);
    return p;
}

template <typename T>
AUActivations<T> au_forward_traced(const Var<T>& t, AUParams<T>& p, Mode mode,
                                   bool update_running_stats) {
    check_input(t.value(), p);
    AUActivations<T> a;
    a.linear = conv2d(t, p.linear.kernel, p.linear.bias, 1, Padding::same);
    a.nonlinear = relu(apply(p.bn_mid, a.linear, mode, update_running_stats));
    a.gate = gate_map(a.linear, p);
    a.selected = mul(t, add_scalar(a.gate, T(1)));
    a.output = apply(p.bn_out, concat_channels(a.nonlinear, a.selected), mode, update_running_stats);
    return a;
}

template <typename T>
Tensor<T> amplification_factor(const Tensor<T>& t, const AUParams<T>& p) {
    check_input(t, p);
    const auto input = Var<T>::constant(t);
    const auto f_l = conv2d(input, p.linear.kernel, p.linear.bias, 1, Padding::same);
    Tensor<T> factor = gate_map(f_l, p).value();
    for (auto& v : factor.storage()) v += T(1);
    return factor;
}

template AUParams<float> init_amplifier_unit<float>(std::size_t, std::size_t, std::mt19937_64&,
                                                    std::size_t);
template AUParams<double> init_amplifier_unit<double>(std::size_t, std::size_t, std::mt19937_64&,
                                                      std::size_t);
template AUActivations<float> au_forward_traced<float>(const Var<float>&, AUParams<float>&, Mode,
                                                       bool);
template AUActivations<double> au_forward_traced<double>(const Var<double>&, AUParams<double>&,
                                                         Mode, bool);
template Tensor<float> amplification_factor<float>(const Tensor<float>&, const AUParams<float>&);
template Tensor<double> amplification_factor<double>(const Tensor<double>&,
                                                     const AUParams<double>&);

}  // namespace carn
