#pragma once

#include <cstddef>
#include <span>

namespace carn::kernels {

/// Geometry of a 2-D cross-correlation over NCHW data with symmetric zero
/// padding.
struct ConvGeometry {
    std::size_t batch = 0;
    std::size_t in_channels = 0;
    std::size_t in_h = 0, in_w = 0;
    std::size_t out_channels = 0;
    std::size_t kernel_h = 0, kernel_w = 0;
    std::size_t stride = 1;
    std::size_t pad_h = 0, pad_w = 0;

    std::size_t out_h() const { return (in_h + 2 * pad_h - kernel_h) / stride + 1; }
    std::size_t out_w() const { return (in_w + 2 * pad_w - kernel_w) / stride + 1; }
};

// OpenMP-parallel kernels: im2col plus a matrix product per sample, with
// samples spread over threads. Every reduction runs in a fixed order, so
// results do not depend on the thread count.

template <typename T>
void conv2d_forward(const ConvGeometry& g, std::span<const T> input, std::span<const T> kernel,
                    std::span<const T> bias, std::span<T> output);

/// grad_input += conv2d^T(grad_output)
template <typename T>
void conv2d_backward_input(const ConvGeometry& g, std::span<const T> grad_output,
                           std::span<const T> kernel, std::span<T> grad_input);

/// grad_kernel += ..., grad_bias += ... (grad_bias may be empty)
template <typename T>
void conv2d_backward_params(const ConvGeometry& g, std::span<const T> input,
                            std::span<const T> grad_output, std::span<T> grad_kernel,
                            std::span<T> grad_bias);

/// 2x2 stride-2 max pool; `argmax` receives the flat input index of each
/// window's first maximal element.
template <typename T>
void maxpool2_forward(std::size_t planes, std::size_t in_h, std::size_t in_w,
                      std::span<const T> input, std::span<T> output,
                      std::span<std::size_t> argmax);

namespace serial {

// Direct transcriptions of the definitions, one output element at a time.
// Kept as the reference the parallel kernels are tested and benchmarked
// against.

template <typename T>
void conv2d_forward(const ConvGeometry& g, std::span<const T> input, std::span<const T> kernel,
                    std::span<const T> bias, std::span<T> output);

template <typename T>
void conv2d_backward_input(const ConvGeometry& g, std::span<const T> grad_output,
                           std::span<const T> kernel, std::span<T> grad_input);

template <typename T>
void conv2d_backward_params(const ConvGeometry& g, std::span<const T> input,
                            std::span<const T> grad_output, std::span<T> grad_kernel,
                            std::span<T> grad_bias);

template <typename T>
void maxpool2_forward(std::size_t planes, std::size_t in_h, std::size_t in_w,
                      std::span<const T> input, std::span<T> output,
                      std::span<std::size_t> argmax);

}  // namespace serial

/// Number of OpenMP threads kernels will use (1 without OpenMP).
int max_threads();
void set_num_threads(int n);

}  // namespace carn::kernels
