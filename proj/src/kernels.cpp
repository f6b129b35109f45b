#include "carn/kernels.hpp"

#include <algorithm>
#include <cstdint>
#include <vector>

#define EIGEN_DONT_PARALLELIZE
#include <Eigen/Core>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace carn::kernels {

namespace {

// Output positions o in [lo, hi) map to input index o*stride - pad + k
// inside [0, n).
struct ValidRange {
    std::size_t lo, hi;
};

ValidRange valid_outputs(std::size_t n, std::size_t out_n, std::size_t stride, std::size_t pad,
                         std::size_t k) {
    // o*stride + k >= pad  and  o*stride + k - pad < n
    std::size_t lo = 0;
    if (k < pad) lo = (pad - k + stride - 1) / stride;
    std::size_t hi = 0;
    if (n + pad > k) hi = std::min(out_n, (n + pad - k - 1) / stride + 1);
    if (hi < lo) hi = lo;
    return {lo, hi};
}

}  // namespace

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatrixMap = Eigen::Map<RowMatrix<T>>;
template <typename T>
using ConstMatrixMap = Eigen::Map<const RowMatrix<T>>;

namespace {

bool is_pointwise(const ConvGeometry& g) {
    return g.kernel_h == 1 && g.kernel_w == 1 && g.stride == 1 && g.pad_h == 0 && g.pad_w == 0;
}

// cols[(c*kh + ki)*kw + kj][oh*ow_n + ow] = padded input at the tap.
template <typename T>
void im2col(const ConvGeometry& g, const T* in, T* cols) {
    const std::size_t oh_n = g.out_h(), ow_n = g.out_w(), plane = oh_n * ow_n;
    for (std::size_t c = 0; c < g.in_channels; ++c) {
        const T* src = in + c * g.in_h * g.in_w;
        for (std::size_t ki = 0; ki < g.kernel_h; ++ki) {
            const auto rows = valid_outputs(g.in_h, oh_n, g.stride, g.pad_h, ki);
            for (std::size_t kj = 0; kj < g.kernel_w; ++kj) {
                const auto cs = valid_outputs(g.in_w, ow_n, g.stride, g.pad_w, kj);
                T* dst = cols + ((c * g.kernel_h + ki) * g.kernel_w + kj) * plane;
                std::fill(dst, dst + plane, T(0));
                for (std::size_t oh = rows.lo; oh < rows.hi; ++oh) {
                    const T* in_row = src + (oh * g.stride + ki - g.pad_h) * g.in_w;
                    T* out_row = dst + oh * ow_n;
                    if (g.stride == 1) {
                        std::copy(in_row + cs.lo + kj - g.pad_w, in_row + cs.hi + kj - g.pad_w,
                                  out_row + cs.lo);
                    } else {
                        for (std::size_t ow = cs.lo; ow < cs.hi; ++ow) {
                            out_row[ow] = in_row[ow * g.stride + kj - g.pad_w];
                        }
                    }
                }
            }
        }
    }
}

// Adjoint of im2col: scatter-add columns back onto the input plane.
template <typename T>
void col2im_add(const ConvGeometry& g, const T* cols, T* in) {
    const std::size_t oh_n = g.out_h(), ow_n = g.out_w(), plane = oh_n * ow_n;
    for (std::size_t c = 0; c < g.in_channels; ++c) {
        T* dst = in + c * g.in_h * g.in_w;
        for (std::size_t ki = 0; ki < g.kernel_h; ++ki) {
            const auto rows = valid_outputs(g.in_h, oh_n, g.stride, g.pad_h, ki);
            for (std::size_t kj = 0; kj < g.kernel_w; ++kj) {
                const auto cs = valid_outputs(g.in_w, ow_n, g.stride, g.pad_w, kj);
                const T* src = cols + ((c * g.kernel_h + ki) * g.kernel_w + kj) * plane;
                for (std::size_t oh = rows.lo; oh < rows.hi; ++oh) {
                    T* in_row = dst + (oh * g.stride + ki - g.pad_h) * g.in_w;
                    const T* col_row = src + oh * ow_n;
                    if (g.stride == 1) {
                        T* d = in_row + kj - g.pad_w;
#pragma omp simd
                        for (std::size_t ow = cs.lo; ow < cs.hi; ++ow) d[ow] += col_row[ow];
                    } else {
                        for (std::size_t ow = cs.lo; ow < cs.hi; ++ow) {
                            in_row[ow * g.stride + kj - g.pad_w] += col_row[ow];
                        }
                    }
                }
            }
        }
    }
}

}  // namespace

template <typename T>
void conv2d_forward(const ConvGeometry& g, std::span<const T> input, std::span<const T> kernel,
                    std::span<const T> bias, std::span<T> output) {
    const std::size_t plane = g.out_h() * g.out_w();
    const std::size_t taps = g.in_channels * g.kernel_h * g.kernel_w;
    const std::size_t in_size = g.in_channels * g.in_h * g.in_w;
    const bool pointwise = is_pointwise(g);
    const ConstMatrixMap<T> w(kernel.data(), static_cast<Eigen::Index>(g.out_channels),
                              static_cast<Eigen::Index>(taps));
    const auto batch = static_cast<std::int64_t>(g.batch);

#pragma omp parallel
    {
        std::vector<T> cols(pointwise ? 0 : taps * plane);
#pragma omp for schedule(static)
        for (std::int64_t bi = 0; bi < batch; ++bi) {
            const auto b = static_cast<std::size_t>(bi);
            const T* x = input.data() + b * in_size;
            if (!pointwise) im2col(g, x, cols.data());
            const ConstMatrixMap<T> xc(pointwise ? x : cols.data(), static_cast<Eigen::Index>(taps),
                                       static_cast<Eigen::Index>(plane));
            MatrixMap<T> out(output.data() + b * g.out_channels * plane,
                             static_cast<Eigen::Index>(g.out_channels), static_cast<Eigen::Index>(plane));
            out.noalias() = w * xc;
            if (!bias.empty()) {
                for (std::size_t f = 0; f < g.out_channels; ++f) {
                    out.row(static_cast<Eigen::Index>(f)).array() += bias[f];
                }
            }
        }
    }
}

template <typename T>
void conv2d_backward_input(const ConvGeometry& g, std::span<const T> grad_output,
                           std::span<const T> kernel, std::span<T> grad_input) {
    const std::size_t plane = g.out_h() * g.out_w();
    const std::size_t taps = g.in_channels * g.kernel_h * g.kernel_w;
    const std::size_t in_size = g.in_channels * g.in_h * g.in_w;
    const bool pointwise = is_pointwise(g);
    const ConstMatrixMap<T> w(kernel.data(), static_cast<Eigen::Index>(g.out_channels),
                              static_cast<Eigen::Index>(taps));
    const auto batch = static_cast<std::int64_t>(g.batch);

#pragma omp parallel
    {
        std::vector<T> cols(pointwise ? 0 : taps * plane);
#pragma omp for schedule(static)
        for (std::int64_t bi = 0; bi < batch; ++bi) {
            const auto b = static_cast<std::size_t>(bi);
            const ConstMatrixMap<T> gy(grad_output.data() + b * g.out_channels * plane,
                                       static_cast<Eigen::Index>(g.out_channels),
                                       static_cast<Eigen::Index>(plane));
            T* gx = grad_input.data() + b * in_size;
            if (pointwise) {
                MatrixMap<T> gxm(gx, static_cast<Eigen::Index>(taps), static_cast<Eigen::Index>(plane));
                gxm.noalias() += w.transpose() * gy;
            } else {
                MatrixMap<T> gc(cols.data(), static_cast<Eigen::Index>(taps), static_cast<Eigen::Index>(plane));
                gc.noalias() = w.transpose() * gy;
                col2im_add(g, cols.data(), gx);
            }
        }
    }
}

template <typename T>
void conv2d_backward_params(const ConvGeometry& g, std::span<const T> input,
                            std::span<const T> grad_output, std::span<T> grad_kernel,
                            std::span<T> grad_bias) {
    const std::size_t plane = g.out_h() * g.out_w();
    const std::size_t taps = g.in_channels * g.kernel_h * g.kernel_w;
    const std::size_t in_size = g.in_channels * g.in_h * g.in_w;
    const std::size_t wsize = g.out_channels * taps;
    const bool pointwise = is_pointwise(g);
    const auto batch = static_cast<std::int64_t>(g.batch);

    // One partial per sample, summed in sample order afterwards so the result
    // does not depend on how samples were spread over threads.
    std::vector<T> partial(g.batch * wsize);
#pragma omp parallel
    {
        std::vector<T> cols(pointwise ? 0 : taps * plane);
#pragma omp for schedule(static)
        for (std::int64_t bi = 0; bi < batch; ++bi) {
            const auto b = static_cast<std::size_t>(bi);
            const T* x = input.data() + b * in_size;
            if (!pointwise) im2col(g, x, cols.data());
            const ConstMatrixMap<T> xc(pointwise ? x : cols.data(), static_cast<Eigen::Index>(taps),
                                       static_cast<Eigen::Index>(plane));
            const ConstMatrixMap<T> gy(grad_output.data() + b * g.out_channels * plane,
                                       static_cast<Eigen::Index>(g.out_channels),
                                       static_cast<Eigen::Index>(plane));
            MatrixMap<T> pk(partial.data() + b * wsize, static_cast<Eigen::Index>(g.out_channels),
                            static_cast<Eigen::Index>(taps));
            pk.noalias() = gy * xc.transpose();
        }
    }
    for (std::size_t b = 0; b < g.batch; ++b) {
        const T* pk = partial.data() + b * wsize;
#pragma omp simd
        for (std::size_t i = 0; i < wsize; ++i) grad_kernel[i] += pk[i];
    }

    if (grad_bias.empty()) return;
    const auto channels = static_cast<std::int64_t>(g.out_channels);
#pragma omp parallel for schedule(static)
    for (std::int64_t fi = 0; fi < channels; ++fi) {
        const auto f = static_cast<std::size_t>(fi);
        T acc = 0;
        for (std::size_t b = 0; b < g.batch; ++b) {
            const T* gout = grad_output.data() + (b * g.out_channels + f) * plane;
            for (std::size_t i = 0; i < plane; ++i) acc += gout[i];
        }
        grad_bias[f] += acc;
    }
}

template <typename T>
void maxpool2_forward(std::size_t planes, std::size_t in_h, std::size_t in_w,
                      std::span<const T> input, std::span<T> output,
                      std::span<std::size_t> argmax) {
    const std::size_t oh_n = in_h / 2, ow_n = in_w / 2;
    const auto jobs = static_cast<std::int64_t>(planes);
#pragma omp parallel for schedule(static)
    for (std::int64_t pi = 0; pi < jobs; ++pi) {
        const auto p = static_cast<std::size_t>(pi);
        const std::size_t in_base = p * in_h * in_w;
        const std::size_t out_base = p * oh_n * ow_n;
        for (std::size_t oh = 0; oh < oh_n; ++oh) {
            for (std::size_t ow = 0; ow < ow_n; ++ow) {
                const std::size_t r0 = in_base + 2 * oh * in_w + 2 * ow;
                const std::size_t cand[4] = {r0, r0 + 1, r0 + in_w, r0 + in_w + 1};
                std::size_t best = cand[0];
                for (int q = 1; q < 4; ++q) {
                    if (input[cand[q]] > input[best]) best = cand[q];
                }
                output[out_base + oh * ow_n + ow] = input[best];
                argmax[out_base + oh * ow_n + ow] = best;
            }
        }
    }
}

namespace serial {

template <typename T>
void conv2d_forward(const ConvGeometry& g, std::span<const T> input, std::span<const T> kernel,
                    std::span<const T> bias, std::span<T> output) {
    const std::size_t oh_n = g.out_h(), ow_n = g.out_w();
    for (std::size_t b = 0; b < g.batch; ++b)
        for (std::size_t f = 0; f < g.out_channels; ++f)
            for (std::size_t oh = 0; oh < oh_n; ++oh)
                for (std::size_t ow = 0; ow < ow_n; ++ow) {
                    T acc = bias.empty() ? T(0) : bias[f];
                    for (std::size_t c = 0; c < g.in_channels; ++c)
                        for (std::size_t ki = 0; ki < g.kernel_h; ++ki)
                            for (std::size_t kj = 0; kj < g.kernel_w; ++kj) {
                                const auto ih = static_cast<std::ptrdiff_t>(oh * g.stride + ki) -
                                                static_cast<std::ptrdiff_t>(g.pad_h);
                                const auto iw = static_cast<std::ptrdiff_t>(ow * g.stride + kj) -
                                                static_cast<std::ptrdiff_t>(g.pad_w);
                                if (ih < 0 || iw < 0 || ih >= static_cast<std::ptrdiff_t>(g.in_h) ||
                                    iw >= static_cast<std::ptrdiff_t>(g.in_w))
                                    continue;
                                acc += kernel[((f * g.in_channels + c) * g.kernel_h + ki) *
                                                  g.kernel_w +
                                              kj] *
                                       input[((b * g.in_channels + c) * g.in_h +
                                              static_cast<std::size_t>(ih)) *
                                                 g.in_w +
                                             static_cast<std::size_t>(iw)];
                            }
                    output[((b * g.out_channels + f) * oh_n + oh) * ow_n + ow] = acc;
                }
}

template <typename T>
void conv2d_backward_input(const ConvGeometry& g, std::span<const T> grad_output,
                           std::span<const T> kernel, std::span<T> grad_input) {
    const std::size_t oh_n = g.out_h(), ow_n = g.out_w();
    for (std::size_t b = 0; b < g.batch; ++b)
        for (std::size_t f = 0; f < g.out_channels; ++f)
            for (std::size_t oh = 0; oh < oh_n; ++oh)
                for (std::size_t ow = 0; ow < ow_n; ++ow) {
                    const T go = grad_output[((b * g.out_channels + f) * oh_n + oh) * ow_n + ow];
                    for (std::size_t c = 0; c < g.in_channels; ++c)
                        for (std::size_t ki = 0; ki < g.kernel_h; ++ki)
                            for (std::size_t kj = 0; kj < g.kernel_w; ++kj) {
                                const auto ih = static_cast<std::ptrdiff_t>(oh * g.stride + ki) -
                                                static_cast<std::ptrdiff_t>(g.pad_h);
                                const auto iw = static_cast<std::ptrdiff_t>(ow * g.stride + kj) -
                                                static_cast<std::ptrdiff_t>(g.pad_w);
                                if (ih < 0 || iw < 0 || ih >= static_cast<std::ptrdiff_t>(g.in_h) ||
                                    iw >= static_cast<std::ptrdiff_t>(g.in_w))
                                    continue;
                                grad_input[((b * g.in_channels + c) * g.in_h +
                                            static_cast<std::size_t>(ih)) *
                                               g.in_w +
                                           static_cast<std::size_t>(iw)] +=
                                    go * kernel[((f * g.in_channels + c) * g.kernel_h + ki) *
                                                    g.kernel_w +
                                                kj];
                            }
                }
}

template <typename T>
void conv2d_backward_params(const ConvGeometry& g, std::span<const T> input,
                            std::span<const T> grad_output, std::span<T> grad_kernel,
                            std::span<T> grad_bias) {
    const std::size_t oh_n = g.out_h(), ow_n = g.out_w();
    for (std::size_t b = 0; b < g.batch; ++b)
        for (std::size_t f = 0; f < g.out_channels; ++f)
            for (std::size_t oh = 0; oh < oh_n; ++oh)
                for (std::size_t ow = 0; ow < ow_n; ++ow) {
                    const T go = grad_output[((b * g.out_channels + f) * oh_n + oh) * ow_n + ow];
                    if (!grad_bias.empty()) grad_bias[f] += go;
                    for (std::size_t c = 0; c < g.in_channels; ++c)
                        for (std::size_t ki = 0; ki < g.kernel_h; ++ki)
                            for (std::size_t kj = 0; kj < g.kernel_w; ++kj) {
                                const auto ih = static_cast<std::ptrdiff_t>(oh * g.stride + ki) -
                                                static_cast<std::ptrdiff_t>(g.pad_h);
                                const auto iw = static_cast<std::ptrdiff_t>(ow * g.stride + kj) -
                                                static_cast<std::ptrdiff_t>(g.pad_w);
                                if (ih < 0 || iw < 0 || ih >= static_cast<std::ptrdiff_t>(g.in_h) ||
                                    iw >= static_cast<std::ptrdiff_t>(g.in_w))
                                    continue;
                                grad_kernel[((f * g.in_channels + c) * g.kernel_h + ki) *
                                                g.kernel_w +
                                            kj] +=
                                    go * input[((b * g.in_channels + c) * g.in_h +
                                                static_cast<std::size_t>(ih)) *
                                                   g.in_w +
                                               static_cast<std::size_t>(iw)];
                            }
                }
}

template <typename T>
void maxpool2_forward(std::size_t planes, std::size_t in_h, std::size_t in_w,
                      std::span<const T> input, std::span<T> output,
                      std::span<std::size_t> argmax) {
    const std::size_t oh_n = in_h / 2, ow_n = in_w / 2;
    for (std::size_t p = 0; p < planes; ++p)
        for (std::size_t oh = 0; oh < oh_n; ++oh)
            for (std::size_t ow = 0; ow < ow_n; ++ow) {
                std::size_t best = 0;
                bool first = true;
                for (std::size_t di = 0; di < 2; ++di)
                    for (std::size_t dj = 0; dj < 2; ++dj) {
                        const std::size_t idx = (p * in_h + 2 * oh + di) * in_w + 2 * ow + dj;
                        if (first || input[idx] > input[best]) best = idx;
                        first = false;
                    }
                const std::size_t o = (p * oh_n + oh) * ow_n + ow;
                output[o] = input[best];
                argmax[o] = best;
            }
}

}  // namespace serial

int max_threads() {
#ifdef _OPENMP
    return omp_get_max_threads();
#else
    return 1;
#endif
}

void set_num_threads(int n) {
#ifdef _OPENMP
    omp_set_num_threads(n);
#else
    (void)n;
#endif
}

#define CARN_INSTANTIATE_KERNELS(T)                                                              \
    template void conv2d_forward<T>(const ConvGeometry&, std::span<const T>, std::span<const T>, \
                                    std::span<const T>, std::span<T>);                           \
    template void conv2d_backward_input<T>(const ConvGeometry&, std::span<const T>,              \
                                           std::span<const T>, std::span<T>);                    \
    template void conv2d_backward_params<T>(const ConvGeometry&, std::span<const T>,             \
                                            std::span<const T>, std::span<T>, std::span<T>);     \
    template void maxpool2_forward<T>(std::size_t, std::size_t, std::size_t, std::span<const T>, \
                                      std::span<T>, std::span<std::size_t>);                     \
    template void serial::conv2d_forward<T>(const ConvGeometry&, std::span<const T>,             \
                                            std::span<const T>, std::span<const T>,              \
                                            std::span<T>);                                       \
    template void serial::conv2d_backward_input<T>(const ConvGeometry&, std::span<const T>,      \
                                                   std::span<const T>, std::span<T>);            \
    template void serial::conv2d_backward_params<T>(const ConvGeometry&, std::span<const T>,     \
                                                    std::span<const T>, std::span<T>,            \
                                                    std::span<T>);                               \
    template void serial::maxpool2_forward<T>(std::size_t, std::size_t, std::size_t,             \
                                              std::span<const T>, std::span<T>,                  \
                                              std::span<std::size_t>);

CARN_INSTANTIATE_KERNELS(float)
CARN_INSTANTIATE_KERNELS(double)

#undef CARN_INSTANTIATE_KERNELS

}  // namespace carn::kernels
