#include "carn/ops.hpp"

#include <cmath>
#include <cstdint>

#include "carn/kernels.hpp"

namespace carn {

std::size_t same_padding(std::size_t k) {
    if (k % 2 == 0) throw ShapeError("same padding requires an odd kernel size, got " + std::to_string(k));
    return (k - 1) / 2;
}

std::size_t conv_output_size(std::size_t in, std::size_t k, std::size_t stride, Padding padding) {
    if (stride == 0) throw ShapeError("conv2d: stride must be >= 1");
    const std::size_t pad = padding == Padding::same ? same_padding(k) : 0;
    if (k > in + 2 * pad) {
        throw ShapeError("conv2d: kernel size " + std::to_string(k) +
                         " exceeds padded input size " + std::to_string(in + 2 * pad));
    }
    return (in + 2 * pad - k) / stride + 1;
}

namespace {

template <typename T>
void require_same_shape(const Var<T>& a, const Var<T>& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_to_string(a.shape()) +
                         " vs " + shape_to_string(b.shape()));
    }
}

void trace(std::uint64_t v) {
    if (KinkTrace* t = active_kink_trace()) t->record(v);
}

}  // namespace

template <typename T>
Var<T> conv2d(const Var<T>& input, const Var<T>& kernel, const Var<T>& bias, std::size_t stride,
              Padding padding) {
    const auto& x = input.value();
    const auto& k = kernel.value();
    require_rank(x, 4, "conv2d input");
    require_rank(k, 4, "conv2d kernel");
    if (x.dim(1) != k.dim(1)) {
        throw ShapeError("conv2d: input has " + std::to_string(x.dim(1)) +
                         " channels but kernel " + shape_to_string(k.shape()) + " expects " +
                         std::to_string(k.dim(1)));
    }
    if (bias.value().shape() != Shape{k.dim(0)}) {
        throw ShapeError("conv2d: bias shape " + shape_to_string(bias.shape()) +
                         " does not match " + std::to_string(k.dim(0)) + " filters");
    }
    kernels::ConvGeometry g;
    g.batch = x.dim(0);
    g.in_channels = x.dim(1);
    g.in_h = x.dim(2);
    g.in_w = x.dim(3);
    g.out_channels = k.dim(0);
    g.kernel_h = k.dim(2);
    g.kernel_w = k.dim(3);
    g.stride = stride;
    conv_output_size(g.in_h, g.kernel_h, stride, padding);
    conv_output_size(g.in_w, g.kernel_w, stride, padding);
    g.pad_h = padding == Padding::same ? same_padding(g.kernel_h) : 0;
    g.pad_w = padding == Padding::same ? same_padding(g.kernel_w) : 0;

    Tensor<T> out(Shape{g.batch, g.out_channels, g.out_h(), g.out_w()});
    kernels::conv2d_forward<T>(g, x.data(), k.data(), bias.value().data(), out.data());

    return make_result<T>(std::move(out), {input, kernel, bias}, "conv2d", [g](Node<T>& self) {
        auto& in = *self.parents[0];
        auto& ker = *self.parents[1];
        auto& b = *self.parents[2];
        const auto gy = self.grad.data();
        if (in.requires_grad) {
            kernels::conv2d_backward_input<T>(g, gy, ker.value.data(),
                                              std::span<T>(in.grad_storage()));
        }
        if (ker.requires_grad || b.requires_grad) {
            std::span<T> gk, gb;
            std::vector<T> scratch;
            if (ker.requires_grad) {
                gk = ker.grad_storage();
            } else {
                scratch.assign(ker.value.size(), T(0));
                gk = scratch;
            }
            if (b.requires_grad) gb = std::span<T>(b.grad_storage());
            kernels::conv2d_backward_params<T>(g, in.value.data(), gy, gk, gb);
        }
    });
}

template <typename T>
Var<T> maxpool2(const Var<T>& input) {
    const auto& x = input.value();
    require_rank(x, 4, "maxpool2 input");
    const std::size_t h = x.dim(2), w = x.dim(3);
    if (h % 2 != 0 || w % 2 != 0) {
        throw ShapeError("maxpool2: spatial dims must be even, got " + shape_to_string(x.shape()));
    }
    Tensor<T> out(Shape{x.dim(0), x.dim(1), h / 2, w / 2});
    std::vector<std::size_t> argmax(out.size());
    kernels::maxpool2_forward<T>(x.dim(0) * x.dim(1), h, w, x.data(), out.data(), argmax);
    if (active_kink_trace()) {
        for (std::size_t i : argmax) trace(i);
    }
    return make_result<T>(std::move(out), {input}, "maxpool2",
                          [argmax = std::move(argmax)](Node<T>& self) {
                              auto& gx = self.parents[0]->grad_storage();
                              const auto& gy = self.grad.storage();
                              for (std::size_t i = 0; i < argmax.size(); ++i) gx[argmax[i]] += gy[i];
                          });
}

template <typename T>
Var<T> batchnorm(const Var<T>& input, const Var<T>& gamma, const Var<T>& beta, Mode mode,
                 BatchNormState<T>* state) {
    const auto& x = input.value();
    if (x.rank() != 4 && x.rank() != 2) {
        throw ShapeError("batchnorm: expected [B,C,H,W] or [B,C], got " + shape_to_string(x.shape()));
    }
    const std::size_t batch = x.dim(0), channels = x.dim(1);
    const std::size_t plane = x.rank() == 4 ? x.dim(2) * x.dim(3) : 1;
    if (gamma.shape() != Shape{channels} || beta.shape() != Shape{channels}) {
        throw ShapeError("batchnorm: gamma/beta must have shape [" + std::to_string(channels) + "]");
    }
    if (mode == Mode::train && batch < 2) {
        throw ShapeError("batchnorm: train mode needs batch size >= 2, got " + std::to_string(batch));
    }
    if (mode == Mode::infer && state == nullptr) {
        throw ShapeError("batchnorm: infer mode needs running moments");
    }
    const T eps = static_cast<T>(kBatchNormEpsilon);
    const std::size_t n = batch * plane;
    std::vector<T> mean(channels), inv_std(channels);
    if (mode == Mode::train) {
        for (std::size_t c = 0; c < channels; ++c) {
            T s = 0;
            for (std::size_t b = 0; b < batch; ++b) {
                const T* p = x.data().data() + (b * channels + c) * plane;
                for (std::size_t i = 0; i < plane; ++i) s += p[i];
            }
            const T mu = s / static_cast<T>(n);
            T v = 0;
            for (std::size_t b = 0; b < batch; ++b) {
                const T* p = x.data().data() + (b * channels + c) * plane;
                for (std::size_t i = 0; i < plane; ++i) v += (p[i] - mu) * (p[i] - mu);
            }
            v /= static_cast<T>(n);
            mean[c] = mu;
            inv_std[c] = T(1) / std::sqrt(v + eps);
            if (state) {
                const T m = static_cast<T>(kBatchNormMomentum);
                state->running_mean[c] = m * state->running_mean[c] + (T(1) - m) * mu;
                const T unbiased = v * static_cast<T>(n) / static_cast<T>(n - 1);
                state->running_var[c] = m * state->running_var[c] + (T(1) - m) * unbiased;
            }
        }
    } else {
        for (std::size_t c = 0; c < channels; ++c) {
            mean[c] = state->running_mean[c];
            inv_std[c] = T(1) / std::sqrt(state->running_var[c] + eps);
        }
    }

    Tensor<T> xhat(x.shape());
    Tensor<T> out(x.shape());
    for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t c = 0; c < channels; ++c) {
            const std::size_t base = (b * channels + c) * plane;
            const T gm = gamma.value()[c], bt = beta.value()[c];
            for (std::size_t i = 0; i < plane; ++i) {
                const T h = (x[base + i] - mean[c]) * inv_std[c];
                xhat[base + i] = h;
                out[base + i] = gm * h + bt;
            }
        }
    }

    return make_result<T>(
        std::move(out), {input, gamma, beta}, "batchnorm",
        [xhat = std::move(xhat), inv_std = std::move(inv_std), mode, batch, channels, plane,
         n](Node<T>& self) {
            auto& in = *self.parents[0];
            auto& gm = *self.parents[1];
            auto& bt = *self.parents[2];
            const auto& gy = self.grad.storage();
            std::vector<T> sum_dy(channels, T(0)), sum_dy_xhat(channels, T(0));
            for (std::size_t b = 0; b < batch; ++b) {
                for (std::size_t c = 0; c < channels; ++c) {
                    const std::size_t base = (b * channels + c) * plane;
                    for (std::size_t i = 0; i < plane; ++i) {
                        sum_dy[c] += gy[base + i];
                        sum_dy_xhat[c] += gy[base + i] * xhat[base + i];
                    }
                }
            }
            if (gm.requires_grad) {
                auto& g = gm.grad_storage();
                for (std::size_t c = 0; c < channels; ++c) g[c] += sum_dy_xhat[c];
            }
            if (bt.requires_grad) {
                auto& g = bt.grad_storage();
                for (std::size_t c = 0; c < channels; ++c) g[c] += sum_dy[c];
            }
            if (!in.requires_grad) return;
            auto& gx = in.grad_storage();
            const T nn = static_cast<T>(n);
            for (std::size_t b = 0; b < batch; ++b) {
                for (std::size_t c = 0; c < channels; ++c) {
                    const std::size_t base = (b * channels + c) * plane;
                    const T scale = gm.value[c] * inv_std[c];
                    if (mode == Mode::train) {
                        for (std::size_t i = 0; i < plane; ++i) {
                            gx[base + i] += scale / nn *
                                            (nn * gy[base + i] - sum_dy[c] - xhat[base + i] * sum_dy_xhat[c]);
                        }
                    } else {
                        for (std::size_t i = 0; i < plane; ++i) gx[base + i] += scale * gy[base + i];
                    }
                }
            }
        });
}

template <typename T>
Var<T> activation(const Var<T>& input, Activation kind) {
    const auto& x = input.value();
    Tensor<T> out(x.shape());
    if (kind == Activation::relu) {
        for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] > T(0) ? x[i] : T(0);
        if (KinkTrace* t = active_kink_trace()) {
            std::uint64_t word = 0;
            for (std::size_t i = 0; i < x.size(); ++i) {
                word = (word << 1) | (x[i] > T(0) ? 1u : 0u);
                if (i % 64 == 63) {
                    t->record(word);
                    word = 0;
                }
            }
            t->record(word);
        }
        return make_result<T>(std::move(out), {input}, "relu", [](Node<T>& self) {
            auto& in = *self.parents[0];
            auto& gx = in.grad_storage();
            const auto& gy = self.grad.storage();
            for (std::size_t i = 0; i < gy.size(); ++i) {
                if (in.value[i] > T(0)) gx[i] += gy[i];
            }
        });
    }
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = std::tanh(x[i]);
    return make_result<T>(std::move(out), {input}, "tanh", [](Node<T>& self) {
        auto& gx = self.parents[0]->grad_storage();
        const auto& gy = self.grad.storage();
        for (std::size_t i = 0; i < gy.size(); ++i) {
            const T y = self.value[i];
            gx[i] += gy[i] * (T(1) - y * y);
        }
    });
}

template <typename T>
Var<T> dense(const Var<T>& input, const Var<T>& weight, const Var<T>& bias) {
    const auto& x = input.value();
    const auto& w = weight.value();
    require_rank(x, 2, "dense input");
    require_rank(w, 2, "dense weight");
    const std::size_t batch = x.dim(0), n = x.dim(1), m = w.dim(0);
    if (w.dim(1) != n) {
        throw ShapeError("dense: input " + shape_to_string(x.shape()) + " incompatible with weight " +
                         shape_to_string(w.shape()));
    }
    if (bias.shape() != Shape{m}) {
        throw ShapeError("dense: bias shape " + shape_to_string(bias.shape()) + " expected [" +
                         std::to_string(m) + "]");
    }
    Tensor<T> out(Shape{batch, m});
    for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t r = 0; r < m; ++r) {
            T acc = bias.value()[r];
            for (std::size_t j = 0; j < n; ++j) acc += w.at(r, j) * x.at(b, j);
            out.at(b, r) = acc;
        }
    }
    return make_result<T>(std::move(out), {input, weight, bias}, "dense",
                          [batch, n, m](Node<T>& self) {
                              auto& in = *self.parents[0];
                              auto& wt = *self.parents[1];
                              auto& bs = *self.parents[2];
                              const auto& gy = self.grad.storage();
                              if (in.requires_grad) {
                                  auto& gx = in.grad_storage();
                                  for (std::size_t b = 0; b < batch; ++b)
                                      for (std::size_t r = 0; r < m; ++r)
                                          for (std::size_t j = 0; j < n; ++j)
                                              gx[b * n + j] += gy[b * m + r] * wt.value[r * n + j];
                              }
                              if (wt.requires_grad) {
                                  auto& gw = wt.grad_storage();
                                  for (std::size_t b = 0; b < batch; ++b)
                                      for (std::size_t r = 0; r < m; ++r)
                                          for (std::size_t j = 0; j < n; ++j)
                                              gw[r * n + j] += gy[b * m + r] * in.value[b * n + j];
                              }
                              if (bs.requires_grad) {
                                  auto& gb = bs.grad_storage();
                                  for (std::size_t b = 0; b < batch; ++b)
                                      for (std::size_t r = 0; r < m; ++r) gb[r] += gy[b * m + r];
                              }
                          });
}

template <typename T>
Var<T> global_avg_pool(const Var<T>& input) {
    const auto& x = input.value();
    require_rank(x, 4, "global_avg_pool input");
    const std::size_t batch = x.dim(0), channels = x.dim(1), plane = x.dim(2) * x.dim(3);
    Tensor<T> out(Shape{batch, channels});
    for (std::size_t bc = 0; bc < batch * channels; ++bc) {
        T s = 0;
        for (std::size_t i = 0; i < plane; ++i) s += x[bc * plane + i];
        out[bc] = s / static_cast<T>(plane);
    }
    return make_result<T>(std::move(out), {input}, "global_avg_pool", [plane](Node<T>& self) {
        auto& gx = self.parents[0]->grad_storage();
        const auto& gy = self.grad.storage();
        const T inv = T(1) / static_cast<T>(plane);
        for (std::size_t bc = 0; bc < gy.size(); ++bc)
            for (std::size_t i = 0; i < plane; ++i) gx[bc * plane + i] += gy[bc] * inv;
    });
}

template <typename T>
Var<T> concat_channels(const Var<T>& a, const Var<T>& b) {
    const auto& x = a.value();
    const auto& y = b.value();
    require_rank(x, 4, "concat_channels a");
    require_rank(y, 4, "concat_channels b");
    if (x.dim(0) != y.dim(0) || x.dim(2) != y.dim(2) || x.dim(3) != y.dim(3)) {
        throw ShapeError("concat_channels: batch/spatial mismatch " + shape_to_string(x.shape()) +
                         " vs " + shape_to_string(y.shape()));
    }
    const std::size_t batch = x.dim(0), ca = x.dim(1), cb = y.dim(1), plane = x.dim(2) * x.dim(3);
    Tensor<T> out(Shape{batch, ca + cb, x.dim(2), x.dim(3)});
    for (std::size_t n = 0; n < batch; ++n) {
        std::copy_n(x.data().data() + n * ca * plane, ca * plane,
                    out.data().data() + n * (ca + cb) * plane);
        std::copy_n(y.data().data() + n * cb * plane, cb * plane,
                    out.data().data() + (n * (ca + cb) + ca) * plane);
    }
    return make_result<T>(std::move(out), {a, b}, "concat_channels",
                          [batch, ca, cb, plane](Node<T>& self) {
                              auto& pa = *self.parents[0];
                              auto& pb = *self.parents[1];
                              const auto& gy = self.grad.storage();
                              for (std::size_t n = 0; n < batch; ++n) {
                                  const std::size_t base = n * (ca + cb) * plane;
                                  if (pa.requires_grad) {
                                      auto& g = pa.grad_storage();
                                      for (std::size_t i = 0; i < ca * plane; ++i)
                                          g[n * ca * plane + i] += gy[base + i];
                                  }
                                  if (pb.requires_grad) {
                                      auto& g = pb.grad_storage();
                                      for (std::size_t i = 0; i < cb * plane; ++i)
                                          g[n * cb * plane + i] += gy[base + ca * plane + i];
                                  }
                              }
                          });
}

template <typename T>
Var<T> elementwise(const Var<T>& a, const Var<T>& b, Elementwise kind) {
    require_same_shape(a, b, kind == Elementwise::mul ? "mul" : "add");
    const auto& x = a.value();
    const auto& y = b.value();
    Tensor<T> out(x.shape());
    if (kind == Elementwise::mul) {
        for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * y[i];
        return make_result<T>(std::move(out), {a, b}, "mul", [](Node<T>& self) {
            auto& pa = *self.parents[0];
            auto& pb = *self.parents[1];
            const auto& gy = self.grad.storage();
            if (pa.requires_grad) {
                auto& g = pa.grad_storage();
                for (std::size_t i = 0; i < gy.size(); ++i) g[i] += gy[i] * pb.value[i];
            }
            if (pb.requires_grad) {
                auto& g = pb.grad_storage();
                for (std::size_t i = 0; i < gy.size(); ++i) g[i] += gy[i] * pa.value[i];
            }
        });
    }
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] + y[i];
    return make_result<T>(std::move(out), {a, b}, "add", [](Node<T>& self) {
        const auto& gy = self.grad.storage();
        for (int p = 0; p < 2; ++p) {
            auto& parent = *self.parents[p];
            if (!parent.requires_grad) continue;
            auto& g = parent.grad_storage();
            for (std::size_t i = 0; i < gy.size(); ++i) g[i] += gy[i];
        }
    });
}

template <typename T>
Var<T> add_scalar(const Var<T>& x, T c) {
    Tensor<T> out = x.value();
    for (auto& v : out.storage()) v += c;
    return make_result<T>(std::move(out), {x}, "add_scalar", [](Node<T>& self) {
        auto& g = self.parents[0]->grad_storage();
        const auto& gy = self.grad.storage();
        for (std::size_t i = 0; i < gy.size(); ++i) g[i] += gy[i];
    });
}

template <typename T>
Var<T> scale(const Var<T>& x, T c) {
    Tensor<T> out = x.value();
    for (auto& v : out.storage()) v *= c;
    return make_result<T>(std::move(out), {x}, "scale", [c](Node<T>& self) {
        auto& g = self.parents[0]->grad_storage();
        const auto& gy = self.grad.storage();
        for (std::size_t i = 0; i < gy.size(); ++i) g[i] += c * gy[i];
    });
}

template <typename T>
Var<T> sum(const Var<T>& x) {
    T s = 0;
    for (T v : x.value().storage()) s += v;
    return make_result<T>(Tensor<T>::scalar(s), {x}, "sum", [](Node<T>& self) {
        auto& g = self.parents[0]->grad_storage();
        const T gy = self.grad[0];
        for (auto& v : g) v += gy;
    });
}

template <typename T>
Var<T> mean_abs_diff(const Var<T>& a, const Var<T>& b) {
    require_same_shape(a, b, "mean_abs_diff");
    const auto& x = a.value();
    const auto& y = b.value();
    T s = 0;
    for (std::size_t i = 0; i < x.size(); ++i) s += std::abs(x[i] - y[i]);
    const T count = static_cast<T>(x.size());
    if (KinkTrace* t = active_kink_trace()) {
        for (std::size_t i = 0; i < x.size(); ++i) t->record(x[i] > y[i] ? 1 : (x[i] < y[i] ? 2 : 3));
    }
    return make_result<T>(Tensor<T>::scalar(s / count), {a, b}, "mean_abs_diff",
                          [count](Node<T>& self) {
                              auto& pa = *self.parents[0];
                              auto& pb = *self.parents[1];
                              const T gy = self.grad[0] / count;
                              for (std::size_t i = 0; i < pa.value.size(); ++i) {
                                  const T d = pa.value[i] - pb.value[i];
                                  const T sgn = d > T(0) ? T(1) : (d < T(0) ? T(-1) : T(0));
                                  if (pa.requires_grad) pa.grad_storage()[i] += gy * sgn;
                                  if (pb.requires_grad) pb.grad_storage()[i] -= gy * sgn;
                              }
                          });
}

template <typename T>
Var<T> l2_norm(const Var<T>& x, bool squared) {
    T ss = 0;
    for (T v : x.value().storage()) ss += v * v;
    const T norm = std::sqrt(ss);
    return make_result<T>(Tensor<T>::scalar(squared ? ss : norm), {x}, "l2_norm",
                          [squared, norm](Node<T>& self) {
                              auto& p = *self.parents[0];
                              auto& g = p.grad_storage();
                              const T gy = self.grad[0];
                              if (squared) {
                                  for (std::size_t i = 0; i < g.size(); ++i) g[i] += gy * T(2) * p.value[i];
                              } else if (norm > T(0)) {
                                  for (std::size_t i = 0; i < g.size(); ++i) g[i] += gy * p.value[i] / norm;
                              }
                          });
}

#define CARN_INSTANTIATE_OPS(T)                                                                  \
    template Var<T> conv2d<T>(const Var<T>&, const Var<T>&, const Var<T>&, std::size_t, Padding); \
    template Var<T> maxpool2<T>(const Var<T>&);                                                  \
    template Var<T> batchnorm<T>(const Var<T>&, const Var<T>&, const Var<T>&, Mode,             \
                                 BatchNormState<T>*);                                            \
    template Var<T> activation<T>(const Var<T>&, Activation);                                    \
    template Var<T> dense<T>(const Var<T>&, const Var<T>&, const Var<T>&);                       \
    template Var<T> global_avg_pool<T>(const Var<T>&);                                           \
    template Var<T> concat_channels<T>(const Var<T>&, const Var<T>&);                            \
    template Var<T> elementwise<T>(const Var<T>&, const Var<T>&, Elementwise);                   \
    template Var<T> add_scalar<T>(const Var<T>&, T);                                             \
    template Var<T> scale<T>(const Var<T>&, T);                                                  \
    template Var<T> sum<T>(const Var<T>&);                                                       \
    template Var<T> mean_abs_diff<T>(const Var<T>&, const Var<T>&);                              \
    template Var<T> l2_norm<T>(const Var<T>&, bool);

CARN_INSTANTIATE_OPS(float)
CARN_INSTANTIATE_OPS(double)

#undef CARN_INSTANTIATE_OPS

}  // namespace carn
