#ifndef OCTGAN_OPS_HPP
#define OCTGAN_OPS_HPP

#include <array>
#include <cmath>

#include "octgan/tensor.hpp"

namespace octgan {

namespace detail {

template <typename S>
using MatR = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S>
using MapR = Eigen::Map<MatR<S>>;
template <typename S>
using ConstMapR = Eigen::Map<const MatR<S>>;

inline Extent conv_extent(Extent in, Extent k, Extent stride, Extent pad, const char* what) {
    if (stride < 1) throw InvalidConfig(std::string(what) + ": stride must be >= 1");
    if (pad < 0) throw InvalidConfig(std::string(what) + ": negative padding");
    if (in + 2 * pad < k)
        throw ShapeMismatch(std::string(what) + ": extent " + std::to_string(in) +
                            " too small for kernel " + std::to_string(k) + " with pad " +
                            std::to_string(pad));
    return (in + 2 * pad - k) / stride + 1;
}

// Unrolls k*k patches of a [c,h,w] image into a (c*k*k) x (oh*ow) matrix,
// zero padding outside the image.
template <typename S>
void im2col(const S* src, Extent c, Extent h, Extent w, Extent k, Extent stride, Extent pad,
            Extent oh, Extent ow, MatR<S>& col) {
    col.setZero(c * k * k, oh * ow);
    for (Extent ci = 0; ci < c; ++ci) {
        const S* plane = src + ci * h * w;
        for (Extent kh = 0; kh < k; ++kh) {
            for (Extent kw = 0; kw < k; ++kw) {
                S* row = col.data() + ((ci * k + kh) * k + kw) * (oh * ow);
                for (Extent y = 0; y < oh; ++y) {
                    const Extent ih = y * stride - pad + kh;
                    if (ih < 0 || ih >= h) continue;
                    S* dst = row + y * ow;
                    const S* srow = plane + ih * w;
                    for (Extent x = 0; x < ow; ++x) {
                        const Extent iw = x * stride - pad + kw;
                        if (iw >= 0 && iw < w) dst[x] = srow[iw];
                    }
                }
            }
        }
    }
}

// Adjoint of im2col: scatter-adds a column matrix back into the image.
template <typename S>
void col2im_add(const MatR<S>& col, S* dst, Extent c, Extent h, Extent w, Extent k,
                Extent stride, Extent pad, Extent oh, Extent ow) {
    for (Extent ci = 0; ci < c; ++ci) {
        S* plane = dst + ci * h * w;
        for (Extent kh = 0; kh < k; ++kh) {
            for (Extent kw = 0; kw < k; ++kw) {
                const S* row = col.data() + ((ci * k + kh) * k + kw) * (oh * ow);
                for (Extent y = 0; y < oh; ++y) {
                    const Extent ih = y * stride - pad + kh;
                    if (ih < 0 || ih >= h) continue;
                    const S* srow = row + y * ow;
                    S* drow = plane + ih * w;
                    for (Extent x = 0; x < ow; ++x) {
                        const Extent iw = x * stride - pad + kw;
                        if (iw >= 0 && iw < w) drow[iw] += srow[x];
                    }
                }
            }
        }
    }
}

// 3D analogue over [c,d,h,w] volumes.
template <typename S>
void vol2col(const S* src, Extent c, Extent d, Extent h, Extent w, const std::array<Extent, 3>& k,
             const std::array<Extent, 3>& stride, const std::array<Extent, 3>& pad, Extent od,
             Extent oh, Extent ow, MatR<S>& col) {
    const Extent cols = od * oh * ow;
    col.setZero(c * k[0] * k[1] * k[2], cols);
    for (Extent ci = 0; ci < c; ++ci) {
        const S* vol = src + ci * d * h * w;
        for (Extent kd = 0; kd < k[0]; ++kd) {
            for (Extent kh = 0; kh < k[1]; ++kh) {
                for (Extent kw = 0; kw < k[2]; ++kw) {
                    const Extent r = ((ci * k[0] + kd) * k[1] + kh) * k[2] + kw;
                    S* row = col.data() + r * cols;
                    for (Extent z = 0; z < od; ++z) {
                        const Extent id = z * stride[0] - pad[0] + kd;
                        if (id < 0 || id >= d) continue;
                        for (Extent y = 0; y < oh; ++y) {
                            const Extent ih = y * stride[1] - pad[1] + kh;
                            if (ih < 0 || ih >= h) continue;
                            S* dst = row + (z * oh + y) * ow;
                            const S* srow = vol + (id * h + ih) * w;
                            for (Extent x = 0; x < ow; ++x) {
                                const Extent iw = x * stride[2] - pad[2] + kw;
                                if (iw >= 0 && iw < w) dst[x] = srow[iw];
                            }
                        }
                    }
                }
            }
        }
    }
}

template <typename S>
void col2vol_add(const MatR<S>& col, S* dst, Extent c, Extent d, Extent h, Extent w,
                 const std::array<Extent, 3>& k, const std::array<Extent, 3>& stride,
                 const std::array<Extent, 3>& pad, Extent od, Extent oh, Extent ow) {
    const Extent cols = od * oh * ow;
    for (Extent ci = 0; ci < c; ++ci) {
        S* vol = dst + ci * d * h * w;
        for (Extent kd = 0; kd < k[0]; ++kd) {
            for (Extent kh = 0; kh < k[1]; ++kh) {
                for (Extent kw = 0; kw < k[2]; ++kw) {
                    const Extent r = ((ci * k[0] + kd) * k[1] + kh) * k[2] + kw;
                    const S* row = col.data() + r * cols;
                    for (Extent z = 0; z < od; ++z) {
                        const Extent id = z * stride[0] - pad[0] + kd;
                        if (id < 0 || id >= d) continue;
                        for (Extent y = 0; y < oh; ++y) {
                            const Extent ih = y * stride[1] - pad[1] + kh;
                            if (ih < 0 || ih >= h) continue;
                            const S* srow = row + (z * oh + y) * ow;
                            S* drow = vol + (id * h + ih) * w;
                            for (Extent x = 0; x < ow; ++x) {
                                const Extent iw = x * stride[2] - pad[2] + kw;
                                if (iw >= 0 && iw < w) drow[iw] += srow[x];
                            }
                        }
                    }
                }
            }
        }
    }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise and reductions
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
    if (a.shape() != b.shape())
        throw ShapeMismatch("add: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    Tensor<S> out = Tensor<S>::from_array(a.shape(), a.values() + b.values());
    if (detail::track(a) || detail::track(b)) {
        out.set_requires_grad(true);
        detail::record_op<S>([a, b, out]() mutable {
            if (!out.grad_allocated()) return;
            if (a.requires_grad()) a.grad() += out.grad();
            if (b.requires_grad()) b.grad() += out.grad();
        });
    }
    return out;
}

template <typename S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
    if (a.shape() != b.shape())
        throw ShapeMismatch("sub: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    Tensor<S> out = Tensor<S>::from_array(a.shape(), a.values() - b.values());
    if (detail::track(a) || detail::track(b)) {
        out.set_requires_grad(true);
        detail::record_op<S>([a, b, out]() mutable {
            if (!out.grad_allocated()) return;
            if (a.requires_grad()) a.grad() += out.grad();
            if (b.requires_grad()) b.grad() -= out.grad();
        });
    }
    return out;
}

template <typename S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
    if (a.shape() != b.shape())
        throw ShapeMismatch("mul: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    Tensor<S> out = Tensor<S>::from_array(a.shape(), a.values() * b.values());
    if (detail::track(a) || detail::track(b)) {
        out.set_requires_grad(true);
        detail::record_op<S>([a, b, out]() mutable {
            if (!out.grad_allocated()) return;
            if (a.requires_grad()) a.grad() += out.grad() * b.values();
            if (b.requires_grad()) b.grad() += out.grad() * a.values();
        });
    }
    return out;
}

template <typename S>
Tensor<S> scale(const Tensor<S>& a, S c) {
    Tensor<S> out = Tensor<S>::from_array(a.shape(), a.values() * c);
    if (detail::track(a)) {
        out.set_requires_grad(true);
        detail::record_op<S>([a, out, c]() mutable {
            if (!out.grad_allocated()) return;
            a.grad() += out.grad() * c;
        });
    }
    return out;
}

template <typename S>
Tensor<S> add_scalar(const Tensor<S>& a, S c) {
    Tensor<S> out = Tensor<S>::from_array(a.shape(), a.values() + c);
    if (detail::track(a)) {
        out.set_requires_grad(true);
        detail::record_op<S>([a, out]() mutable {
            if (!out.grad_allocated()) return;
            a.grad() += out.grad();
        });
    }
    return out;
}

template <typename S>
Tensor<S> abs(const Tensor<S>& a) {
    Tensor<S> out = Tensor<S>::from_array(a.shape(), a.values().abs());
    if (detail::track(a)) {
        out.set_requires_grad(true);
        detail::record_op<S>([a, out]() mutable {
            if (!out.grad_allocated()) return;
            a.grad() += out.grad() * a.values().sign();
        });
    }
    return out;
}

template <typename S>
Tensor<S> square(const Tensor<S>& a) {
    Tensor<S> out = Tensor<S>::from_array(a.shape(), a.values().square());
    if (detail::track(a)) {
        out.set_requires_grad(true);
        detail::record_op<S>([a, out]() mutable {
            if (!out.grad_allocated()) return;
            a.grad() += out.grad() * a.values() * S(2);
        });
    }
    return out;
}

template <typename S>
Tensor<S> sum(const Tensor<S>& a) {
    Tensor<S> out = Tensor<S>::scalar(a.values().sum());
    if (detail::track(a)) {
        out.set_requires_grad(true);
        detail::record_op<S>([a, out]() mutable {
            if (!out.grad_allocated()) return;
            a.grad() += out.grad()[0];
        });
    }
    return out;
}

template <typename S>
Tensor<S> mean(const Tensor<S>& a) {
    const S inv_n = S(1) / static_cast<S>(a.size());
    Tensor<S> out = Tensor<S>::scalar(a.values().sum() * inv_n);
    if (detail::track(a)) {
        out.set_requires_grad(true);
        detail::record_op<S>([a, out, inv_n]() mutable {
            if (!out.grad_allocated()) return;
            a.grad() += out.grad()[0] * inv_n;
        });
    }
    return out;
}

template <typename S>
Tensor<S> reshape(const Tensor<S>& a, Shape shape) {
    if (shape_numel(shape) != a.size())
        throw ShapeMismatch("reshape: " + shape_str(a.shape()) + " to " + shape_str(shape));
    Tensor<S> out = Tensor<S>::from_array(std::move(shape), a.values());
    if (detail::track(a)) {
        out.set_requires_grad(true);
        detail::record_op<S>([a, out]() mutable {
            if (!out.grad_allocated()) return;
            a.grad() += out.grad();
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// activations
// ---------------------------------------------------------------------------

enum class ActivationKind { relu, leaky_relu, tanh, sigmoid };

template <typename S>
Tensor<S> relu(const Tensor<S>& a) {
    Tensor<S> out = Tensor<S>::from_array(a.shape(), a.values().max(S(0)));
    if (detail::track(a)) {
        out.set_requires_grad(true);
        detail::record_op<S>([a, out]() mutable {
            if (!out.grad_allocated()) return;
            a.grad() += out.grad() * (a.values() > S(0)).template cast<S>();
        });
    }
    return out;
}

template <typename S>
Tensor<S> leaky_relu(const Tensor<S>& a, S slope) {
    Tensor<S> out = Tensor<S>::from_array(a.shape(), a.values().max(a.values() * slope));
    if (detail::track(a)) {
        out.set_requires_grad(true);
        detail::record_op<S>([a, out, slope]() mutable {
            if (!out.grad_allocated()) return;
            a.grad() += out.grad() *
                        (a.values() > S(0)).select(Tensor<S>::Array::Constant(a.size(), S(1)),
                                                   Tensor<S>::Array::Constant(a.size(), slope));
        });
    }
    return out;
}

template <typename S>
Tensor<S> tanh(const Tensor<S>& a) {
    Tensor<S> out = Tensor<S>::from_array(a.shape(), a.values().tanh());
    if (detail::track(a)) {
        out.set_requires_grad(true);
        detail::record_op<S>([a, out]() mutable {
            if (!out.grad_allocated()) return;
            a.grad() += out.grad() * (S(1) - out.values().square());
        });
    }
    return out;
}

template <typename S>
Tensor<S> sigmoid(const Tensor<S>& a) {
    // logistic via tanh keeps exp() off both tails
    Tensor<S> out =
        Tensor<S>::from_array(a.shape(), ((a.values() * S(0.5)).tanh() + S(1)) * S(0.5));
    if (detail::track(a)) {
        out.set_requires_grad(true);
        detail::record_op<S>([a, out]() mutable {
            if (!out.grad_allocated()) return;
            a.grad() += out.grad() * out.values() * (S(1) - out.values());
        });
    }
    return out;
}

template <typename S>
Tensor<S> activation(const Tensor<S>& a, ActivationKind kind, S slope = S(0.2)) {
    switch (kind) {
        case ActivationKind::relu: return relu(a);
        case ActivationKind::leaky_relu: return leaky_relu(a, slope);
        case ActivationKind::tanh: return tanh(a);
        case ActivationKind::sigmoid: return sigmoid(a);
    }
    throw InvalidConfig("unknown activation kind");
}

// ---------------------------------------------------------------------------
// structure
// ---------------------------------------------------------------------------

// Concatenates along the channel axis (dim 1); all other extents must match.
template <typename S>
Tensor<S> concat_channels(const Tensor<S>& a, const Tensor<S>& b) {
    if (a.rank() != b.rank() || a.rank() < 2)
        throw ShapeMismatch("concat_channels: " + shape_str(a.shape()) + " vs " +
                            shape_str(b.shape()));
    for (int i = 0; i < a.rank(); ++i)
        if (i != 1 && a.dim(i) != b.dim(i))
            throw ShapeMismatch("concat_channels: " + shape_str(a.shape()) + " vs " +
                                shape_str(b.shape()));

    const Extent batch = a.dim(0);
    const Extent ca = a.dim(1);
    const Extent cb = b.dim(1);
    Extent sp = 1;
    for (int i = 2; i < a.rank(); ++i) sp *= a.dim(i);

    Shape out_shape = a.shape();
    out_shape[1] = ca + cb;
    Tensor<S> out = Tensor<S>::zeros(out_shape);

    for (Extent bi = 0; bi < batch; ++bi) {
        S* dst = out.data() + bi * (ca + cb) * sp;
        std::copy_n(a.data() + bi * ca * sp, ca * sp, dst);
        std::copy_n(b.data() + bi * cb * sp, cb * sp, dst + ca * sp);
    }

    if (detail::track(a) || detail::track(b)) {
        out.set_requires_grad(true);
        detail::record_op<S>([a, b, out, batch, ca, cb, sp]() mutable {
            if (!out.grad_allocated()) return;
            const S* g = out.grad().data();
            for (Extent bi = 0; bi < batch; ++bi) {
                const S* src = g + bi * (ca + cb) * sp;
                if (a.requires_grad()) {
                    S* ga = a.grad().data() + bi * ca * sp;
                    for (Extent i = 0; i < ca * sp; ++i) ga[i] += src[i];
                }
                if (b.requires_grad()) {
                    S* gb = b.grad().data() + bi * cb * sp;
                    for (Extent i = 0; i < cb * sp; ++i) gb[i] += src[ca * sp + i];
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// convolutions
// ---------------------------------------------------------------------------

// input [b,c_in,h,w], kernel [c_out,c_in,k,k], optional bias [c_out]
// -> [b,c_out,h',w'] with h' = (h + 2*pad - k)/stride + 1, zero padding.
template <typename S>
Tensor<S> conv2d(const Tensor<S>& input, const Tensor<S>& kernel, int stride, int pad,
                 const Tensor<S>& bias = {}) {
    if (input.rank() != 4) throw InvalidShape("conv2d: input must be [b,c,h,w]");
    if (kernel.rank() != 4 || kernel.dim(2) != kernel.dim(3))
        throw InvalidShape("conv2d: kernel must be [c_out,c_in,k,k]");
    if (kernel.dim(1) != input.dim(1))
        throw ShapeMismatch("conv2d: input channels " + std::to_string(input.dim(1)) +
                            " vs kernel channels " + std::to_string(kernel.dim(1)));
    if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != kernel.dim(0)))
        throw ShapeMismatch("conv2d: bias must be [c_out]");

    const Extent batch = input.dim(0), cin = input.dim(1), h = input.dim(2), w = input.dim(3);
    const Extent cout = kernel.dim(0), k = kernel.dim(2);
    const Extent oh = detail::conv_extent(h, k, stride, pad, "conv2d");
    const Extent ow = detail::conv_extent(w, k, stride, pad, "conv2d");
    const Extent patch = cin * k * k, opix = oh * ow;

    Tensor<S> out = Tensor<S>::zeros({batch, cout, oh, ow});
    detail::ConstMapR<S> kmat(kernel.data(), cout, patch);
    detail::MatR<S> col;
    for (Extent bi = 0; bi < batch; ++bi) {
        detail::im2col(input.data() + bi * cin * h * w, cin, h, w, k, stride, pad, oh, ow, col);
        detail::MapR<S> o(out.data() + bi * cout * opix, cout, opix);
        o.noalias() = kmat * col;
        if (bias.defined())
            for (Extent co = 0; co < cout; ++co) o.row(co).array() += bias[co];
    }

    if (detail::track(input) || detail::track(kernel) || (bias.defined() && detail::track(bias))) {
        out.set_requires_grad(true);
        detail::record_op<S>([input, kernel, bias, out, stride, pad]() mutable {
            if (!out.grad_allocated()) return;
            const Extent batch = input.dim(0), cin = input.dim(1), h = input.dim(2),
                         w = input.dim(3);
            const Extent cout = kernel.dim(0), k = kernel.dim(2);
            const Extent oh = out.dim(2), ow = out.dim(3);
            const Extent patch = cin * k * k, opix = oh * ow;
            detail::ConstMapR<S> kmat(kernel.data(), cout, patch);
            detail::MatR<S> col, dcol;
            for (Extent bi = 0; bi < batch; ++bi) {
                detail::ConstMapR<S> gy(out.grad().data() + bi * cout * opix, cout, opix);
                if (kernel.requires_grad() || input.requires_grad())
                    detail::im2col(input.data() + bi * cin * h * w, cin, h, w, k, stride, pad, oh,
                                   ow, col);
                if (kernel.requires_grad()) {
                    detail::MapR<S> gk(kernel.grad().data(), cout, patch);
                    gk.noalias() += gy * col.transpose();
                }
                if (input.requires_grad()) {
                    dcol.noalias() = kmat.transpose() * gy;
                    detail::col2im_add(dcol, input.grad().data() + bi * cin * h * w, cin, h, w, k,
                                       stride, pad, oh, ow);
                }
                if (bias.defined() && bias.requires_grad())
                    for (Extent co = 0; co < cout; ++co) bias.grad()[co] += gy.row(co).sum();
            }
        });
    }
    return out;
}

// input [b,c_in,d,h,w], kernel [c_out,c_in,kd,kh,kw] -> [b,c_out,d',h',w'].
template <typename S>
Tensor<S> conv3d(const Tensor<S>& input, const Tensor<S>& kernel, std::array<int, 3> stride,
                 std::array<int, 3> pad) {
    if (input.rank() != 5) throw InvalidShape("conv3d: input must be [b,c,d,h,w]");
    if (kernel.rank() != 5) throw InvalidShape("conv3d: kernel must be [c_out,c_in,kd,kh,kw]");
    if (kernel.dim(1) != input.dim(1))
        throw ShapeMismatch("conv3d: input channels " + std::to_string(input.dim(1)) +
                            " vs kernel channels " + std::to_string(kernel.dim(1)));

    const Extent batch = input.dim(0), cin = input.dim(1);
    const Extent d = input.dim(2), h = input.dim(3), w = input.dim(4);
    const Extent cout = kernel.dim(0);
    const std::array<Extent, 3> k{kernel.dim(2), kernel.dim(3), kernel.dim(4)};
    const std::array<Extent, 3> st{stride[0], stride[1], stride[2]};
    const std::array<Extent, 3> pd{pad[0], pad[1], pad[2]};
    const Extent od = detail::conv_extent(d, k[0], st[0], pd[0], "conv3d");
    const Extent oh = detail::conv_extent(h, k[1], st[1], pd[1], "conv3d");
    const Extent ow = detail::conv_extent(w, k[2], st[2], pd[2], "conv3d");
    const Extent patch = cin * k[0] * k[1] * k[2], opix = od * oh * ow;
    const Extent ipix = d * h * w;

    Tensor<S> out = Tensor<S>::zeros({batch, cout, od, oh, ow});
    detail::ConstMapR<S> kmat(kernel.data(), cout, patch);
    detail::MatR<S> col;
    for (Extent bi = 0; bi < batch; ++bi) {
        detail::vol2col(input.data() + bi * cin * ipix, cin, d, h, w, k, st, pd, od, oh, ow, col);
        detail::MapR<S> o(out.data() + bi * cout * opix, cout, opix);
        o.noalias() = kmat * col;
    }

    if (detail::track(input) || detail::track(kernel)) {
        out.set_requires_grad(true);
        detail::record_op<S>([input, kernel, out, k, st, pd]() mutable {
            if (!out.grad_allocated()) return;
            const Extent batch = input.dim(0), cin = input.dim(1);
            const Extent d = input.dim(2), h = input.dim(3), w = input.dim(4);
            const Extent cout = kernel.dim(0);
            const Extent od = out.dim(2), oh = out.dim(3), ow = out.dim(4);
            const Extent patch = cin * k[0] * k[1] * k[2], opix = od * oh * ow;
            const Extent ipix = d * h * w;
            detail::ConstMapR<S> kmat(kernel.data(), cout, patch);
            detail::MatR<S> col, dcol;
            for (Extent bi = 0; bi < batch; ++bi) {
                detail::ConstMapR<S> gy(out.grad().data() + bi * cout * opix, cout, opix);
                detail::vol2col(input.data() + bi * cin * ipix, cin, d, h, w, k, st, pd, od, oh,
                                ow, col);
                if (kernel.requires_grad()) {
                    detail::MapR<S> gk(kernel.grad().data(), cout, patch);
                    gk.noalias() += gy * col.transpose();
                }
                if (input.requires_grad()) {
                    dcol.noalias() = kmat.transpose() * gy;
                    detail::col2vol_add(dcol, input.grad().data() + bi * cin * ipix, cin, d, h, w,
                                        k, st, pd, od, oh, ow);
                }
            }
        });
    }
    return out;
}

// input [b,c_in,h,w], kernel [c_in,c_out,k,k], optional bias [c_out]
// -> [b,c_out,h',w'] with h' = (h-1)*stride + k - 2*pad.
// Forward is the exact adjoint of the conv2d input gradient for the same kernel.
template <typename S>
Tensor<S> conv_transpose2d(const Tensor<S>& input, const Tensor<S>& kernel, int stride, int pad,
                           const Tensor<S>& bias = {}) {
    if (input.rank() != 4) throw InvalidShape("conv_transpose2d: input must be [b,c,h,w]");
    if (kernel.rank() != 4 || kernel.dim(2) != kernel.dim(3))
        throw InvalidShape("conv_transpose2d: kernel must be [c_in,c_out,k,k]");
    if (kernel.dim(0) != input.dim(1))
        throw ShapeMismatch("conv_transpose2d: input channels " + std::to_string(input.dim(1)) +
                            " vs kernel channels " + std::to_string(kernel.dim(0)));
    if (stride < 1) throw InvalidConfig("conv_transpose2d: stride must be >= 1");

    const Extent batch = input.dim(0), cin = input.dim(1), h = input.dim(2), w = input.dim(3);
    const Extent cout = kernel.dim(1), k = kernel.dim(2);
    const Extent out_h = (h - 1) * stride + k - 2 * pad;
    const Extent out_w = (w - 1) * stride + k - 2 * pad;
    if (out_h < 1 || out_w < 1)
        throw ShapeMismatch("conv_transpose2d: output extent collapses to zero");
    if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != cout))
        throw ShapeMismatch("conv_transpose2d: bias must be [c_out]");

    const Extent patch = cout * k * k;
    const Extent ipix = h * w, opix = out_h * out_w;

    Tensor<S> out = Tensor<S>::zeros({batch, cout, out_h, out_w});
    detail::ConstMapR<S> kmat(kernel.data(), cin, patch);
    detail::MatR<S> col;
    for (Extent bi = 0; bi < batch; ++bi) {
        detail::ConstMapR<S> in(input.data() + bi * cin * ipix, cin, ipix);
        col.noalias() = kmat.transpose() * in;
        detail::col2im_add(col, out.data() + bi * cout * opix, cout, out_h, out_w, k, stride, pad,
                           h, w);
        if (bias.defined()) {
            detail::MapR<S> o(out.data() + bi * cout * opix, cout, opix);
            for (Extent co = 0; co < cout; ++co) o.row(co).array() += bias[co];
        }
    }

    if (detail::track(input) || detail::track(kernel) || (bias.defined() && detail::track(bias))) {
        out.set_requires_grad(true);
        detail::record_op<S>([input, kernel, bias, out, stride, pad]() mutable {
            if (!out.grad_allocated()) return;
            const Extent batch = input.dim(0), cin = input.dim(1), h = input.dim(2),
                         w = input.dim(3);
            const Extent cout = kernel.dim(1), k = kernel.dim(2);
            const Extent out_h = out.dim(2), out_w = out.dim(3);
            const Extent patch = cout * k * k;
            const Extent ipix = h * w, opix = out_h * out_w;
            detail::ConstMapR<S> kmat(kernel.data(), cin, patch);
            detail::MatR<S> colg;
            for (Extent bi = 0; bi < batch; ++bi) {
                detail::im2col(out.grad().data() + bi * cout * opix, cout, out_h, out_w, k, stride,
                               pad, h, w, colg);
                if (input.requires_grad()) {
                    detail::MapR<S> gi(input.grad().data() + bi * cin * ipix, cin, ipix);
                    gi.noalias() += kmat * colg.transpose();
                }
                if (kernel.requires_grad()) {
                    detail::ConstMapR<S> in(input.data() + bi * cin * ipix, cin, ipix);
                    detail::MapR<S> gk(kernel.grad().data(), cin, patch);
                    gk.noalias() += in * colg.transpose();
                }
                if (bias.defined() && bias.requires_grad()) {
                    detail::ConstMapR<S> gy(out.grad().data() + bi * cout * opix, cout, opix);
                    for (Extent co = 0; co < cout; ++co) bias.grad()[co] += gy.row(co).sum();
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// batch normalization
// ---------------------------------------------------------------------------

enum class BatchNormMode { batch_stats, running_stats };

template <typename S>
struct RunningStats {
    Tensor<S> mean, var;

    RunningStats() = default;
    explicit RunningStats(Extent channels)
        : mean(Tensor<S>::zeros({channels})), var(Tensor<S>::ones({channels})) {}
};

// Per-channel normalization over batch and spatial axes (channel axis 1),
// affine transform by gamma/beta, differentiable through the batch
// statistics. In running_stats mode the stored averages are used instead.
template <typename S>
Tensor<S> batch_norm(const Tensor<S>& input, const Tensor<S>& gamma, const Tensor<S>& beta,
                     BatchNormMode mode, S eps, RunningStats<S>* running = nullptr,
                     S momentum = S(0.1), bool update_running = false) {
    if (input.rank() < 2) throw InvalidShape("batch_norm: input must have a channel axis");
    const Extent batch = input.dim(0), c = input.dim(1);
    if (gamma.size() != c || beta.size() != c)
        throw ShapeMismatch("batch_norm: gamma/beta must have one entry per channel");
    Extent sp = 1;
    for (int i = 2; i < input.rank(); ++i) sp *= input.dim(i);
    const Extent n = batch * sp;

    using Array = typename Tensor<S>::Array;
    Array mean_c(c), invstd_c(c);

    if (mode == BatchNormMode::batch_stats) {
        for (Extent ci = 0; ci < c; ++ci) {
            S m = 0;
            for (Extent bi = 0; bi < batch; ++bi)
                m += Eigen::Map<const Array>(input.data() + (bi * c + ci) * sp, sp).sum();
            m /= static_cast<S>(n);
            S v = 0;
            for (Extent bi = 0; bi < batch; ++bi)
                v += (Eigen::Map<const Array>(input.data() + (bi * c + ci) * sp, sp) - m)
                         .square()
                         .sum();
            v /= static_cast<S>(n);
            mean_c[ci] = m;
            invstd_c[ci] = S(1) / std::sqrt(v + eps);
            if (running && update_running) {
                running->mean.values()[ci] =
                    (S(1) - momentum) * running->mean.values()[ci] + momentum * m;
                running->var.values()[ci] =
                    (S(1) - momentum) * running->var.values()[ci] + momentum * v;
            }
        }
    } else {
        if (!running) throw InvalidConfig("batch_norm: running_stats mode needs running averages");
        for (Extent ci = 0; ci < c; ++ci) {
            mean_c[ci] = running->mean.values()[ci];
            invstd_c[ci] = S(1) / std::sqrt(running->var.values()[ci] + eps);
        }
    }

    Tensor<S> out = Tensor<S>::zeros(input.shape());
    Array xhat(input.size());
    for (Extent bi = 0; bi < batch; ++bi) {
        for (Extent ci = 0; ci < c; ++ci) {
            const Extent off = (bi * c + ci) * sp;
            Eigen::Map<const Array> x(input.data() + off, sp);
            Eigen::Map<Array> xh(xhat.data() + off, sp);
            Eigen::Map<Array> y(out.data() + off, sp);
            xh = (x - mean_c[ci]) * invstd_c[ci];
            y = xh * gamma[ci] + beta[ci];
        }
    }

    if (detail::track(input) || detail::track(gamma) || detail::track(beta)) {
        out.set_requires_grad(true);
        const bool through_stats = (mode == BatchNormMode::batch_stats);
        detail::record_op<S>(
            [input, gamma, beta, out, xhat = std::move(xhat), invstd_c, sp, through_stats]() mutable {
                if (!out.grad_allocated()) return;
                const Extent batch = input.dim(0), c = input.dim(1);
                const S n = static_cast<S>(batch * sp);
                for (Extent ci = 0; ci < c; ++ci) {
                    S sum_gy = 0, sum_gy_xhat = 0;
                    for (Extent bi = 0; bi < batch; ++bi) {
                        const Extent off = (bi * c + ci) * sp;
                        Eigen::Map<const Array> gy(out.grad().data() + off, sp);
                        Eigen::Map<const Array> xh(xhat.data() + off, sp);
                        sum_gy += gy.sum();
                        sum_gy_xhat += (gy * xh).sum();
                    }
                    if (beta.requires_grad()) beta.grad()[ci] += sum_gy;
                    if (gamma.requires_grad()) gamma.grad()[ci] += sum_gy_xhat;
                    if (input.requires_grad()) {
                        const S g = gamma[ci] * invstd_c[ci];
                        for (Extent bi = 0; bi < batch; ++bi) {
                            const Extent off = (bi * c + ci) * sp;
                            Eigen::Map<const Array> gy(out.grad().data() + off, sp);
                            Eigen::Map<const Array> xh(xhat.data() + off, sp);
                            Eigen::Map<Array> gx(input.grad().data() + off, sp);
                            if (through_stats)
                                gx += (g / n) * (n * gy - sum_gy - xh * sum_gy_xhat);
                            else
                                gx += g * gy;
                        }
                    }
                }
            });
    }
    return out;
}

// ---------------------------------------------------------------------------
// dropout
// ---------------------------------------------------------------------------

// Inverted dropout: zeroes each element with probability `rate` and scales
// survivors by 1/(1-rate), so the disabled path is the exact identity.
template <typename S>
Tensor<S> dropout(const Tensor<S>& input, S rate, std::uint64_t seed, bool enabled) {
    if (rate < S(0) || rate >= S(1)) throw InvalidRate("dropout rate must be in [0,1)");

    using Array = typename Tensor<S>::Array;
    Array mask;
    if (enabled && rate > S(0)) {
        mask.resize(input.size());
        std::mt19937_64 rng(seed);
        std::uniform_real_distribution<double> u(0.0, 1.0);
        const S keep_scale = S(1) / (S(1) - rate);
        for (Extent i = 0; i < input.size(); ++i)
            mask[i] = (u(rng) < static_cast<double>(rate)) ? S(0) : keep_scale;
    }

    Tensor<S> out = mask.size() ? Tensor<S>::from_array(input.shape(), input.values() * mask)
                                : Tensor<S>::from_array(input.shape(), input.values());
    if (detail::track(input)) {
        out.set_requires_grad(true);
        detail::record_op<S>([input, out, mask = std::move(mask)]() mutable {
            if (!out.grad_allocated()) return;
            if (mask.size())
                input.grad() += out.grad() * mask;
            else
                input.grad() += out.grad();
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// logit losses
// ---------------------------------------------------------------------------

// mean_i [ max(s_i,0) - s_i*label + log(1+exp(-|s_i|)) ]; the log-sum-exp
// form of BCE on raw scores, finite for any finite input.
template <typename S>
Tensor<S> bce_with_logits_mean(const Tensor<S>& scores, S label) {
    using Array = typename Tensor<S>::Array;
    const Array& s = scores.values();
    Array loss = s.max(S(0)) - s * label + (-s.abs()).exp().log1p();
    Tensor<S> out = Tensor<S>::scalar(loss.sum() / static_cast<S>(scores.size()));
    if (detail::track(scores)) {
        out.set_requires_grad(true);
        detail::record_op<S>([scores, out, label]() mutable {
            if (!out.grad_allocated()) return;
            const Array& s = scores.values();
            const Array sig = ((s * S(0.5)).tanh() + S(1)) * S(0.5);
            scores.grad() += (out.grad()[0] / static_cast<S>(scores.size())) * (sig - label);
        });
    }
    return out;
}

}  // namespace octgan

#endif
