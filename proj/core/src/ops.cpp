#include "pymx/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include <Eigen/Core>
#include <fmt/format.h>

#include "pymx/error.hpp"

namespace pymx {

namespace {

template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapM = Eigen::Map<Mat<T>>;
template <typename T>
using CMapM = Eigen::Map<const Mat<T>>;
template <typename T>
using RowVec = Eigen::Matrix<T, 1, Eigen::Dynamic>;

template <typename T>
using NodePtr = std::shared_ptr<detail::Node<T>>;

template <typename T>
MapM<T> as_matrix(Buffer<T>& v, std::int64_t rows, std::int64_t cols) {
    return MapM<T>(v.data(), rows, cols);
}

template <typename T>
CMapM<T> as_matrix(const Buffer<T>& v, std::int64_t rows, std::int64_t cols) {
    return CMapM<T>(v.data(), rows, cols);
}

template <typename T>
using Arr = Eigen::Array<T, Eigen::Dynamic, 1>;
template <typename T>
using ArrM = Eigen::Array<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename T>
Eigen::Map<Arr<T>> as_array(Buffer<T>& v) {
    return Eigen::Map<Arr<T>>(v.data(), static_cast<Eigen::Index>(v.size()));
}

template <typename T>
Eigen::Map<const Arr<T>> as_array(const Buffer<T>& v) {
    return Eigen::Map<const Arr<T>>(v.data(), static_cast<Eigen::Index>(v.size()));
}

template <typename T>
Eigen::Map<ArrM<T>> as_rows(Buffer<T>& v, std::int64_t rows, std::int64_t cols) {
    return Eigen::Map<ArrM<T>>(v.data(), rows, cols);
}

template <typename T>
Eigen::Map<const ArrM<T>> as_rows(const Buffer<T>& v, std::int64_t rows, std::int64_t cols) {
    return Eigen::Map<const ArrM<T>>(v.data(), rows, cols);
}

// Values are left uninitialised; every op writes its whole output.
template <typename T>
Tensor<T> make_output(Shape shape, std::initializer_list<const Tensor<T>*> inputs) {
    auto node = std::make_shared<detail::Node<T>>();
    node->data.resize(static_cast<std::size_t>(numel(shape)));
    node->shape = std::move(shape);
    if (grad_enabled()) {
        for (const auto* in : inputs) {
            if (in->defined() && in->requires_grad()) node->requires_grad = true;
        }
        if (node->requires_grad) {
            for (const auto* in : inputs) {
                if (in->defined()) node->parents.push_back(in->node());
            }
        }
    }
    return Tensor<T>(std::move(node));
}

template <typename T>
bool wants_grad(const NodePtr<T>& n) {
    return n && n->requires_grad;
}

template <typename T>
void check_finite([[maybe_unused]] const Tensor<T>& out, [[maybe_unused]] const char* op) {
#ifndef NDEBUG
    for (auto v : out.values()) {
        if (!std::isfinite(v)) throw DivergenceError(fmt::format("{} produced a non-finite value", op));
    }
#endif
}

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw DimensionError(fmt::format("{}: shape mismatch {} vs {}", op, shape_string(a.shape()),
                                         shape_string(b.shape())));
    }
}

template <typename T>
void require_vector(const Tensor<T>& v, std::int64_t n, const char* op, const char* what) {
    if (v.rank() != 1 || v.dim(0) != n) {
        throw DimensionError(fmt::format("{}: {} must have shape [{}], got {}", op, what, n, shape_string(v.shape())));
    }
}

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;

}  // namespace

Activation parse_activation(std::string_view name) {
    if (name == "gelu") return Activation::gelu;
    if (name == "swish") return Activation::swish;
    throw ConfigError(fmt::format("unknown activation '{}' (expected gelu or swish)", name));
}

std::string_view to_string(Activation a) noexcept { return a == Activation::gelu ? "gelu" : "swish"; }

double gelu_reference(double x) noexcept {
    return 0.5 * x * (1.0 + std::tanh(kGeluC * (x + kGeluA * x * x * x)));
}

double swish_reference(double x) noexcept { return x / (1.0 + std::exp(-x)); }

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    require_same_shape(a, b, "add");
    auto out = make_output<T>(a.shape(), {&a, &b});
    auto& y = out.values();
    const auto& av = a.values();
    const auto& bv = b.values();
    as_array(y) = as_array(av) + as_array(bv);
    if (out.requires_grad()) {
        out.node()->backward = [an = a.node(), bn = b.node()](detail::Node<T>& self) {
            for (auto* n : {an.get(), bn.get()}) {
                if (n->requires_grad) as_array(n->grad) += as_array(std::as_const(self.grad));
            }
        };
    }
    return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    require_same_shape(a, b, "mul");
    auto out = make_output<T>(a.shape(), {&a, &b});
    auto& y = out.values();
    const auto& av = a.values();
    const auto& bv = b.values();
    as_array(y) = as_array(av) * as_array(bv);
    if (out.requires_grad()) {
        out.node()->backward = [an = a.node(), bn = b.node()](detail::Node<T>& self) {
            const auto g = as_array(std::as_const(self.grad));
            if (an->requires_grad) as_array(an->grad) += g * as_array(std::as_const(bn->data));
            if (bn->requires_grad) as_array(bn->grad) += g * as_array(std::as_const(an->data));
        };
    }
    return out;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
    auto out = make_output<T>(a.shape(), {&a});
    auto& y = out.values();
    const auto& av = a.values();
    as_array(y) = as_array(av) * factor;
    if (out.requires_grad()) {
        out.node()->backward = [an = a.node(), factor](detail::Node<T>& self) {
            as_array(an->grad) += as_array(std::as_const(self.grad)) * factor;
        };
    }
    return out;
}

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
    auto out = make_output<T>({1}, {&a});
    T total = 0;
    for (auto v : a.values()) total += v;
    out.values()[0] = total;
    if (out.requires_grad()) {
        out.node()->backward = [an = a.node()](detail::Node<T>& self) {
            for (auto& g : an->grad) g += self.grad[0];
        };
    }
    return out;
}

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
        throw DimensionError(fmt::format("matmul: cannot multiply {} by {}", shape_string(a.shape()),
                                         shape_string(b.shape())));
    }
    const auto m = a.dim(0), k = a.dim(1), n = b.dim(1);
    auto out = make_output<T>({m, n}, {&a, &b});
    as_matrix(out.values(), m, n).noalias() = as_matrix(a.values(), m, k) * as_matrix(b.values(), k, n);
    add_macs(static_cast<std::uint64_t>(m * k * n));
    if (out.requires_grad()) {
        out.node()->backward = [an = a.node(), bn = b.node(), m, k, n](detail::Node<T>& self) {
            auto g = as_matrix(std::as_const(self.grad), m, n);
            if (an->requires_grad) {
                as_matrix(an->grad, m, k).noalias() += g * as_matrix(std::as_const(bn->data), k, n).transpose();
            }
            if (bn->requires_grad) {
                as_matrix(bn->grad, k, n).noalias() += as_matrix(std::as_const(an->data), m, k).transpose() * g;
            }
        };
    }
    check_finite(out, "matmul");
    return out;
}

template <typename T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(1)) {
        throw DimensionError(fmt::format("matmul_nt: cannot multiply {} by transpose of {}",
                                         shape_string(a.shape()), shape_string(b.shape())));
    }
    const auto m = a.dim(0), k = a.dim(1), n = b.dim(0);
    auto out = make_output<T>({m, n}, {&a, &b});
    as_matrix(out.values(), m, n).noalias() =
        as_matrix(a.values(), m, k) * as_matrix(b.values(), n, k).transpose();
    add_macs(static_cast<std::uint64_t>(m * k * n));
    if (out.requires_grad()) {
        out.node()->backward = [an = a.node(), bn = b.node(), m, k, n](detail::Node<T>& self) {
            auto g = as_matrix(std::as_const(self.grad), m, n);
            if (an->requires_grad) {
                as_matrix(an->grad, m, k).noalias() += g * as_matrix(std::as_const(bn->data), n, k);
            }
            if (bn->requires_grad) {
                as_matrix(bn->grad, n, k).noalias() += g.transpose() * as_matrix(std::as_const(an->data), m, k);
            }
        };
    }
    check_finite(out, "matmul_nt");
    return out;
}

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias) {
    if (w.rank() != 2 || x.dim(-1) != w.dim(0)) {
        throw DimensionError(fmt::format("linear: input {} does not match weight {}", shape_string(x.shape()),
                                         shape_string(w.shape())));
    }
    const auto in = w.dim(0), outw = w.dim(1);
    if (bias.defined()) require_vector(bias, outw, "linear", "bias");
    const auto rows = x.numel() / in;
    Shape shape = x.shape();
    shape.back() = outw;
    auto out = make_output<T>(std::move(shape), {&x, &w, &bias});
    auto y = as_matrix(out.values(), rows, outw);
    y.noalias() = as_matrix(x.values(), rows, in) * as_matrix(w.values(), in, outw);
    if (bias.defined()) {
        y.rowwise() += Eigen::Map<const RowVec<T>>(bias.values().data(), outw);
    }
    add_macs(static_cast<std::uint64_t>(rows * in * outw));
    if (out.requires_grad()) {
        out.node()->backward = [xn = x.node(), wn = w.node(), bn = bias.node(), rows, in,
                                outw](detail::Node<T>& self) {
            auto g = as_matrix(std::as_const(self.grad), rows, outw);
            if (xn->requires_grad) {
                as_matrix(xn->grad, rows, in).noalias() += g * as_matrix(std::as_const(wn->data), in, outw).transpose();
            }
            if (wn->requires_grad) {
                as_matrix(wn->grad, in, outw).noalias() +=
                    as_matrix(std::as_const(xn->data), rows, in).transpose() * g;
            }
            if (wants_grad(bn)) {
                Eigen::Map<RowVec<T>>(bn->grad.data(), outw) += g.colwise().sum();
            }
        };
    }
    check_finite(out, "linear");
    return out;
}

template <typename T>
Tensor<T> token_linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias) {
    if ((x.rank() != 2 && x.rank() != 3) || w.rank() != 2 || x.dim(-2) != w.dim(0)) {
        throw DimensionError(fmt::format("token_linear: input {} does not match weight {}",
                                         shape_string(x.shape()), shape_string(w.shape())));
    }
    const auto batch = x.rank() == 3 ? x.dim(0) : 1;
    const auto lin = w.dim(0), lout = w.dim(1), width = x.dim(-1);
    if (bias.defined()) require_vector(bias, lout, "token_linear", "bias");
    Shape shape = x.shape();
    shape[shape.size() - 2] = lout;
    auto out = make_output<T>(std::move(shape), {&x, &w, &bias});
    auto wm = as_matrix(w.values(), lin, lout);
    for (std::int64_t b = 0; b < batch; ++b) {
        auto xb = CMapM<T>(x.values().data() + b * lin * width, lin, width);
        auto yb = MapM<T>(out.values().data() + b * lout * width, lout, width);
        yb.noalias() = wm.transpose() * xb;
        if (bias.defined()) {
            yb.colwise() += Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>>(bias.values().data(), lout);
        }
    }
    add_macs(static_cast<std::uint64_t>(batch * lin * lout * width));
    if (out.requires_grad()) {
        out.node()->backward = [xn = x.node(), wn = w.node(), bn = bias.node(), batch, lin, lout,
                                width](detail::Node<T>& self) {
            auto wm = as_matrix(std::as_const(wn->data), lin, lout);
            for (std::int64_t b = 0; b < batch; ++b) {
                auto gb = CMapM<T>(self.grad.data() + b * lout * width, lout, width);
                if (xn->requires_grad) {
                    MapM<T>(xn->grad.data() + b * lin * width, lin, width).noalias() += wm * gb;
                }
                if (wn->requires_grad) {
                    auto xb = CMapM<T>(xn->data.data() + b * lin * width, lin, width);
                    as_matrix(wn->grad, lin, lout).noalias() += xb * gb.transpose();
                }
                if (wants_grad(bn)) {
                    Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>>(bn->grad.data(), lout) += gb.rowwise().sum();
                }
            }
        };
    }
    check_finite(out, "token_linear");
    return out;
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps) {
    const auto width = x.dim(-1);
    if (width < 2) {
        throw DimensionError("layer_norm: last axis must have at least 2 entries, got " + shape_string(x.shape()));
    }
    require_vector(gamma, width, "layer_norm", "gamma");
    require_vector(beta, width, "layer_norm", "beta");
    const auto rows = x.numel() / width;
    auto out = make_output<T>(x.shape(), {&x, &gamma, &beta});
    Buffer<T> xhat(x.values().size());
    Buffer<T> inv_std(static_cast<std::size_t>(rows));
    {
        const auto xm = as_rows(x.values(), rows, width);
        auto xh = as_rows(xhat, rows, width);
        auto inv = as_array(inv_std);
        const Arr<T> mean = xm.rowwise().mean();
        xh = xm.colwise() - mean;
        inv = ((xh.square().rowwise().sum() / static_cast<T>(width)) + eps).rsqrt();
        xh.colwise() *= inv;
        const auto gv = Eigen::Map<const Eigen::Array<T, 1, Eigen::Dynamic>>(gamma.values().data(), width);
        const auto bv = Eigen::Map<const Eigen::Array<T, 1, Eigen::Dynamic>>(beta.values().data(), width);
        as_rows(out.values(), rows, width) = (xh.rowwise() * gv).rowwise() + bv;
    }
    if (out.requires_grad()) {
        out.node()->backward = [xn = x.node(), gn = gamma.node(), bn = beta.node(), xhat = std::move(xhat),
                                inv_std = std::move(inv_std), rows, width](detail::Node<T>& self) {
            const auto g = as_rows(std::as_const(self.grad), rows, width);
            const auto xh = as_rows(xhat, rows, width);
            if (gn->requires_grad) {
                Eigen::Map<Eigen::Array<T, 1, Eigen::Dynamic>>(gn->grad.data(), width) += (g * xh).colwise().sum();
            }
            if (bn->requires_grad) {
                Eigen::Map<Eigen::Array<T, 1, Eigen::Dynamic>>(bn->grad.data(), width) += g.colwise().sum();
            }
            if (!xn->requires_grad) return;
            const auto gv = Eigen::Map<const Eigen::Array<T, 1, Eigen::Dynamic>>(gn->data.data(), width);
            const ArrM<T> dxhat = g.rowwise() * gv;
            const Arr<T> mean_d = dxhat.rowwise().mean();
            const Arr<T> mean_dx = (dxhat * xh).rowwise().mean();
            as_rows(xn->grad, rows, width) +=
                ((dxhat.colwise() - mean_d) - xh.colwise() * mean_dx).colwise() * as_array(inv_std);
        };
    }
    check_finite(out, "layer_norm");
    return out;
}

template <typename T>
Tensor<T> activation(const Tensor<T>& x, Activation kind) {
    auto out = make_output<T>(x.shape(), {&x});
    const auto xv = as_array(x.values());
    auto y = as_array(out.values());
    // For gelu, `aux` keeps tanh(c (x + a x^3)); for swish, sigmoid(x).
    Buffer<T> aux(x.values().size());
    auto t = as_array(aux);
    if (kind == Activation::gelu) {
        const T c = static_cast<T>(kGeluC), a = static_cast<T>(kGeluA);
        t = (c * (xv + a * xv.cube())).tanh();
        y = T(0.5) * xv * (T(1) + t);
    } else {
        t = xv.logistic();
        y = xv * t;
    }
    if (out.requires_grad()) {
        out.node()->backward = [xn = x.node(), kind, aux = std::move(aux)](detail::Node<T>& self) {
            const auto v = as_array(std::as_const(xn->data));
            const auto t = as_array(aux);
            const auto g = as_array(std::as_const(self.grad));
            const T c = static_cast<T>(kGeluC), a = static_cast<T>(kGeluA);
            if (kind == Activation::gelu) {
                as_array(xn->grad) +=
                    g * (T(0.5) * (T(1) + t) + T(0.5) * c * v * (T(1) - t.square()) * (T(1) + T(3) * a * v.square()));
            } else {
                as_array(xn->grad) += g * (t + v * t * (T(1) - t));
            }
        };
    }
    check_finite(out, "activation");
    return out;
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
    auto out = make_output<T>(x.shape(), {&x});
    const auto& xv = x.values();
    auto& y = out.values();
    as_array(y) = as_array(xv).logistic();
    if (out.requires_grad()) {
        out.node()->backward = [xn = x.node()](detail::Node<T>& self) {
            const auto s = as_array(std::as_const(self.data));
            as_array(xn->grad) += as_array(std::as_const(self.grad)) * s * (T(1) - s);
        };
    }
    return out;
}

template <typename T>
Tensor<T> convex_mix(const Tensor<T>& alpha, const Tensor<T>& a, const Tensor<T>& b) {
    require_same_shape(a, b, "convex_mix");
    Shape expect = a.shape();
    expect.back() = 1;
    if (alpha.shape() != expect) {
        throw DimensionError(fmt::format("convex_mix: gate shape {} does not match {}", shape_string(alpha.shape()),
                                         shape_string(expect)));
    }
    const auto width = a.dim(-1);
    const auto rows = a.numel() / width;
    auto out = make_output<T>(a.shape(), {&alpha, &a, &b});
    {
        const auto w = as_array(alpha.values());
        const auto av = as_rows(a.values(), rows, width);
        const auto bv = as_rows(b.values(), rows, width);
        as_rows(out.values(), rows, width) = av.colwise() * w + bv.colwise() * (T(1) - w);
    }
    if (out.requires_grad()) {
        out.node()->backward = [aln = alpha.node(), an = a.node(), bn = b.node(), rows, width](detail::Node<T>& self) {
            const auto g = as_rows(std::as_const(self.grad), rows, width);
            const auto w = as_array(std::as_const(aln->data));
            if (aln->requires_grad) {
                as_array(aln->grad) +=
                    (g * (as_rows(std::as_const(an->data), rows, width) - as_rows(std::as_const(bn->data), rows, width)))
                        .rowwise()
                        .sum();
            }
            if (an->requires_grad) as_rows(an->grad, rows, width) += g.colwise() * w;
            if (bn->requires_grad) as_rows(bn->grad, rows, width) += g.colwise() * (T(1) - w);
        };
    }
    return out;
}

std::int64_t conv1d_output_length(std::int64_t length, std::int64_t kernel, std::int64_t stride,
                                  std::int64_t padding) noexcept {
    const auto span = length + 2 * padding - kernel;
    if (span < 0 || stride <= 0) return 0;
    return span / stride + 1;
}

template <typename T>
Tensor<T> conv1d(const Tensor<T>& x, const Tensor<T>& kernels, const Tensor<T>& bias, std::int64_t stride,
                 std::int64_t padding) {
    if ((x.rank() != 2 && x.rank() != 3) || kernels.rank() != 3 || x.dim(-1) != kernels.dim(1)) {
        throw DimensionError(fmt::format("conv1d: input {} does not match kernels {}", shape_string(x.shape()),
                                         shape_string(kernels.shape())));
    }
    const auto ksize = kernels.dim(0), din = kernels.dim(1), dout = kernels.dim(2);
    if (ksize % 2 == 0) throw DimensionError(fmt::format("conv1d: kernel size must be odd, got {}", ksize));
    if (stride < 1 || padding < 0) {
        throw DimensionError(fmt::format("conv1d: invalid stride {} / padding {}", stride, padding));
    }
    if (bias.defined()) require_vector(bias, dout, "conv1d", "bias");
    const auto batch = x.rank() == 3 ? x.dim(0) : 1;
    const auto len = x.dim(-2);
    const auto out_len = conv1d_output_length(len, ksize, stride, padding);
    if (out_len < 1) {
        throw SequenceTooShortError(fmt::format("conv1d: length {} too short for kernel {} with padding {}", len,
                                                ksize, padding));
    }
    Shape shape = x.shape();
    shape[shape.size() - 2] = out_len;
    shape.back() = dout;
    auto out = make_output<T>(std::move(shape), {&x, &kernels, &bias});

    // Per kernel tap: (output row, input row) pairs that fall inside the sequence.
    std::vector<std::vector<std::pair<std::int64_t, std::int64_t>>> taps(static_cast<std::size_t>(ksize));
    for (std::int64_t k = 0; k < ksize; ++k) {
        auto& list = taps[static_cast<std::size_t>(k)];
        for (std::int64_t b = 0; b < batch; ++b) {
            for (std::int64_t j = 0; j < out_len; ++j) {
                const auto i = j * stride - padding + k;
                if (i >= 0 && i < len) list.emplace_back(b * out_len + j, b * len + i);
            }
        }
    }

    auto y = as_matrix(out.values(), batch * out_len, dout);
    y.setZero();
    const auto& xv = x.values();
    Mat<T> gathered;
    Mat<T> partial;
    for (std::int64_t k = 0; k < ksize; ++k) {
        const auto& list = taps[static_cast<std::size_t>(k)];
        const auto n = static_cast<std::int64_t>(list.size());
        if (n == 0) continue;
        gathered.resize(n, din);
        for (std::int64_t r = 0; r < n; ++r) {
            gathered.row(r) = CMapM<T>(xv.data() + list[static_cast<std::size_t>(r)].second * din, 1, din);
        }
        partial.noalias() = gathered * CMapM<T>(kernels.values().data() + k * din * dout, din, dout);
        for (std::int64_t r = 0; r < n; ++r) y.row(list[static_cast<std::size_t>(r)].first) += partial.row(r);
        add_macs(static_cast<std::uint64_t>(n * din * dout));
    }
    if (bias.defined()) y.rowwise() += Eigen::Map<const RowVec<T>>(bias.values().data(), dout);

    if (out.requires_grad()) {
        out.node()->backward = [xn = x.node(), kn = kernels.node(), bn = bias.node(), taps = std::move(taps),
                                batch, out_len, din, dout, ksize](detail::Node<T>& self) {
            auto g = as_matrix(std::as_const(self.grad), batch * out_len, dout);
            Mat<T> gsel, xsel;
            for (std::int64_t k = 0; k < ksize; ++k) {
                const auto& list = taps[static_cast<std::size_t>(k)];
                const auto n = static_cast<std::int64_t>(list.size());
                if (n == 0) continue;
                gsel.resize(n, dout);
                for (std::int64_t r = 0; r < n; ++r) gsel.row(r) = g.row(list[static_cast<std::size_t>(r)].first);
                auto wk = CMapM<T>(kn->data.data() + k * din * dout, din, dout);
                if (kn->requires_grad) {
                    xsel.resize(n, din);
                    for (std::int64_t r = 0; r < n; ++r) {
                        xsel.row(r) = CMapM<T>(xn->data.data() + list[static_cast<std::size_t>(r)].second * din, 1, din);
                    }
                    MapM<T>(kn->grad.data() + k * din * dout, din, dout).noalias() += xsel.transpose() * gsel;
                }
                if (xn->requires_grad) {
                    Mat<T> dx = gsel * wk.transpose();
                    for (std::int64_t r = 0; r < n; ++r) {
                        MapM<T>(xn->grad.data() + list[static_cast<std::size_t>(r)].second * din, 1, din) += dx.row(r);
                    }
                }
            }
            if (wants_grad(bn)) Eigen::Map<RowVec<T>>(bn->grad.data(), dout) += g.colwise().sum();
        };
    }
    check_finite(out, "conv1d");
    return out;
}

template <typename T>
Tensor<T> embedding(const Tensor<T>& table, std::span<const std::int32_t> indices, const Shape& index_shape,
                    std::int32_t padding_index) {
    if (table.rank() != 2) throw DimensionError("embedding: table must be rank 2, got " + shape_string(table.shape()));
    if (numel(index_shape) != static_cast<std::int64_t>(indices.size())) {
        throw DimensionError(fmt::format("embedding: {} indices for index shape {}", indices.size(),
                                         shape_string(index_shape)));
    }
    const auto rows = table.dim(0), width = table.dim(1);
    for (std::size_t i = 0; i < indices.size(); ++i) {
        if (indices[i] < 0 || indices[i] >= rows) {
            throw DimensionError(fmt::format("embedding: index {} at position {} outside table of {} rows",
                                             indices[i], i, rows));
        }
    }
    Shape shape = index_shape;
    shape.push_back(width);
    auto out = make_output<T>(std::move(shape), {&table});
    auto& y = out.values();
    const auto& tv = table.values();
    for (std::size_t i = 0; i < indices.size(); ++i) {
        std::copy_n(tv.begin() + indices[i] * width, width, y.begin() + static_cast<std::int64_t>(i) * width);
    }
    if (out.requires_grad()) {
        out.node()->backward = [tn = table.node(), idx = std::vector<std::int32_t>(indices.begin(), indices.end()),
                                width, padding_index](detail::Node<T>& self) {
            for (std::size_t i = 0; i < idx.size(); ++i) {
                if (idx[i] == padding_index) continue;
                T* dst = tn->grad.data() + idx[i] * width;
                const T* src = self.grad.data() + static_cast<std::int64_t>(i) * width;
                for (std::int64_t d = 0; d < width; ++d) dst[d] += src[d];
            }
        };
    }
    return out;
}

template <typename T>
Tensor<T> concat_last(const std::vector<Tensor<T>>& parts) {
    if (parts.empty()) throw DimensionError("concat_last: no inputs");
    Shape lead = parts.front().shape();
    lead.pop_back();
    std::vector<std::int64_t> widths;
    std::int64_t total = 0;
    for (const auto& p : parts) {
        Shape s = p.shape();
        s.pop_back();
        if (s != lead) {
            throw DimensionError(fmt::format("concat_last: leading shape {} vs {}", shape_string(p.shape()),
                                             shape_string(parts.front().shape())));
        }
        widths.push_back(p.dim(-1));
        total += p.dim(-1);
    }
    Shape shape = lead;
    shape.push_back(total);
    const auto rows = numel(lead);
    auto out = make_output<T>(std::move(shape), {});
    bool rg = false;
    if (grad_enabled()) {
        for (const auto& p : parts) rg = rg || p.requires_grad();
    }
    auto& y = out.values();
    std::int64_t offset = 0;
    for (std::size_t p = 0; p < parts.size(); ++p) {
        const auto& pv = parts[p].values();
        for (std::int64_t r = 0; r < rows; ++r) {
            std::copy_n(pv.begin() + r * widths[p], widths[p], y.begin() + r * total + offset);
        }
        offset += widths[p];
    }
    if (rg) {
        auto on = out.node();
        on->requires_grad = true;
        std::vector<NodePtr<T>> nodes;
        for (const auto& p : parts) {
            on->parents.push_back(p.node());
            nodes.push_back(p.node());
        }
        on->backward = [nodes = std::move(nodes), widths = std::move(widths), rows, total](detail::Node<T>& self) {
            std::int64_t offset = 0;
            for (std::size_t p = 0; p < nodes.size(); ++p) {
                if (nodes[p]->requires_grad) {
                    for (std::int64_t r = 0; r < rows; ++r) {
                        T* dst = nodes[p]->grad.data() + r * widths[p];
                        const T* src = self.grad.data() + r * total + offset;
                        for (std::int64_t d = 0; d < widths[p]; ++d) dst[d] += src[d];
                    }
                }
                offset += widths[p];
            }
        };
    }
    return out;
}

template <typename T>
Tensor<T> masked_mean_pool(const Tensor<T>& x, std::span<const std::uint8_t> mask) {
    if (x.rank() != 3) throw DimensionError("masked_mean_pool: expected [B, L, D], got " + shape_string(x.shape()));
    const auto batch = x.dim(0), len = x.dim(1), width = x.dim(2);
    if (static_cast<std::int64_t>(mask.size()) != batch * len) {
        throw DimensionError(fmt::format("masked_mean_pool: mask of {} entries for {}", mask.size(),
                                         shape_string(x.shape())));
    }
    auto out = make_output<T>({batch, width}, {&x});
    std::vector<T> inv_count(static_cast<std::size_t>(batch), T(0));
    auto& y = out.values();
    std::fill(y.begin(), y.end(), T(0));
    const auto& xv = x.values();
    for (std::int64_t b = 0; b < batch; ++b) {
        std::int64_t count = 0;
        for (std::int64_t l = 0; l < len; ++l) {
            if (!mask[static_cast<std::size_t>(b * len + l)]) continue;
            ++count;
            for (std::int64_t d = 0; d < width; ++d) {
                y[static_cast<std::size_t>(b * width + d)] += xv[static_cast<std::size_t>((b * len + l) * width + d)];
            }
        }
        if (count == 0) continue;
        const T inv = T(1) / static_cast<T>(count);
        inv_count[static_cast<std::size_t>(b)] = inv;
        for (std::int64_t d = 0; d < width; ++d) y[static_cast<std::size_t>(b * width + d)] *= inv;
    }
    if (out.requires_grad()) {
        out.node()->backward = [xn = x.node(), m = std::vector<std::uint8_t>(mask.begin(), mask.end()),
                                inv_count = std::move(inv_count), batch, len, width](detail::Node<T>& self) {
            for (std::int64_t b = 0; b < batch; ++b) {
                const T inv = inv_count[static_cast<std::size_t>(b)];
                for (std::int64_t l = 0; l < len; ++l) {
                    if (!m[static_cast<std::size_t>(b * len + l)]) continue;
                    for (std::int64_t d = 0; d < width; ++d) {
                        xn->grad[static_cast<std::size_t>((b * len + l) * width + d)] +=
                            self.grad[static_cast<std::size_t>(b * width + d)] * inv;
                    }
                }
            }
        };
    }
    return out;
}

template <typename T>
Tensor<T> softmax_cross_entropy(const Tensor<T>& logits, std::span<const std::int32_t> targets,
                                std::span<const std::uint8_t> row_mask, std::int32_t first_class) {
    if (logits.rank() != 2) {
        throw DimensionError("softmax_cross_entropy: logits must be [B, V], got " + shape_string(logits.shape()));
    }
    const auto batch = logits.dim(0), classes = logits.dim(1);
    if (static_cast<std::int64_t>(targets.size()) != batch || static_cast<std::int64_t>(row_mask.size()) != batch) {
        throw DimensionError(fmt::format("softmax_cross_entropy: {} targets / {} mask entries for batch {}",
                                         targets.size(), row_mask.size(), batch));
    }
    if (first_class < 0 || first_class >= classes) {
        throw ContractError(fmt::format("softmax_cross_entropy: first class {} outside [0, {})", first_class, classes));
    }
    std::int64_t active = 0;
    for (std::int64_t b = 0; b < batch; ++b) {
        if (!row_mask[static_cast<std::size_t>(b)]) continue;
        ++active;
        const auto t = targets[static_cast<std::size_t>(b)];
        if (t < first_class || t >= classes) {
            throw ContractError(fmt::format("softmax_cross_entropy: target {} of row {} outside [{}, {})", t, b,
                                            first_class, classes));
        }
    }
    if (active == 0) throw ContractError("softmax_cross_entropy: every row is masked");

    auto out = make_output<T>({1}, {&logits});
    std::vector<T> probs(static_cast<std::size_t>(batch * classes), T(0));
    const auto& z = logits.values();
    T total = 0;
    for (std::int64_t b = 0; b < batch; ++b) {
        if (!row_mask[static_cast<std::size_t>(b)]) continue;
        const T* row = z.data() + b * classes;
        T mx = row[first_class];
        for (auto c = first_class; c < classes; ++c) mx = std::max(mx, row[c]);
        T s = 0;
        for (auto c = first_class; c < classes; ++c) s += std::exp(row[c] - mx);
        const T lse = mx + std::log(s);
        for (auto c = first_class; c < classes; ++c) {
            probs[static_cast<std::size_t>(b * classes + c)] = std::exp(row[c] - lse);
        }
        total += lse - row[targets[static_cast<std::size_t>(b)]];
    }
    const T inv_active = T(1) / static_cast<T>(active);
    out.values()[0] = total * inv_active;
    if (out.requires_grad()) {
        out.node()->backward = [zn = logits.node(), probs = std::move(probs),
                                t = std::vector<std::int32_t>(targets.begin(), targets.end()),
                                m = std::vector<std::uint8_t>(row_mask.begin(), row_mask.end()), batch, classes,
                                first_class, inv_active](detail::Node<T>& self) {
            const T g = self.grad[0] * inv_active;
            for (std::int64_t b = 0; b < batch; ++b) {
                if (!m[static_cast<std::size_t>(b)]) continue;
                T* dst = zn->grad.data() + b * classes;
                const T* p = probs.data() + b * classes;
                for (auto c = first_class; c < classes; ++c) dst[c] += g * p[c];
                dst[t[static_cast<std::size_t>(b)]] -= g;
            }
        };
    }
    check_finite(out, "softmax_cross_entropy");
    return out;
}

#define PYMX_INSTANTIATE_OPS(T)                                                                              \
    template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                              \
    template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                              \
    template Tensor<T> scale(const Tensor<T>&, T);                                                           \
    template Tensor<T> sum(const Tensor<T>&);                                                                \
    template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                                           \
    template Tensor<T> matmul_nt(const Tensor<T>&, const Tensor<T>&);                                        \
    template Tensor<T> linear(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);                         \
    template Tensor<T> token_linear(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);                   \
    template Tensor<T> layer_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T);                  \
    template Tensor<T> activation(const Tensor<T>&, Activation);                                             \
    template Tensor<T> sigmoid(const Tensor<T>&);                                                            \
    template Tensor<T> convex_mix(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);                     \
    template Tensor<T> conv1d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, std::int64_t,            \
                              std::int64_t);                                                                 \
    template Tensor<T> embedding(const Tensor<T>&, std::span<const std::int32_t>, const Shape&, std::int32_t); \
    template Tensor<T> concat_last(const std::vector<Tensor<T>>&);                                           \
    template Tensor<T> masked_mean_pool(const Tensor<T>&, std::span<const std::uint8_t>);                    \
    template Tensor<T> softmax_cross_entropy(const Tensor<T>&, std::span<const std::int32_t>,                \
                                             std::span<const std::uint8_t>, std::int32_t);

PYMX_INSTANTIATE_OPS(float)
PYMX_INSTANTIATE_OPS(double)

}  // namespace pymx
