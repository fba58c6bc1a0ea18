#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <vector>

#include "motionid/graph.hpp"

// Differentiable operations over Graph<T> values. Each op appends one node
// whose backward closure accumulates into its inputs' gradient buffers.
namespace motionid::num {

template <typename T>
using EMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using EMap = Eigen::Map<EMat<T>>;
template <typename T>
using ECMap = Eigen::Map<const EMat<T>>;

namespace detail {

// numpy-style right-aligned broadcast of two shapes
inline Shape broadcast_shape(const Shape& a, const Shape& b) {
    const std::size_t r = std::max(a.size(), b.size());
    Shape out(r);
    for (std::size_t i = 0; i < r; ++i) {
        const std::int64_t da = i < r - a.size() ? 1 : a[i - (r - a.size())];
        const std::int64_t db = i < r - b.size() ? 1 : b[i - (r - b.size())];
        if (da != db && da != 1 && db != 1)
            throw ShapeError("cannot broadcast " + shape_str(a) + " with " + shape_str(b));
        out[i] = std::max(da, db);
    }
    return out;
}

// strides of `shape` mapped onto the broadcast output dims (0 = broadcast)
inline std::vector<std::int64_t> broadcast_strides(const Shape& shape, const Shape& out) {
    std::vector<std::int64_t> strides(out.size(), 0);
    std::int64_t s = 1;
    for (std::size_t i = 0; i < shape.size(); ++i) {
        const std::size_t src = shape.size() - 1 - i;
        const std::size_t dst = out.size() - 1 - i;
        strides[dst] = (shape[src] == 1 && out[dst] != 1) ? 0 : s;
        s *= shape[src];
    }
    return strides;
}

// Odometer walk over the output space of a broadcast binary op; fn receives
// (flat out index, offset into a, offset into b).
template <typename Fn>
void for_each_bcast(const Shape& out, const std::vector<std::int64_t>& sa,
                    const std::vector<std::int64_t>& sb, Fn&& fn) {
    const std::int64_t total = numel(out);
    const int r = static_cast<int>(out.size());
    std::vector<std::int64_t> idx(out.size(), 0);
    std::int64_t oa = 0, ob = 0;
    for (std::int64_t i = 0; i < total; ++i) {
        fn(i, oa, ob);
        for (int d = r - 1; d >= 0; --d) {
            ++idx[static_cast<std::size_t>(d)];
            oa += sa[static_cast<std::size_t>(d)];
            ob += sb[static_cast<std::size_t>(d)];
            if (idx[static_cast<std::size_t>(d)] < out[static_cast<std::size_t>(d)]) break;
            oa -= sa[static_cast<std::size_t>(d)] * out[static_cast<std::size_t>(d)];
            ob -= sb[static_cast<std::size_t>(d)] * out[static_cast<std::size_t>(d)];
            idx[static_cast<std::size_t>(d)] = 0;
        }
    }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// broadcast binary ops
// ---------------------------------------------------------------------------

enum class BinKind { add, sub, mul, div };

template <typename T>
Value<T> binary_op(Value<T> a, Value<T> b, BinKind kind) {
    Graph<T>& g = *a.graph;
    const Tensor<T>& ta = a.tensor();
    const Tensor<T>& tb = b.tensor();
    const Shape out_shape = detail::broadcast_shape(ta.shape(), tb.shape());
    const auto sa = detail::broadcast_strides(ta.shape(), out_shape);
    const auto sb = detail::broadcast_strides(tb.shape(), out_shape);

    Tensor<T> out(out_shape);
    const T* pa = ta.data();
    const T* pb = tb.data();
    T* po = out.raw();
    switch (kind) {
        case BinKind::add:
            detail::for_each_bcast(out_shape, sa, sb, [&](auto i, auto oa, auto ob) { po[i] = pa[oa] + pb[ob]; });
            break;
        case BinKind::sub:
            detail::for_each_bcast(out_shape, sa, sb, [&](auto i, auto oa, auto ob) { po[i] = pa[oa] - pb[ob]; });
            break;
        case BinKind::mul:
            detail::for_each_bcast(out_shape, sa, sb, [&](auto i, auto oa, auto ob) { po[i] = pa[oa] * pb[ob]; });
            break;
        case BinKind::div:
            detail::for_each_bcast(out_shape, sa, sb, [&](auto i, auto oa, auto ob) { po[i] = pa[oa] / pb[ob]; });
            break;
    }

    auto backward = [kind, out_shape, sa, sb](Graph<T>& gr, int self) {
        const auto& node_grad = gr.grad(self);
        const int ia = -1;  // placeholder, real ids captured below
        (void)ia;
        (void)node_grad;
        (void)out_shape;
        (void)kind;
        (void)sa;
        (void)sb;
        (void)gr;
        (void)self;
    };
    (void)backward;

    const int aid = a.id, bid = b.id;
    return g.make(std::move(out), {aid, bid}, [kind, out_shape, sa, sb, aid, bid](Graph<T>& gr, int self) {
        const std::vector<T>& go = gr.grad(self);
        const T* pa2 = gr.value(aid).data();
        const T* pb2 = gr.value(bid).data();
        const bool na = gr.needs_grad(aid);
        const bool nb = gr.needs_grad(bid);
        std::vector<T>* ga = na ? &gr.grad(aid) : nullptr;
        std::vector<T>* gb = nb ? &gr.grad(bid) : nullptr;
        switch (kind) {
            case BinKind::add:
                detail::for_each_bcast(out_shape, sa, sb, [&](auto i, auto oa, auto ob) {
                    if (ga) (*ga)[static_cast<std::size_t>(oa)] += go[static_cast<std::size_t>(i)];
                    if (gb) (*gb)[static_cast<std::size_t>(ob)] += go[static_cast<std::size_t>(i)];
                });
                break;
            case BinKind::sub:
                detail::for_each_bcast(out_shape, sa, sb, [&](auto i, auto oa, auto ob) {
                    if (ga) (*ga)[static_cast<std::size_t>(oa)] += go[static_cast<std::size_t>(i)];
                    if (gb) (*gb)[static_cast<std::size_t>(ob)] -= go[static_cast<std::size_t>(i)];
                });
                break;
            case BinKind::mul:
                detail::for_each_bcast(out_shape, sa, sb, [&](auto i, auto oa, auto ob) {
                    if (ga) (*ga)[static_cast<std::size_t>(oa)] += go[static_cast<std::size_t>(i)] * pb2[ob];
                    if (gb) (*gb)[static_cast<std::size_t>(ob)] += go[static_cast<std::size_t>(i)] * pa2[oa];
                });
                break;
            case BinKind::div:
                detail::for_each_bcast(out_shape, sa, sb, [&](auto i, auto oa, auto ob) {
                    const T inv = T(1) / pb2[ob];
                    if (ga) (*ga)[static_cast<std::size_t>(oa)] += go[static_cast<std::size_t>(i)] * inv;
                    if (gb)
                        (*gb)[static_cast<std::size_t>(ob)] -=
                            go[static_cast<std::size_t>(i)] * pa2[oa] * inv * inv;
                });
                break;
        }
    });
}

template <typename T> Value<T> add(Value<T> a, Value<T> b) { return binary_op(a, b, BinKind::add); }
template <typename T> Value<T> sub(Value<T> a, Value<T> b) { return binary_op(a, b, BinKind::sub); }
template <typename T> Value<T> mul(Value<T> a, Value<T> b) { return binary_op(a, b, BinKind::mul); }
template <typename T> Value<T> div(Value<T> a, Value<T> b) { return binary_op(a, b, BinKind::div); }

template <typename T> Value<T> operator+(Value<T> a, Value<T> b) { return add(a, b); }
template <typename T> Value<T> operator-(Value<T> a, Value<T> b) { return sub(a, b); }
template <typename T> Value<T> operator*(Value<T> a, Value<T> b) { return mul(a, b); }

// ---------------------------------------------------------------------------
// unary elementwise ops
// ---------------------------------------------------------------------------

// f computes the output, dfdx the local derivative given (x, y).
template <typename T, typename F, typename DF>
Value<T> unary_op(Value<T> a, F f, DF dfdx) {
    Graph<T>& g = *a.graph;
    const Tensor<T>& ta = a.tensor();
    Tensor<T> out(ta.shape());
    for (std::int64_t i = 0; i < ta.size(); ++i) out.raw()[i] = f(ta[i]);
    const int aid = a.id;
    return g.make(std::move(out), {aid}, [aid, dfdx](Graph<T>& gr, int self) {
        if (!gr.needs_grad(aid)) return;
        const auto& go = gr.grad(self);
        auto& ga = gr.grad(aid);
        const Tensor<T>& x = gr.value(aid);
        const Tensor<T>& y = gr.value(self);
        for (std::size_t i = 0; i < go.size(); ++i)
            ga[i] += go[i] * dfdx(x[static_cast<std::int64_t>(i)], y[static_cast<std::int64_t>(i)]);
    });
}

template <typename T> Value<T> neg(Value<T> a) {
    return unary_op(a, [](T x) { return -x; }, [](T, T) { return T(-1); });
}
template <typename T> Value<T> exp_op(Value<T> a) {
    return unary_op(a, [](T x) { return std::exp(x); }, [](T, T y) { return y; });
}
template <typename T> Value<T> log_op(Value<T> a) {
    return unary_op(a, [](T x) { return std::log(x); }, [](T x, T) { return T(1) / x; });
}
template <typename T> Value<T> sqrt_op(Value<T> a) {
    return unary_op(a, [](T x) { return std::sqrt(x); }, [](T, T y) { return T(0.5) / y; });
}
template <typename T> Value<T> sin_op(Value<T> a) {
    return unary_op(a, [](T x) { return std::sin(x); }, [](T x, T) { return std::cos(x); });
}
template <typename T> Value<T> cos_op(Value<T> a) {
    return unary_op(a, [](T x) { return std::cos(x); }, [](T x, T) { return -std::sin(x); });
}
template <typename T> Value<T> tanh_op(Value<T> a) {
    return unary_op(a, [](T x) { return std::tanh(x); }, [](T, T y) { return T(1) - y * y; });
}
template <typename T> Value<T> sigmoid(Value<T> a) {
    return unary_op(
        a, [](T x) { return T(1) / (T(1) + std::exp(-x)); }, [](T, T y) { return y * (T(1) - y); });
}
template <typename T> Value<T> relu(Value<T> a) {
    return unary_op(a, [](T x) { return x > T(0) ? x : T(0); }, [](T x, T) { return x > T(0) ? T(1) : T(0); });
}

// tanh-approximation GELU
template <typename T> Value<T> gelu(Value<T> a) {
    constexpr double kC = 0.7978845608028654;  // sqrt(2/pi)
    constexpr double kA = 0.044715;
    return unary_op(
        a,
        [](T x) {
            const double xd = static_cast<double>(x);
            return static_cast<T>(0.5 * xd * (1.0 + std::tanh(kC * (xd + kA * xd * xd * xd))));
        },
        [](T x, T) {
            const double xd = static_cast<double>(x);
            const double u = kC * (xd + kA * xd * xd * xd);
            const double th = std::tanh(u);
            const double dudx = kC * (1.0 + 3.0 * kA * xd * xd);
            return static_cast<T>(0.5 * (1.0 + th) + 0.5 * xd * (1.0 - th * th) * dudx);
        });
}

template <typename T> Value<T> scale(Value<T> a, T c) {
    return unary_op(a, [c](T x) { return c * x; }, [c](T, T) { return c; });
}

template <typename T> Value<T> add_scalar(Value<T> a, T c) {
    return unary_op(a, [c](T x) { return x + c; }, [](T, T) { return T(1); });
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

template <typename T>
Value<T> sum_all(Value<T> a) {
    Graph<T>& g = *a.graph;
    const Tensor<T>& ta = a.tensor();
    double acc = 0.0;
    for (std::int64_t i = 0; i < ta.size(); ++i) acc += static_cast<double>(ta[i]);
    const int aid = a.id;
    return g.make(Tensor<T>::scalar(static_cast<T>(acc)), {aid}, [aid](Graph<T>& gr, int self) {
        if (!gr.needs_grad(aid)) return;
        const T go = gr.grad(self)[0];
        auto& ga = gr.grad(aid);
        for (auto& v : ga) v += go;
    });
}

template <typename T>
Value<T> mean_all(Value<T> a) {
    const auto n = a.size();
    return scale(sum_all(a), static_cast<T>(1.0 / static_cast<double>(n)));
}

// sum over one axis
template <typename T>
Value<T> sum_axis(Value<T> a, int axis, bool keepdim = false) {
    Graph<T>& g = *a.graph;
    const Tensor<T>& ta = a.tensor();
    const auto& sh = ta.shape();
    if (axis < 0) axis += static_cast<int>(sh.size());
    const std::int64_t n_axis = sh[static_cast<std::size_t>(axis)];
    std::int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= sh[static_cast<std::size_t>(i)];
    for (std::size_t i = static_cast<std::size_t>(axis) + 1; i < sh.size(); ++i) inner *= sh[i];

    Shape out_shape;
    for (int i = 0; i < static_cast<int>(sh.size()); ++i) {
        if (i == axis) {
            if (keepdim) out_shape.push_back(1);
        } else {
            out_shape.push_back(sh[static_cast<std::size_t>(i)]);
        }
    }
    if (out_shape.empty()) out_shape.push_back(1);

    Tensor<T> out(out_shape);
    const T* pa = ta.data();
    T* po = out.raw();
    for (std::int64_t o = 0; o < outer; ++o)
        for (std::int64_t in = 0; in < inner; ++in) {
            double acc = 0.0;
            for (std::int64_t k = 0; k < n_axis; ++k) acc += static_cast<double>(pa[(o * n_axis + k) * inner + in]);
            po[o * inner + in] = static_cast<T>(acc);
        }
    const int aid = a.id;
    return g.make(std::move(out), {aid}, [aid, outer, inner, n_axis](Graph<T>& gr, int self) {
        if (!gr.needs_grad(aid)) return;
        const auto& go = gr.grad(self);
        auto& ga = gr.grad(aid);
        for (std::int64_t o = 0; o < outer; ++o)
            for (std::int64_t in = 0; in < inner; ++in) {
                const T gv = go[static_cast<std::size_t>(o * inner + in)];
                for (std::int64_t k = 0; k < n_axis; ++k) ga[static_cast<std::size_t>((o * n_axis + k) * inner + in)] += gv;
            }
    });
}

template <typename T>
Value<T> mean_axis(Value<T> a, int axis, bool keepdim = false) {
    const auto& sh = a.shape();
    const int ax = axis < 0 ? axis + static_cast<int>(sh.size()) : axis;
    const std::int64_t n = sh[static_cast<std::size_t>(ax)];
    return scale(sum_axis(a, axis, keepdim), static_cast<T>(1.0 / static_cast<double>(n)));
}

// ---------------------------------------------------------------------------
// movement ops
// ---------------------------------------------------------------------------

template <typename T>
Value<T> reshape(Value<T> a, Shape shape) {
    Graph<T>& g = *a.graph;
    Tensor<T> out = a.tensor().reshaped(std::move(shape));
    const int aid = a.id;
    return g.make(std::move(out), {aid}, [aid](Graph<T>& gr, int self) {
        if (!gr.needs_grad(aid)) return;
        const auto& go = gr.grad(self);
        auto& ga = gr.grad(aid);
        for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
    });
}

template <typename T>
Value<T> permute(Value<T> a, std::vector<int> perm) {
    Graph<T>& g = *a.graph;
    const Tensor<T>& ta = a.tensor();
    const auto& sh = ta.shape();
    const int r = static_cast<int>(sh.size());
    if (static_cast<int>(perm.size()) != r)
        throw ShapeError("permute rank mismatch for " + shape_str(sh));
    Shape out_shape(static_cast<std::size_t>(r));
    for (int i = 0; i < r; ++i) out_shape[static_cast<std::size_t>(i)] = sh[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])];

    // strides of the source, then reordered to output dims
    std::vector<std::int64_t> src_strides(static_cast<std::size_t>(r), 1);
    for (int i = r - 2; i >= 0; --i)
        src_strides[static_cast<std::size_t>(i)] = src_strides[static_cast<std::size_t>(i + 1)] * sh[static_cast<std::size_t>(i + 1)];
    std::vector<std::int64_t> strides(static_cast<std::size_t>(r));
    for (int i = 0; i < r; ++i) strides[static_cast<std::size_t>(i)] = src_strides[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])];

    Tensor<T> out(out_shape);
    const T* pa = ta.data();
    T* po = out.raw();
    std::vector<std::int64_t> zero(strides.size(), 0);
    detail::for_each_bcast(out_shape, strides, zero, [&](auto i, auto oa, auto) { po[i] = pa[oa]; });

    const int aid = a.id;
    return g.make(std::move(out), {aid}, [aid, out_shape, strides, zero](Graph<T>& gr, int self) {
        if (!gr.needs_grad(aid)) return;
        const auto& go = gr.grad(self);
        auto& ga = gr.grad(aid);
        detail::for_each_bcast(out_shape, strides, zero,
                               [&](auto i, auto oa, auto) { ga[static_cast<std::size_t>(oa)] += go[static_cast<std::size_t>(i)]; });
    });
}

// contiguous slice along one axis
template <typename T>
Value<T> slice(Value<T> a, int axis, std::int64_t start, std::int64_t len) {
    Graph<T>& g = *a.graph;
    const Tensor<T>& ta = a.tensor();
    const auto& sh = ta.shape();
    if (axis < 0) axis += static_cast<int>(sh.size());
    const std::int64_t n_axis = sh[static_cast<std::size_t>(axis)];
    if (start < 0 || len < 0 || start + len > n_axis)
        throw ShapeError("slice [" + std::to_string(start) + "," + std::to_string(start + len) +
                         ") out of range for " + shape_str(sh));
    std::int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= sh[static_cast<std::size_t>(i)];
    for (std::size_t i = static_cast<std::size_t>(axis) + 1; i < sh.size(); ++i) inner *= sh[i];

    Shape out_shape = sh;
    out_shape[static_cast<std::size_t>(axis)] = len;
    Tensor<T> out(out_shape);
    const T* pa = ta.data();
    T* po = out.raw();
    for (std::int64_t o = 0; o < outer; ++o)
        std::memcpy(po + o * len * inner, pa + (o * n_axis + start) * inner,
                    static_cast<std::size_t>(len * inner) * sizeof(T));

    const int aid = a.id;
    return g.make(std::move(out), {aid}, [aid, outer, inner, n_axis, start, len](Graph<T>& gr, int self) {
        if (!gr.needs_grad(aid)) return;
        const auto& go = gr.grad(self);
        auto& ga = gr.grad(aid);
        for (std::int64_t o = 0; o < outer; ++o)
            for (std::int64_t k = 0; k < len; ++k)
                for (std::int64_t in = 0; in < inner; ++in)
                    ga[static_cast<std::size_t>((o * n_axis + start + k) * inner + in)] +=
                        go[static_cast<std::size_t>((o * len + k) * inner + in)];
    });
}

// ---------------------------------------------------------------------------
// matrix products (Eigen-backed)
// ---------------------------------------------------------------------------

template <typename T>
Value<T> matmul(Value<T> a, Value<T> b) {
    Graph<T>& g = *a.graph;
    const Tensor<T>& ta = a.tensor();
    const Tensor<T>& tb = b.tensor();
    if (ta.rank() != 2 || tb.rank() != 2 || ta.dim(1) != tb.dim(0))
        throw ShapeError("matmul shape mismatch: " + shape_str(ta.shape()) + " x " + shape_str(tb.shape()));
    const std::int64_t m = ta.dim(0), k = ta.dim(1), n = tb.dim(1);
    Tensor<T> out({m, n});
    {
        ECMap<T> A(ta.data(), m, k), B(tb.data(), k, n);
        EMap<T> C(out.raw(), m, n);
        C.noalias() = A * B;
    }
    const int aid = a.id, bid = b.id;
    return g.make(std::move(out), {aid, bid}, [aid, bid, m, k, n](Graph<T>& gr, int self) {
        ECMap<T> G(gr.grad(self).data(), m, n);
        if (gr.needs_grad(aid)) {
            ECMap<T> B(gr.value(bid).data(), k, n);
            EMap<T> GA(gr.grad(aid).data(), m, k);
            GA.noalias() += G * B.transpose();
        }
        if (gr.needs_grad(bid)) {
            ECMap<T> A(gr.value(aid).data(), m, k);
            EMap<T> GB(gr.grad(bid).data(), k, n);
            GB.noalias() += A.transpose() * G;
        }
    });
}

// batched matmul: [N,m,k] x [N,k,n] -> [N,m,n]
template <typename T>
Value<T> bmm(Value<T> a, Value<T> b) {
    Graph<T>& g = *a.graph;
    const Tensor<T>& ta = a.tensor();
    const Tensor<T>& tb = b.tensor();
    if (ta.rank() != 3 || tb.rank() != 3 || ta.dim(0) != tb.dim(0) || ta.dim(2) != tb.dim(1))
        throw ShapeError("bmm shape mismatch: " + shape_str(ta.shape()) + " x " + shape_str(tb.shape()));
    const std::int64_t N = ta.dim(0), m = ta.dim(1), k = ta.dim(2), n = tb.dim(2);
    Tensor<T> out({N, m, n});
    for (std::int64_t i = 0; i < N; ++i) {
        ECMap<T> A(ta.data() + i * m * k, m, k), B(tb.data() + i * k * n, k, n);
        EMap<T> C(out.raw() + i * m * n, m, n);
        C.noalias() = A * B;
    }
    const int aid = a.id, bid = b.id;
    return g.make(std::move(out), {aid, bid}, [aid, bid, N, m, k, n](Graph<T>& gr, int self) {
        const T* gp = gr.grad(self).data();
        for (std::int64_t i = 0; i < N; ++i) {
            ECMap<T> G(gp + i * m * n, m, n);
            if (gr.needs_grad(aid)) {
                ECMap<T> B(gr.value(bid).data() + i * k * n, k, n);
                EMap<T> GA(gr.grad(aid).data() + i * m * k, m, k);
                GA.noalias() += G * B.transpose();
            }
            if (gr.needs_grad(bid)) {
                ECMap<T> A(gr.value(aid).data() + i * m * k, m, k);
                EMap<T> GB(gr.grad(bid).data() + i * k * n, k, n);
                GB.noalias() += A.transpose() * G;
            }
        }
    });
}

// x[..., in] @ w[in, out] + b[out]; collapses leading dims around a 2-D matmul
template <typename T>
Value<T> linear(Value<T> x, Value<T> w, Value<T> b) {
    const Shape xs = x.shape();
    const std::int64_t in = xs.back();
    std::int64_t rows = 1;
    for (std::size_t i = 0; i + 1 < xs.size(); ++i) rows *= xs[i];
    Value<T> flat = reshape(x, {rows, in});
    Value<T> y = add(matmul(flat, w), b);
    Shape out = xs;
    out.back() = w.shape()[1];
    return reshape(y, out);
}

// ---------------------------------------------------------------------------
// neural-net ops
// ---------------------------------------------------------------------------

// softmax over the last axis
template <typename T>
Value<T> softmax(Value<T> a) {
    Graph<T>& g = *a.graph;
    const Tensor<T>& ta = a.tensor();
    const std::int64_t cols = ta.shape().back();
    const std::int64_t rows = ta.size() / cols;
    Tensor<T> out(ta.shape());
    const T* pa = ta.data();
    T* po = out.raw();
    for (std::int64_t r = 0; r < rows; ++r) {
        const T* xr = pa + r * cols;
        T* yr = po + r * cols;
        T mx = xr[0];
        for (std::int64_t c = 1; c < cols; ++c) mx = std::max(mx, xr[c]);
        double denom = 0.0;
        for (std::int64_t c = 0; c < cols; ++c) {
            yr[c] = std::exp(xr[c] - mx);
            denom += static_cast<double>(yr[c]);
        }
        const T inv = static_cast<T>(1.0 / denom);
        for (std::int64_t c = 0; c < cols; ++c) yr[c] *= inv;
    }
    const int aid = a.id;
    return g.make(std::move(out), {aid}, [aid, rows, cols](Graph<T>& gr, int self) {
        if (!gr.needs_grad(aid)) return;
        const auto& go = gr.grad(self);
        const Tensor<T>& y = gr.value(self);
        auto& ga = gr.grad(aid);
        for (std::int64_t r = 0; r < rows; ++r) {
            double dot = 0.0;
            for (std::int64_t c = 0; c < cols; ++c)
                dot += static_cast<double>(go[static_cast<std::size_t>(r * cols + c)]) * y[r * cols + c];
            for (std::int64_t c = 0; c < cols; ++c)
                ga[static_cast<std::size_t>(r * cols + c)] +=
                    (go[static_cast<std::size_t>(r * cols + c)] - static_cast<T>(dot)) * y[r * cols + c];
        }
    });
}

// mean softmax cross-entropy over the batch; logits [B, C]
template <typename T>
Value<T> cross_entropy(Value<T> logits, const std::vector<int>& labels) {
    Graph<T>& g = *logits.graph;
    const Tensor<T>& tl = logits.tensor();
    if (tl.rank() != 2 || static_cast<std::size_t>(tl.dim(0)) != labels.size())
        throw ShapeError("cross_entropy: logits " + shape_str(tl.shape()) + " vs " +
                         std::to_string(labels.size()) + " labels");
    const std::int64_t B = tl.dim(0), C = tl.dim(1);
    Tensor<T> probs({B, C});
    double loss = 0.0;
    for (std::int64_t r = 0; r < B; ++r) {
        const T* xr = tl.data() + r * C;
        T* pr = probs.raw() + r * C;
        T mx = xr[0];
        for (std::int64_t c = 1; c < C; ++c) mx = std::max(mx, xr[c]);
        double denom = 0.0;
        for (std::int64_t c = 0; c < C; ++c) denom += std::exp(static_cast<double>(xr[c] - mx));
        const double logz = std::log(denom) + static_cast<double>(mx);
        loss -= static_cast<double>(xr[labels[static_cast<std::size_t>(r)]]) - logz;
        for (std::int64_t c = 0; c < C; ++c)
            pr[c] = static_cast<T>(std::exp(static_cast<double>(xr[c]) - logz));
    }
    loss /= static_cast<double>(B);
    const int lid = logits.id;
    return g.make(Tensor<T>::scalar(static_cast<T>(loss)), {lid},
                  [lid, labels, probs, B, C](Graph<T>& gr, int self) {
                      if (!gr.needs_grad(lid)) return;
                      const T go = gr.grad(self)[0];
                      auto& gl = gr.grad(lid);
                      const T invb = static_cast<T>(1.0 / static_cast<double>(B));
                      for (std::int64_t r = 0; r < B; ++r)
                          for (std::int64_t c = 0; c < C; ++c) {
                              T p = probs[r * C + c];
                              if (c == labels[static_cast<std::size_t>(r)]) p -= T(1);
                              gl[static_cast<std::size_t>(r * C + c)] += go * invb * p;
                          }
                  });
}

// layer norm over the last axis; gamma/beta shaped [C]
template <typename T>
Value<T> layer_norm(Value<T> x, Value<T> gamma, Value<T> beta, T eps = static_cast<T>(1e-5)) {
    Graph<T>& g = *x.graph;
    const Tensor<T>& tx = x.tensor();
    const std::int64_t C = tx.shape().back();
    const std::int64_t rows = tx.size() / C;
    Tensor<T> out(tx.shape());
    Tensor<T> xhat(tx.shape());
    std::vector<T> inv_sigma(static_cast<std::size_t>(rows));
    const T* px = tx.data();
    const T* pg = gamma.tensor().data();
    const T* pb = beta.tensor().data();
    T* po = out.raw();
    T* ph = xhat.raw();
    for (std::int64_t r = 0; r < rows; ++r) {
        const T* xr = px + r * C;
        double mu = 0.0;
        for (std::int64_t c = 0; c < C; ++c) mu += static_cast<double>(xr[c]);
        mu /= static_cast<double>(C);
        double var = 0.0;
        for (std::int64_t c = 0; c < C; ++c) {
            const double d = static_cast<double>(xr[c]) - mu;
            var += d * d;
        }
        var /= static_cast<double>(C);
        const T isig = static_cast<T>(1.0 / std::sqrt(var + static_cast<double>(eps)));
        inv_sigma[static_cast<std::size_t>(r)] = isig;
        for (std::int64_t c = 0; c < C; ++c) {
            const T h = (xr[c] - static_cast<T>(mu)) * isig;
            ph[r * C + c] = h;
            po[r * C + c] = pg[c] * h + pb[c];
        }
    }
    const int xid = x.id, gid = gamma.id, bid = beta.id;
    return g.make(std::move(out), {xid, gid, bid},
                  [xid, gid, bid, xhat, inv_sigma, rows, C](Graph<T>& gr, int self) {
                      const auto& go = gr.grad(self);
                      const T* pg2 = gr.value(gid).data();
                      for (std::int64_t r = 0; r < rows; ++r) {
                          const T isig = inv_sigma[static_cast<std::size_t>(r)];
                          double sum_dh = 0.0, sum_dh_h = 0.0;
                          for (std::int64_t c = 0; c < C; ++c) {
                              const T dh = go[static_cast<std::size_t>(r * C + c)] * pg2[c];
                              sum_dh += static_cast<double>(dh);
                              sum_dh_h += static_cast<double>(dh) * xhat[r * C + c];
                          }
                          if (gr.needs_grad(xid)) {
                              auto& gx = gr.grad(xid);
                              for (std::int64_t c = 0; c < C; ++c) {
                                  const T dh = go[static_cast<std::size_t>(r * C + c)] * pg2[c];
                                  gx[static_cast<std::size_t>(r * C + c)] +=
                                      isig * (dh - static_cast<T>((sum_dh + sum_dh_h * xhat[r * C + c]) /
                                                                  static_cast<double>(C)));
                              }
                          }
                          if (gr.needs_grad(gid)) {
                              auto& gg = gr.grad(gid);
                              for (std::int64_t c = 0; c < C; ++c)
                                  gg[static_cast<std::size_t>(c)] +=
                                      go[static_cast<std::size_t>(r * C + c)] * xhat[r * C + c];
                          }
                          if (gr.needs_grad(bid)) {
                              auto& gb = gr.grad(bid);
                              for (std::int64_t c = 0; c < C; ++c)
                                  gb[static_cast<std::size_t>(c)] += go[static_cast<std::size_t>(r * C + c)];
                          }
                      }
                  });
}

// inverted dropout; identity when `training` is false
template <typename T>
Value<T> dropout(Value<T> x, double rate, Rng& rng, bool training) {
    if (!training || rate <= 0.0) return x;
    Graph<T>& g = *x.graph;
    const Tensor<T>& tx = x.tensor();
    const T keep_inv = static_cast<T>(1.0 / (1.0 - rate));
    std::vector<T> mask(static_cast<std::size_t>(tx.size()));
    for (auto& m : mask) m = rng.uniform() >= rate ? keep_inv : T(0);
    Tensor<T> out(tx.shape());
    for (std::int64_t i = 0; i < tx.size(); ++i) out.raw()[i] = tx[i] * mask[static_cast<std::size_t>(i)];
    const int xid = x.id;
    return g.make(std::move(out), {xid}, [xid, mask](Graph<T>& gr, int self) {
        if (!gr.needs_grad(xid)) return;
        const auto& go = gr.grad(self);
        auto& gx = gr.grad(xid);
        for (std::size_t i = 0; i < go.size(); ++i) gx[i] += go[i] * mask[i];
    });
}

}  // namespace motionid::num
