#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "segbench/tape.hpp"
#include "segbench/tensor.hpp"

namespace segbench {

namespace detail {

inline Tape* tape_of(const DiffValue& a) { return a.tracked() ? a.tape : nullptr; }

inline Tape* tape_of(const DiffValue& a, const DiffValue& b) {
    if (a.tracked() && b.tracked() && a.tape != b.tape)
        throw std::invalid_argument("operands recorded on different tapes");
    return a.tracked() ? a.tape : (b.tracked() ? b.tape : nullptr);
}

// Iterate a shape together with a broadcast-compatible smaller shape
// (extent 1 wherever the two differ). Shapes are padded to rank 4 with
// leading 1s for iteration only. fn(big_flat, small_flat).
template <class Fn>
void for_each_broadcast(const std::vector<int>& big, const std::vector<int>& small, Fn fn) {
    int64_t bd[4] = {1, 1, 1, 1}, sd[4] = {1, 1, 1, 1};
    int off = 4 - static_cast<int>(big.size());
    for (size_t i = 0; i < big.size(); ++i) {
        bd[off + static_cast<int>(i)] = big[i];
        sd[off + static_cast<int>(i)] = small[i];
    }
    int64_t ss[4];
    int64_t stride = 1;
    for (int i = 3; i >= 0; --i) {
        ss[i] = (sd[i] == 1) ? 0 : stride;
        stride *= sd[i];
    }
    int64_t bi = 0;
    for (int64_t i0 = 0; i0 < bd[0]; ++i0)
        for (int64_t i1 = 0; i1 < bd[1]; ++i1)
            for (int64_t i2 = 0; i2 < bd[2]; ++i2) {
                int64_t base = i0 * ss[0] + i1 * ss[1] + i2 * ss[2];
                for (int64_t i3 = 0; i3 < bd[3]; ++i3, ++bi) fn(bi, base + i3 * ss[3]);
            }
}

template <class F, class D>
DiffValue ew_unary(const char* /*name*/, const DiffValue& a, F f, D dfdx) {
    const Tensor& x = a.value;
    int64_t n = x.numel();
    std::vector<double> out(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) out[static_cast<size_t>(i)] = f(x[i]);
    Tensor val = Tensor::from_data(x.shape(), std::move(out));
    if (!a.tracked()) return Tape::constant(std::move(val));
    Tensor xv = x, ov = val;
    return a.tape->record(std::move(val), {a.node}, [xv, ov, dfdx](const Tensor& cot) {
        int64_t n = cot.numel();
        std::vector<double> g(static_cast<size_t>(n));
        for (int64_t i = 0; i < n; ++i) g[static_cast<size_t>(i)] = cot[i] * dfdx(xv[i], ov[i]);
        return std::vector<Tensor>{Tensor::from_data(xv.shape(), std::move(g))};
    });
}

// dfdx/dfdy are local partials evaluated per element: (x, y, out) -> d.
// Broadcast is limited to scalar-vs-tensor and equal shapes.
template <class F, class DX, class DY>
DiffValue ew_binary(const char* name, const DiffValue& a, const DiffValue& b, F f, DX dfdx, DY dfdy) {
    const Tensor& x = a.value;
    const Tensor& y = b.value;
    const bool xs = x.is_scalar(), ys = y.is_scalar();
    if (!xs && !ys && !x.same_shape(y))
        throw std::invalid_argument(std::string(name) + ": shape mismatch " + x.shape_str() + " vs " +
                                    y.shape_str());
    // keep the non-scalar (or higher-rank) side's shape
    const std::vector<int>& oshape =
        !xs ? x.shape() : (!ys ? y.shape() : (x.rank() >= y.rank() ? x.shape() : y.shape()));
    int64_t n = shape_numel(oshape);
    std::vector<double> out(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i)
        out[static_cast<size_t>(i)] = f(x[xs ? 0 : i], y[ys ? 0 : i]);
    Tensor val = Tensor::from_data(oshape, std::move(out));
    Tape* t = tape_of(a, b);
    if (!t) return Tape::constant(std::move(val));

    const bool ta = a.tracked(), tb = b.tracked();
    std::vector<int> inputs;
    if (ta) inputs.push_back(a.node);
    if (tb) inputs.push_back(b.node);
    Tensor xv = x, yv = y, ov = val;
    return t->record(std::move(val), std::move(inputs),
                     [xv, yv, ov, xs, ys, ta, tb, dfdx, dfdy](const Tensor& cot) {
                         int64_t n = cot.numel();
                         std::vector<Tensor> res;
                         if (ta) {
                             if (xs && n > 1) {
                                 double acc = 0.0;
                                 for (int64_t i = 0; i < n; ++i)
                                     acc += cot[i] * dfdx(xv[0], yv[ys ? 0 : i], ov[i]);
                                 res.push_back(Tensor::scalar(acc).reshaped(xv.shape()));
                             } else {
                                 std::vector<double> g(static_cast<size_t>(n));
                                 for (int64_t i = 0; i < n; ++i)
                                     g[static_cast<size_t>(i)] = cot[i] * dfdx(xv[i], yv[ys ? 0 : i], ov[i]);
                                 res.push_back(Tensor::from_data(xv.shape(), std::move(g)));
                             }
                         }
                         if (tb) {
                             if (ys && n > 1) {
                                 double acc = 0.0;
                                 for (int64_t i = 0; i < n; ++i)
                                     acc += cot[i] * dfdy(xv[xs ? 0 : i], yv[0], ov[i]);
                                 res.push_back(Tensor::scalar(acc).reshaped(yv.shape()));
                             } else {
                                 std::vector<double> g(static_cast<size_t>(n));
                                 for (int64_t i = 0; i < n; ++i)
                                     g[static_cast<size_t>(i)] = cot[i] * dfdy(xv[xs ? 0 : i], yv[i], ov[i]);
                                 res.push_back(Tensor::from_data(yv.shape(), std::move(g)));
                             }
                         }
                         return res;
                     });
}

inline double stable_sigmoid(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    double e = std::exp(x);
    // exp underflows to 0 below ~-745; keep the output strictly positive so
    // quotients with a sigmoid denominator stay total
    return std::max(e / (1.0 + e), std::numeric_limits<double>::min());
}

// log(1 + e^x) without overflow
inline double stable_softplus(double x) {
    return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x)));
}

} // namespace detail

// --- elementwise -----------------------------------------------------------

inline DiffValue add(const DiffValue& a, const DiffValue& b) {
    return detail::ew_binary(
        "add", a, b, [](double x, double y) { return x + y; },
        [](double, double, double) { return 1.0; }, [](double, double, double) { return 1.0; });
}

inline DiffValue sub(const DiffValue& a, const DiffValue& b) {
    return detail::ew_binary(
        "sub", a, b, [](double x, double y) { return x - y; },
        [](double, double, double) { return 1.0; }, [](double, double, double) { return -1.0; });
}

inline DiffValue mul(const DiffValue& a, const DiffValue& b) {
    return detail::ew_binary(
        "mul", a, b, [](double x, double y) { return x * y; },
        [](double, double y, double) { return y; }, [](double x, double, double) { return x; });
}

inline DiffValue div(const DiffValue& a, const DiffValue& b) {
    return detail::ew_binary(
        "div", a, b, [](double x, double y) { return x / y; },
        [](double, double y, double) { return 1.0 / y; },
        [](double x, double y, double) { return -x / (y * y); });
}

inline DiffValue neg(const DiffValue& a) {
    return detail::ew_unary(
        "neg", a, [](double x) { return -x; }, [](double, double) { return -1.0; });
}

inline DiffValue log(const DiffValue& a) {
    return detail::ew_unary(
        "log", a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

inline DiffValue exp(const DiffValue& a) {
    return detail::ew_unary(
        "exp", a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

inline DiffValue sqrt(const DiffValue& a) {
    return detail::ew_unary(
        "sqrt", a, [](double x) { return std::sqrt(x); },
        [](double, double y) { return 0.5 / y; });
}

// subgradient at 0 is 0
inline DiffValue relu(const DiffValue& a) {
    return detail::ew_unary(
        "relu", a, [](double x) { return x > 0.0 ? x : 0.0; },
        [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

inline DiffValue sigmoid(const DiffValue& a) {
    return detail::ew_unary(
        "sigmoid", a, [](double x) { return detail::stable_sigmoid(x); },
        [](double, double y) { return y * (1.0 - y); });
}

inline DiffValue softplus(const DiffValue& a) {
    return detail::ew_unary(
        "softplus", a, [](double x) { return detail::stable_softplus(x); },
        [](double x, double) { return detail::stable_sigmoid(x); });
}

inline DiffValue operator+(const DiffValue& a, const DiffValue& b) { return add(a, b); }
inline DiffValue operator-(const DiffValue& a, const DiffValue& b) { return sub(a, b); }
inline DiffValue operator*(const DiffValue& a, const DiffValue& b) { return mul(a, b); }
inline DiffValue operator/(const DiffValue& a, const DiffValue& b) { return div(a, b); }
inline DiffValue operator-(const DiffValue& a) { return neg(a); }
inline DiffValue operator+(const DiffValue& a, double c) { return add(a, Tape::constant(Tensor::scalar(c))); }
inline DiffValue operator+(double c, const DiffValue& a) { return a + c; }
inline DiffValue operator-(const DiffValue& a, double c) { return a + (-c); }
inline DiffValue operator-(double c, const DiffValue& a) { return add(neg(a), Tape::constant(Tensor::scalar(c))); }
inline DiffValue operator*(const DiffValue& a, double c) { return mul(a, Tape::constant(Tensor::scalar(c))); }
inline DiffValue operator*(double c, const DiffValue& a) { return a * c; }
inline DiffValue operator/(const DiffValue& a, double c) { return div(a, Tape::constant(Tensor::scalar(c))); }
inline DiffValue operator/(double c, const DiffValue& a) { return div(Tape::constant(Tensor::scalar(c)), a); }

// --- shape plumbing ---------------------------------------------------------

inline DiffValue reshape(const DiffValue& a, std::vector<int> shape) {
    Tensor val = a.value.reshaped(shape);
    if (!a.tracked()) return Tape::constant(std::move(val));
    std::vector<int> orig = a.value.shape();
    return a.tape->record(std::move(val), {a.node}, [orig](const Tensor& cot) {
        return std::vector<Tensor>{cot.reshaped(orig)};
    });
}

// Explicit broadcast of size-1 extents up to `shape` (same rank). The only
// broadcast beyond scalar-vs-tensor, and it is a deliberate recorded op:
// backward sums over the expanded axes.
inline DiffValue expand(const DiffValue& a, const std::vector<int>& shape) {
    const Tensor& x = a.value;
    if (static_cast<int>(shape.size()) != x.rank())
        throw std::invalid_argument("expand: rank mismatch " + x.shape_str());
    for (int i = 0; i < x.rank(); ++i)
        if (x.extent(i) != shape[static_cast<size_t>(i)] && x.extent(i) != 1)
            throw std::invalid_argument("expand: cannot expand " + x.shape_str());
    std::vector<double> out(static_cast<size_t>(shape_numel(shape)));
    detail::for_each_broadcast(shape, x.shape(),
                               [&](int64_t bi, int64_t si) { out[static_cast<size_t>(bi)] = x[si]; });
    Tensor val = Tensor::from_data(shape, std::move(out));
    if (!a.tracked()) return Tape::constant(std::move(val));
    std::vector<int> small = x.shape();
    return a.tape->record(std::move(val), {a.node}, [small, shape](const Tensor& cot) {
        std::vector<double> g(static_cast<size_t>(shape_numel(small)), 0.0);
        detail::for_each_broadcast(shape, small,
                                   [&](int64_t bi, int64_t si) { g[static_cast<size_t>(si)] += cot[bi]; });
        return std::vector<Tensor>{Tensor::from_data(small, std::move(g))};
    });
}

// --- reduce -----------------------------------------------------------------

enum class ReduceOp { sum, mean };

inline DiffValue reduce(const DiffValue& a, ReduceOp op, std::vector<int> axes, bool keep) {
    const Tensor& x = a.value;
    std::sort(axes.begin(), axes.end());
    axes.erase(std::unique(axes.begin(), axes.end()), axes.end());
    for (int ax : axes)
        if (ax < 0 || ax >= x.rank())
            throw std::invalid_argument("reduce: axis " + std::to_string(ax) + " invalid for rank " +
                                        std::to_string(x.rank()));
    std::vector<int> kshape = x.shape();
    int64_t count = 1;
    for (int ax : axes) {
        count *= kshape[static_cast<size_t>(ax)];
        kshape[static_cast<size_t>(ax)] = 1;
    }
    std::vector<double> out(static_cast<size_t>(shape_numel(kshape)), 0.0);
    detail::for_each_broadcast(x.shape(), kshape,
                               [&](int64_t bi, int64_t si) { out[static_cast<size_t>(si)] += x[bi]; });
    const double scale = (op == ReduceOp::mean) ? 1.0 / static_cast<double>(count) : 1.0;
    if (op == ReduceOp::mean)
        for (double& v : out) v *= scale;

    std::vector<int> oshape;
    if (keep) {
        oshape = kshape;
    } else {
        for (int i = 0; i < x.rank(); ++i)
            if (!std::binary_search(axes.begin(), axes.end(), i)) oshape.push_back(x.extent(i));
        if (oshape.empty()) oshape = {1};
    }
    Tensor val = Tensor::from_data(kshape, std::move(out)).reshaped(oshape);
    if (!a.tracked()) return Tape::constant(std::move(val));
    std::vector<int> ishape = x.shape();
    return a.tape->record(std::move(val), {a.node}, [ishape, kshape, scale](const Tensor& cot) {
        Tensor ck = cot.reshaped(kshape);
        std::vector<double> g(static_cast<size_t>(shape_numel(ishape)));
        detail::for_each_broadcast(ishape, kshape, [&](int64_t bi, int64_t si) {
            g[static_cast<size_t>(bi)] = ck[si] * scale;
        });
        return std::vector<Tensor>{Tensor::from_data(ishape, std::move(g))};
    });
}

inline DiffValue sum(const DiffValue& a, std::vector<int> axes, bool keep = false) {
    return reduce(a, ReduceOp::sum, std::move(axes), keep);
}
inline DiffValue mean(const DiffValue& a, std::vector<int> axes, bool keep = false) {
    return reduce(a, ReduceOp::mean, std::move(axes), keep);
}

inline std::vector<int> all_axes(const DiffValue& a) {
    std::vector<int> ax(static_cast<size_t>(a.value.rank()));
    std::iota(ax.begin(), ax.end(), 0);
    return ax;
}

inline DiffValue sum_all(const DiffValue& a) { return sum(a, all_axes(a)); }
inline DiffValue mean_all(const DiffValue& a) { return mean(a, all_axes(a)); }

// --- gather / slicing --------------------------------------------------------

// Flat gather; output is rank-1. Backward scatter-adds into the source.
inline DiffValue gather_flat(const DiffValue& a, std::vector<int64_t> idx) {
    const Tensor& x = a.value;
    std::vector<double> out(idx.size());
    for (size_t j = 0; j < idx.size(); ++j) {
        if (idx[j] < 0 || idx[j] >= x.numel())
            throw std::invalid_argument("gather_flat: index out of range");
        out[j] = x[idx[j]];
    }
    Tensor val = Tensor::from_data({static_cast<int>(idx.size())}, std::move(out));
    if (!a.tracked()) return Tape::constant(std::move(val));
    std::vector<int> ishape = x.shape();
    return a.tape->record(std::move(val), {a.node}, [ishape, idx = std::move(idx)](const Tensor& cot) {
        std::vector<double> g(static_cast<size_t>(shape_numel(ishape)), 0.0);
        for (size_t j = 0; j < idx.size(); ++j) g[static_cast<size_t>(idx[j])] += cot[static_cast<int64_t>(j)];
        return std::vector<Tensor>{Tensor::from_data(ishape, std::move(g))};
    });
}

// Channels [c0, c1) of an NCHW tensor.
inline DiffValue slice_channels(const DiffValue& a, int c0, int c1) {
    const Tensor& x = a.value;
    if (x.rank() != 4) throw std::invalid_argument("slice_channels: expects NCHW, got " + x.shape_str());
    const int N = x.extent(0), C = x.extent(1), H = x.extent(2), W = x.extent(3);
    if (c0 < 0 || c1 > C || c0 >= c1) throw std::invalid_argument("slice_channels: bad range");
    const int Cs = c1 - c0;
    const int64_t plane = static_cast<int64_t>(H) * W;
    std::vector<double> out(static_cast<size_t>(N) * Cs * plane);
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < Cs; ++c) {
            const double* src = x.data() + ((static_cast<int64_t>(n) * C + c0 + c) * plane);
            double* dst = out.data() + ((static_cast<int64_t>(n) * Cs + c) * plane);
            std::copy(src, src + plane, dst);
        }
    Tensor val = Tensor::from_data({N, Cs, H, W}, std::move(out));
    if (!a.tracked()) return Tape::constant(std::move(val));
    std::vector<int> ishape = x.shape();
    return a.tape->record(std::move(val), {a.node}, [ishape, c0, Cs, N, C, plane](const Tensor& cot) {
        std::vector<double> g(static_cast<size_t>(shape_numel(ishape)), 0.0);
        for (int n = 0; n < N; ++n)
            for (int c = 0; c < Cs; ++c) {
                const double* src = cot.data() + ((static_cast<int64_t>(n) * Cs + c) * plane);
                double* dst = g.data() + ((static_cast<int64_t>(n) * C + c0 + c) * plane);
                for (int64_t i = 0; i < plane; ++i) dst[i] += src[i];
            }
        return std::vector<Tensor>{Tensor::from_data(ishape, std::move(g))};
    });
}

inline DiffValue concat_channels(const DiffValue& a, const DiffValue& b) {
    const Tensor& x = a.value;
    const Tensor& y = b.value;
    if (x.rank() != 4 || y.rank() != 4 || x.extent(0) != y.extent(0) || x.extent(2) != y.extent(2) ||
        x.extent(3) != y.extent(3))
        throw std::invalid_argument("concat_channels: incompatible " + x.shape_str() + " vs " + y.shape_str());
    const int N = x.extent(0), Ca = x.extent(1), Cb = y.extent(1), H = x.extent(2), W = x.extent(3);
    const int64_t plane = static_cast<int64_t>(H) * W;
    const int C = Ca + Cb;
    std::vector<double> out(static_cast<size_t>(N) * C * plane);
    for (int n = 0; n < N; ++n) {
        std::copy(x.data() + static_cast<int64_t>(n) * Ca * plane, x.data() + static_cast<int64_t>(n + 1) * Ca * plane,
                  out.data() + static_cast<int64_t>(n) * C * plane);
        std::copy(y.data() + static_cast<int64_t>(n) * Cb * plane, y.data() + static_cast<int64_t>(n + 1) * Cb * plane,
                  out.data() + static_cast<int64_t>(n) * C * plane + Ca * plane);
    }
    Tensor val = Tensor::from_data({N, C, H, W}, std::move(out));
    Tape* t = detail::tape_of(a, b);
    if (!t) return Tape::constant(std::move(val));
    const bool ta = a.tracked(), tb = b.tracked();
    std::vector<int> inputs;
    if (ta) inputs.push_back(a.node);
    if (tb) inputs.push_back(b.node);
    return t->record(std::move(val), std::move(inputs), [=](const Tensor& cot) {
        std::vector<Tensor> res;
        if (ta) {
            std::vector<double> g(static_cast<size_t>(N) * Ca * plane);
            for (int n = 0; n < N; ++n)
                std::copy(cot.data() + static_cast<int64_t>(n) * C * plane,
                          cot.data() + static_cast<int64_t>(n) * C * plane + Ca * plane,
                          g.data() + static_cast<int64_t>(n) * Ca * plane);
            res.push_back(Tensor::from_data({N, Ca, H, W}, std::move(g)));
        }
        if (tb) {
            std::vector<double> g(static_cast<size_t>(N) * Cb * plane);
            for (int n = 0; n < N; ++n)
                std::copy(cot.data() + static_cast<int64_t>(n) * C * plane + Ca * plane,
                          cot.data() + static_cast<int64_t>(n + 1) * C * plane,
                          g.data() + static_cast<int64_t>(n) * Cb * plane);
            res.push_back(Tensor::from_data({N, Cb, H, W}, std::move(g)));
        }
        return res;
    });
}

// --- sort (detached permutation) ---------------------------------------------

// Stable descending sort of a rank-1 value. The permutation is a constant of
// the backward pass; gradients flow through the gather only.
inline std::pair<DiffValue, std::vector<int64_t>> sort_desc_detached(const DiffValue& m) {
    const Tensor& x = m.value;
    if (x.rank() != 1) throw std::invalid_argument("sort_desc_detached: expects rank-1, got " + x.shape_str());
    std::vector<int64_t> perm(static_cast<size_t>(x.numel()));
    std::iota(perm.begin(), perm.end(), 0);
    std::stable_sort(perm.begin(), perm.end(), [&](int64_t i, int64_t j) { return x[i] > x[j]; });
    DiffValue sorted = gather_flat(m, perm);
    return {std::move(sorted), std::move(perm)};
}

// --- conv2d -------------------------------------------------------------------

namespace detail {
inline int ceil_div_pos(int a, int b) { return a >= 0 ? (a + b - 1) / b : -((-a) / b); }
} // namespace detail

// Cross-correlation of NCHW input with (Cout,Cin,kh,kw) weights.
inline DiffValue conv2d(const DiffValue& x, const DiffValue& w, const DiffValue* bias, int stride,
                        int padding) {
    const Tensor& xv = x.value;
    const Tensor& wv = w.value;
    if (xv.rank() != 4 || wv.rank() != 4)
        throw std::invalid_argument("conv2d: expects NCHW input and (Cout,Cin,kh,kw) weight");
    if (stride < 1 || padding < 0) throw std::invalid_argument("conv2d: bad stride/padding");
    const int N = xv.extent(0), Cin = xv.extent(1), H = xv.extent(2), W = xv.extent(3);
    const int Cout = wv.extent(0), KH = wv.extent(2), KW = wv.extent(3);
    if (wv.extent(1) != Cin)
        throw std::invalid_argument("conv2d: channel mismatch, input " + xv.shape_str() + " weight " +
                                    wv.shape_str());
    const int OH = (H + 2 * padding - KH) / stride + 1;
    const int OW = (W + 2 * padding - KW) / stride + 1;
    if (OH < 1 || OW < 1 || H + 2 * padding < KH || W + 2 * padding < KW)
        throw std::invalid_argument("conv2d: degenerate output size for input " + xv.shape_str());
    if (bias && (bias->value.rank() != 1 || bias->value.extent(0) != Cout))
        throw std::invalid_argument("conv2d: bias must have shape (Cout)");

    std::vector<double> out(static_cast<size_t>(N) * Cout * OH * OW, 0.0);
    if (bias) {
        for (int n = 0; n < N; ++n)
            for (int co = 0; co < Cout; ++co)
                std::fill_n(out.begin() + (static_cast<int64_t>(n) * Cout + co) * OH * OW,
                            static_cast<int64_t>(OH) * OW, bias->value[co]);
    }
    const double* xd = xv.data();
    const double* wd = wv.data();
    for (int n = 0; n < N; ++n)
        for (int co = 0; co < Cout; ++co)
            for (int ci = 0; ci < Cin; ++ci)
                for (int kh = 0; kh < KH; ++kh)
                    for (int kw = 0; kw < KW; ++kw) {
                        const double wgt = wd[((static_cast<int64_t>(co) * Cin + ci) * KH + kh) * KW + kw];
                        const int oh_lo = std::max(0, detail::ceil_div_pos(padding - kh, stride));
                        const int oh_hi = std::min(OH - 1, (H - 1 + padding - kh) / stride);
                        const int ow_lo = std::max(0, detail::ceil_div_pos(padding - kw, stride));
                        const int ow_hi = std::min(OW - 1, (W - 1 + padding - kw) / stride);
                        for (int oh = oh_lo; oh <= oh_hi; ++oh) {
                            const int ih = oh * stride - padding + kh;
                            const double* xrow = xd + ((static_cast<int64_t>(n) * Cin + ci) * H + ih) * W;
                            double* orow = out.data() + ((static_cast<int64_t>(n) * Cout + co) * OH + oh) * OW;
                            for (int ow = ow_lo; ow <= ow_hi; ++ow)
                                orow[ow] += wgt * xrow[ow * stride - padding + kw];
                        }
                    }
    Tensor val = Tensor::from_data({N, Cout, OH, OW}, std::move(out));

    Tape* t = x.tracked() ? x.tape : (w.tracked() ? w.tape : (bias && bias->tracked() ? bias->tape : nullptr));
    if (!t) return Tape::constant(std::move(val));
    const bool tx = x.tracked(), tw = w.tracked(), tb = bias && bias->tracked();
    std::vector<int> inputs;
    if (tx) inputs.push_back(x.node);
    if (tw) inputs.push_back(w.node);
    if (tb) inputs.push_back(bias->node);
    Tensor xs = xv, ws = wv;
    return t->record(
        std::move(val), std::move(inputs),
        [xs, ws, tx, tw, tb, N, Cin, Cout, H, W, KH, KW, OH, OW, stride, padding](const Tensor& cot) {
            const double* cd = cot.data();
            const double* xd = xs.data();
            const double* wd = ws.data();
            std::vector<double> gx, gw, gb;
            if (tx) gx.assign(static_cast<size_t>(N) * Cin * H * W, 0.0);
            if (tw) gw.assign(static_cast<size_t>(Cout) * Cin * KH * KW, 0.0);
            if (tb) gb.assign(static_cast<size_t>(Cout), 0.0);
            if (tb) {
                for (int n = 0; n < N; ++n)
                    for (int co = 0; co < Cout; ++co) {
                        const double* crow = cd + (static_cast<int64_t>(n) * Cout + co) * OH * OW;
                        double acc = 0.0;
                        for (int64_t i = 0; i < static_cast<int64_t>(OH) * OW; ++i) acc += crow[i];
                        gb[static_cast<size_t>(co)] += acc;
                    }
            }
            if (tx || tw) {
                for (int n = 0; n < N; ++n)
                    for (int co = 0; co < Cout; ++co)
                        for (int ci = 0; ci < Cin; ++ci)
                            for (int kh = 0; kh < KH; ++kh)
                                for (int kw = 0; kw < KW; ++kw) {
                                    const int64_t widx =
                                        ((static_cast<int64_t>(co) * Cin + ci) * KH + kh) * KW + kw;
                                    const double wgt = wd[widx];
                                    const int oh_lo = std::max(0, detail::ceil_div_pos(padding - kh, stride));
                                    const int oh_hi = std::min(OH - 1, (H - 1 + padding - kh) / stride);
                                    const int ow_lo = std::max(0, detail::ceil_div_pos(padding - kw, stride));
                                    const int ow_hi = std::min(OW - 1, (W - 1 + padding - kw) / stride);
                                    double wacc = 0.0;
                                    for (int oh = oh_lo; oh <= oh_hi; ++oh) {
                                        const int ih = oh * stride - padding + kh;
                                        const double* crow =
                                            cd + ((static_cast<int64_t>(n) * Cout + co) * OH + oh) * OW;
                                        const double* xrow =
                                            xd + ((static_cast<int64_t>(n) * Cin + ci) * H + ih) * W;
                                        double* gxrow =
                                            tx ? gx.data() + ((static_cast<int64_t>(n) * Cin + ci) * H + ih) * W
                                               : nullptr;
                                        for (int ow = ow_lo; ow <= ow_hi; ++ow) {
                                            const int iw = ow * stride - padding + kw;
                                            const double c = crow[ow];
                                            if (tw) wacc += c * xrow[iw];
                                            if (tx) gxrow[iw] += c * wgt;
                                        }
                                    }
                                    if (tw) gw[static_cast<size_t>(widx)] += wacc;
                                }
            }
            std::vector<Tensor> res;
            if (tx) res.push_back(Tensor::from_data({N, Cin, H, W}, std::move(gx)));
            if (tw) res.push_back(Tensor::from_data({Cout, Cin, KH, KW}, std::move(gw)));
            if (tb) res.push_back(Tensor::from_data({Cout}, std::move(gb)));
            return res;
        });
}

inline DiffValue conv2d(const DiffValue& x, const DiffValue& w, const DiffValue& bias, int stride = 1,
                        int padding = 0) {
    return conv2d(x, w, &bias, stride, padding);
}

inline DiffValue conv2d(const DiffValue& x, const DiffValue& w, int stride = 1, int padding = 0) {
    return conv2d(x, w, nullptr, stride, padding);
}

// --- bilinear 2x upsample -------------------------------------------------------

// Fixed scale-factor-2 bilinear interpolation, half-pixel centers.
inline DiffValue upsample_bilinear_2x(const DiffValue& a) {
    const Tensor& x = a.value;
    if (x.rank() != 4) throw std::invalid_argument("upsample_bilinear_2x: expects NCHW");
    const int N = x.extent(0), C = x.extent(1), H = x.extent(2), W = x.extent(3);
    const int OH = 2 * H, OW = 2 * W;
    struct Lerp {
        int i0, i1;
        double w1; // weight of i1; i0 gets 1-w1
    };
    auto make = [](int out_len, int in_len) {
        std::vector<Lerp> v(static_cast<size_t>(out_len));
        for (int o = 0; o < out_len; ++o) {
            double p = (o + 0.5) * 0.5 - 0.5;
            int i0 = static_cast<int>(std::floor(p));
            double w1 = p - i0;
            int i1 = i0 + 1;
            if (i0 < 0) { i0 = 0; }
            if (i1 > in_len - 1) { i1 = in_len - 1; }
            v[static_cast<size_t>(o)] = {i0, i1, w1};
        }
        return v;
    };
    const std::vector<Lerp> ly = make(OH, H), lx = make(OW, W);
    std::vector<double> out(static_cast<size_t>(N) * C * OH * OW);
    const double* xd = x.data();
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            const double* plane = xd + (static_cast<int64_t>(n) * C + c) * H * W;
            double* oplane = out.data() + (static_cast<int64_t>(n) * C + c) * OH * OW;
            for (int oy = 0; oy < OH; ++oy) {
                const Lerp& Y = ly[static_cast<size_t>(oy)];
                for (int ox = 0; ox < OW; ++ox) {
                    const Lerp& X = lx[static_cast<size_t>(ox)];
                    double v00 = plane[Y.i0 * W + X.i0], v01 = plane[Y.i0 * W + X.i1];
                    double v10 = plane[Y.i1 * W + X.i0], v11 = plane[Y.i1 * W + X.i1];
                    oplane[oy * OW + ox] = (1 - Y.w1) * ((1 - X.w1) * v00 + X.w1 * v01) +
                                           Y.w1 * ((1 - X.w1) * v10 + X.w1 * v11);
                }
            }
        }
    Tensor val = Tensor::from_data({N, C, OH, OW}, std::move(out));
    if (!a.tracked()) return Tape::constant(std::move(val));
    return a.tape->record(std::move(val), {a.node}, [ly, lx, N, C, H, W, OH, OW](const Tensor& cot) {
        std::vector<double> g(static_cast<size_t>(N) * C * H * W, 0.0);
        const double* cd = cot.data();
        for (int n = 0; n < N; ++n)
            for (int c = 0; c < C; ++c) {
                double* plane = g.data() + (static_cast<int64_t>(n) * C + c) * H * W;
                const double* cplane = cd + (static_cast<int64_t>(n) * C + c) * OH * OW;
                for (int oy = 0; oy < OH; ++oy) {
                    const Lerp& Y = ly[static_cast<size_t>(oy)];
                    for (int ox = 0; ox < OW; ++ox) {
                        const Lerp& X = lx[static_cast<size_t>(ox)];
                        const double cv = cplane[oy * OW + ox];
                        plane[Y.i0 * W + X.i0] += (1 - Y.w1) * (1 - X.w1) * cv;
                        plane[Y.i0 * W + X.i1] += (1 - Y.w1) * X.w1 * cv;
                        plane[Y.i1 * W + X.i0] += Y.w1 * (1 - X.w1) * cv;
                        plane[Y.i1 * W + X.i1] += Y.w1 * X.w1 * cv;
                    }
                }
            }
        return std::vector<Tensor>{Tensor::from_data({N, C, H, W}, std::move(g))};
    });
}

} // namespace segbench
