#pragma once

#include <array>
#include <cmath>
#include <stdexcept>
#include <string>

#include "segbench/ops.hpp"
#include "segbench/params.hpp"

namespace segbench {

// Per-channel affine + (for BN-style layers) running statistics.
// Variance is biased (divide by count) throughout this project.
struct NormParams {
    Param gamma, beta;              // shape {C}
    Tensor running_mean, running_var; // shape {C}, used by batch-stat branches
    double eps = 1e-5;
    double momentum = 0.1;

    static NormParams make(int channels, const std::string& prefix, double eps = 1e-5,
                           double momentum = 0.1) {
        NormParams p;
        p.gamma = Param(prefix + ".gamma", Tensor::full({channels}, 1.0), /*affine=*/true);
        p.beta = Param(prefix + ".beta", Tensor::zeros({channels}), /*affine=*/true);
        p.running_mean = Tensor::zeros({channels});
        p.running_var = Tensor::full({channels}, 1.0);
        p.eps = eps;
        p.momentum = momentum;
        return p;
    }

    int channels() const { return gamma.value.extent(0); }
};

namespace detail {

inline void check_norm_input(const DiffValue& x, const NormParams& p, const char* name) {
    if (x.value.rank() != 4)
        throw std::invalid_argument(std::string(name) + ": expects NCHW, got " + x.value.shape_str());
    if (x.value.extent(1) != p.channels())
        throw std::invalid_argument(std::string(name) + ": channel mismatch, input " + x.value.shape_str() +
                                    " vs params C=" + std::to_string(p.channels()));
}

inline DiffValue per_channel(Binder& bind, Param& p, const std::vector<int>& full_shape) {
    DiffValue v = bind(p);
    return expand(reshape(v, {1, full_shape[1], 1, 1}), full_shape);
}

inline DiffValue affine(Binder& bind, const DiffValue& xhat, NormParams& p) {
    const std::vector<int> fs = xhat.value.shape();
    return add(mul(xhat, per_channel(bind, p.gamma, fs)), per_channel(bind, p.beta, fs));
}

// standardize x with mean/var given at broadcastable (keep) shapes
inline DiffValue standardize(const DiffValue& x, const DiffValue& mu, const DiffValue& var, double eps) {
    const std::vector<int> fs = x.value.shape();
    DiffValue xmu = sub(x, expand(mu, fs));
    DiffValue denom = sqrt(expand(var, fs) + eps);
    return div(xmu, denom);
}

inline void update_running(NormParams& p, const Tensor& batch_mean, const Tensor& batch_var) {
    const int C = p.channels();
    std::vector<double> rm(static_cast<size_t>(C)), rv(static_cast<size_t>(C));
    for (int c = 0; c < C; ++c) {
        rm[static_cast<size_t>(c)] = (1.0 - p.momentum) * p.running_mean[c] + p.momentum * batch_mean[c];
        rv[static_cast<size_t>(c)] = (1.0 - p.momentum) * p.running_var[c] + p.momentum * batch_var[c];
    }
    p.running_mean = Tensor::from_data({C}, std::move(rm));
    p.running_var = Tensor::from_data({C}, std::move(rv));
}

} // namespace detail

// Batch normalization over (N,H,W). Train mode uses batch statistics and
// updates running stats as running <- (1-momentum)*running + momentum*batch.
inline DiffValue batch_norm(Binder& bind, const DiffValue& x, NormParams& p, Mode mode) {
    detail::check_norm_input(x, p, "batch_norm");
    const int C = x.value.extent(1);
    DiffValue xhat;
    if (mode == Mode::train) {
        const int64_t count =
            static_cast<int64_t>(x.value.extent(0)) * x.value.extent(2) * x.value.extent(3);
        if (count <= 1)
            throw std::invalid_argument("batch_norm: degenerate batch, N*H*W = 1 in train mode");
        DiffValue mu = mean(x, {0, 2, 3}, true);
        DiffValue xc = sub(x, expand(mu, x.value.shape()));
        DiffValue var = mean(mul(xc, xc), {0, 2, 3}, true);
        detail::update_running(p, mu.value.reshaped({C}), var.value.reshaped({C}));
        xhat = div(xc, sqrt(expand(var, x.value.shape()) + p.eps));
    } else {
        DiffValue mu = Tape::constant(p.running_mean.reshaped({1, C, 1, 1}));
        DiffValue var = Tape::constant(p.running_var.reshaped({1, C, 1, 1}));
        xhat = detail::standardize(x, mu, var, p.eps);
    }
    return detail::affine(bind, xhat, p);
}

// Instance normalization: each (n,c) plane standardized over (H,W).
// No running statistics; mode-independent.
inline DiffValue instance_norm(Binder& bind, const DiffValue& x, NormParams& p) {
    detail::check_norm_input(x, p, "instance_norm");
    if (static_cast<int64_t>(x.value.extent(2)) * x.value.extent(3) < 2)
        throw std::invalid_argument("instance_norm: H*W must be >= 2");
    DiffValue mu = mean(x, {2, 3}, true);
    DiffValue xc = sub(x, expand(mu, x.value.shape()));
    DiffValue var = mean(mul(xc, xc), {2, 3}, true);
    DiffValue xhat = div(xc, sqrt(expand(var, x.value.shape()) + p.eps));
    return detail::affine(bind, xhat, p);
}

// Layer normalization: each sample standardized over (C,H,W); affine stays
// per channel.
inline DiffValue layer_norm(Binder& bind, const DiffValue& x, NormParams& p) {
    detail::check_norm_input(x, p, "layer_norm");
    if (static_cast<int64_t>(x.value.extent(1)) * x.value.extent(2) * x.value.extent(3) < 2)
        throw std::invalid_argument("layer_norm: C*H*W must be >= 2");
    DiffValue mu = mean(x, {1, 2, 3}, true);
    DiffValue xc = sub(x, expand(mu, x.value.shape()));
    DiffValue var = mean(mul(xc, xc), {1, 2, 3}, true);
    DiffValue xhat = div(xc, sqrt(expand(var, x.value.shape()) + p.eps));
    return detail::affine(bind, xhat, p);
}

// Softmax mixture weights over the IN/LN/BN statistics branches.
struct SwitchableWeights {
    Param mean_logits, var_logits;      // shape {3}, branch order IN, LN, BN
    std::array<bool, 3> active{true, true, true};

    static constexpr int kIN = 0, kLN = 1, kBN = 2;

    static SwitchableWeights make(const std::string& prefix,
                                  std::array<bool, 3> branches = {true, true, true}) {
        SwitchableWeights w;
        w.mean_logits = Param(prefix + ".mean_logits", Tensor::zeros({3}), /*affine=*/true);
        w.var_logits = Param(prefix + ".var_logits", Tensor::zeros({3}), /*affine=*/true);
        w.active = branches;
        return w;
    }
};

namespace detail {

// softmax over the active subset; inactive branches get no weight at all
inline std::array<DiffValue, 3> sn_softmax(Binder& bind, Param& logits,
                                           const std::array<bool, 3>& active) {
    DiffValue l = bind(logits);
    double cmax = -1e300;
    for (int k = 0; k < 3; ++k)
        if (active[static_cast<size_t>(k)]) cmax = std::max(cmax, logits.value[k]);
    std::array<DiffValue, 3> e;
    DiffValue total;
    bool first = true;
    for (int k = 0; k < 3; ++k) {
        if (!active[static_cast<size_t>(k)]) continue;
        e[static_cast<size_t>(k)] = exp(gather_flat(l, {k}) - cmax);
        total = first ? e[static_cast<size_t>(k)] : add(total, e[static_cast<size_t>(k)]);
        first = false;
    }
    std::array<DiffValue, 3> w;
    for (int k = 0; k < 3; ++k)
        if (active[static_cast<size_t>(k)]) w[static_cast<size_t>(k)] = div(e[static_cast<size_t>(k)], total);
    return w;
}

} // namespace detail

// Switchable normalization: per-branch statistics (IN over (H,W), LN over
// (C,H,W), BN over (N,H,W)), mixed with separate softmax weights for means
// and variances, then per-channel affine. The BN branch keeps running
// statistics exactly like batch_norm.
inline DiffValue switchable_norm(Binder& bind, const DiffValue& x, NormParams& p, SwitchableWeights& w,
                                 Mode mode) {
    detail::check_norm_input(x, p, "switchable_norm");
    if (!w.active[0] && !w.active[1] && !w.active[2])
        throw std::invalid_argument("switchable_norm: empty branch set");
    const std::vector<int> fs = x.value.shape();
    const int N = fs[0], C = fs[1];
    const std::vector<int> stat_shape = {N, C, 1, 1};

    std::array<DiffValue, 3> mu, var;
    if (w.active[SwitchableWeights::kIN]) {
        DiffValue m = mean(x, {2, 3}, true);
        DiffValue xc = sub(x, expand(m, fs));
        mu[0] = m;
        var[0] = mean(mul(xc, xc), {2, 3}, true);
    }
    if (w.active[SwitchableWeights::kLN]) {
        DiffValue m = mean(x, {1, 2, 3}, true);
        DiffValue xc = sub(x, expand(m, fs));
        mu[1] = expand(m, stat_shape);
        var[1] = expand(mean(mul(xc, xc), {1, 2, 3}, true), stat_shape);
    }
    if (w.active[SwitchableWeights::kBN]) {
        if (mode == Mode::train) {
            const int64_t count = static_cast<int64_t>(N) * fs[2] * fs[3];
            if (count <= 1)
                throw std::invalid_argument("switchable_norm: degenerate batch for BN branch");
            DiffValue m = mean(x, {0, 2, 3}, true);
            DiffValue xc = sub(x, expand(m, fs));
            DiffValue v = mean(mul(xc, xc), {0, 2, 3}, true);
            detail::update_running(p, m.value.reshaped({C}), v.value.reshaped({C}));
            mu[2] = expand(m, stat_shape);
            var[2] = expand(v, stat_shape);
        } else {
            mu[2] = expand(Tape::constant(p.running_mean.reshaped({1, C, 1, 1})), stat_shape);
            var[2] = expand(Tape::constant(p.running_var.reshaped({1, C, 1, 1})), stat_shape);
        }
    }

    std::array<DiffValue, 3> wm = detail::sn_softmax(bind, w.mean_logits, w.active);
    std::array<DiffValue, 3> wv = detail::sn_softmax(bind, w.var_logits, w.active);
    DiffValue mixed_mu, mixed_var;
    bool first = true;
    for (int k = 0; k < 3; ++k) {
        if (!w.active[static_cast<size_t>(k)]) continue;
        DiffValue tm = mul(wm[static_cast<size_t>(k)], mu[static_cast<size_t>(k)]);
        DiffValue tv = mul(wv[static_cast<size_t>(k)], var[static_cast<size_t>(k)]);
        mixed_mu = first ? tm : add(mixed_mu, tm);
        mixed_var = first ? tv : add(mixed_var, tv);
        first = false;
    }
    DiffValue xhat = detail::standardize(x, mixed_mu, mixed_var, p.eps);
    return detail::affine(bind, xhat, p);
}

} // namespace segbench
