#pragma once

#include <functional>
#include <stdexcept>
#include <string>

#include "segbench/ops.hpp"
#include "segbench/params.hpp"
#include "segbench/tape.hpp"
#include "segbench/tensor.hpp"

namespace segbench {

// Scalar-valued function of one tensor, rebuilt on a fresh tape per call.
using ScalarFn = std::function<DiffValue(Tape&, const DiffValue&)>;

// Central-difference check of reverse-mode gradients.
// Returns max over entries of |analytic - numeric| / max(1e-8, |analytic| + |numeric|).
// Non-finite evaluations throw, naming the perturbed entry.
inline double grad_check(const ScalarFn& f, const Tensor& x, double eps = 1e-5) {
    Tensor analytic;
    {
        Tape tape;
        DiffValue xv = tape.leaf(x, /*is_param=*/true);
        DiffValue y = f(tape, xv);
        if (!y.value.is_scalar())
            throw std::invalid_argument("grad_check: f must be scalar-valued, got " + y.value.shape_str());
        if (!std::isfinite(y.value[0])) throw std::runtime_error("grad_check: non-finite f(x)");
        analytic = tape.backward(y).at(xv.node);
    }

    auto eval_at = [&](const Tensor& p) {
        Tape tape;
        DiffValue y = f(tape, tape.leaf(p, false));
        return y.value[0];
    };

    double max_err = 0.0;
    std::vector<double> base = x.vec();
    for (int64_t i = 0; i < x.numel(); ++i) {
        std::vector<double> up = base, dn = base;
        up[static_cast<size_t>(i)] += eps;
        dn[static_cast<size_t>(i)] -= eps;
        double fp = eval_at(Tensor::from_data(x.shape(), std::move(up)));
        double fm = eval_at(Tensor::from_data(x.shape(), std::move(dn)));
        if (!std::isfinite(fp) || !std::isfinite(fm))
            throw std::runtime_error("grad_check: non-finite evaluation at entry " + std::to_string(i));
        double numeric = (fp - fm) / (2.0 * eps);
        double a = analytic[i];
        double err = std::abs(a - numeric) / std::max(1e-8, std::abs(a) + std::abs(numeric));
        if (err > max_err) max_err = err;
    }
    return max_err;
}

// Same check for a layer parameter: f builds the loss through the usual
// Binder path, and the entries of `p` are perturbed in place for the
// numeric side. Restores p.value on exit.
inline double grad_check_param(const std::function<DiffValue(Tape&, Binder&)>& f, Param& p,
                               double eps = 1e-5) {
    Tensor analytic;
    {
        Tape tape;
        Binder bind(tape);
        DiffValue y = f(tape, bind);
        if (!y.value.is_scalar())
            throw std::invalid_argument("grad_check_param: f must be scalar-valued");
        GradMap grads = tape.backward(y);
        bool found = false;
        for (const Binder::Binding& b : bind.bindings()) {
            if (b.param == &p) {
                analytic = grads.at(b.value.node);
                found = true;
                break;
            }
        }
        if (!found) throw std::invalid_argument("grad_check_param: parameter never bound by f");
    }

    const Tensor saved = p.value;
    auto eval_with = [&](Tensor t) {
        p.value = std::move(t);
        Tape tape;
        Binder bind(tape);
        double v = f(tape, bind).value[0];
        return v;
    };

    double max_err = 0.0;
    std::vector<double> base = saved.vec();
    for (int64_t i = 0; i < saved.numel(); ++i) {
        std::vector<double> up = base, dn = base;
        up[static_cast<size_t>(i)] += eps;
        dn[static_cast<size_t>(i)] -= eps;
        double fp = eval_with(Tensor::from_data(saved.shape(), std::move(up)));
        double fm = eval_with(Tensor::from_data(saved.shape(), std::move(dn)));
        if (!std::isfinite(fp) || !std::isfinite(fm)) {
            p.value = saved;
            throw std::runtime_error("grad_check_param: non-finite evaluation at entry " + std::to_string(i));
        }
        double numeric = (fp - fm) / (2.0 * eps);
        double a = analytic[i];
        double err = std::abs(a - numeric) / std::max(1e-8, std::abs(a) + std::abs(numeric));
        if (err > max_err) max_err = err;
    }
    p.value = saved;
    return max_err;
}

} // namespace segbench
