#pragma once

#include <chrono>
#include <cstdint>
#include <string>
#include <vector>

#include "segbench/divergence.hpp"
#include "segbench/grad_check.hpp"
#include "segbench/losses.hpp"
#include "segbench/norm.hpp"
#include "segbench/ops.hpp"
#include "segbench/rng.hpp"
#include "segbench/train.hpp"

namespace segbench {

struct CheckResult {
    std::string name;
    bool pass = false;
    std::string detail;
};

namespace detail {

inline Tensor draw(std::vector<int> shape, CounterRng& rng, double lo, double hi) {
    std::vector<double> d(static_cast<size_t>(shape_numel(shape)));
    for (double& v : d) v = rng.uniform(lo, hi);
    return Tensor::from_data(std::move(shape), std::move(d));
}

inline Tensor draw_away(std::vector<int> shape, CounterRng& rng, double margin) {
    std::vector<double> d(static_cast<size_t>(shape_numel(shape)));
    for (double& v : d) {
        do {
            v = rng.uniform(-2.0, 2.0);
        } while (std::abs(v) < margin);
    }
    return Tensor::from_data(std::move(shape), std::move(d));
}

inline std::string fmt_err(double e) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "max rel err %.3g", e);
    return buf;
}

} // namespace detail

// Central-difference checks across every differentiable op, every norm
// layer and every loss at generic points (kinks avoided by rejection).
// Runs at least `min_cases` individual checks.
inline std::vector<CheckResult> verify_gradcheck(uint64_t seed = 2024, int min_cases = 200,
                                                 double tol = 1e-5) {
    std::vector<CheckResult> out;
    CounterRng rng(seed);
    int done = 0;

    auto push = [&](const std::string& name, double err) {
        out.push_back({name, err < tol, detail::fmt_err(err)});
        ++done;
    };

    for (int round = 0; done < min_cases; ++round) {
        const std::string tag = "#" + std::to_string(round);
        Tensor x = detail::draw_away({2, 3}, rng, 0.15);
        Tensor pos = detail::draw({2, 3}, rng, 0.2, 2.0);
        Tensor other = detail::draw_away({2, 3}, rng, 0.3);

        push("add " + tag, grad_check([&](Tape& t, const DiffValue& v) { return sum_all(add(v, t.leaf(other))); }, x));
        push("sub " + tag, grad_check([&](Tape& t, const DiffValue& v) { return sum_all(sub(v, t.leaf(other))); }, x));
        push("mul " + tag, grad_check([&](Tape& t, const DiffValue& v) { return sum_all(mul(v, t.leaf(other))); }, x));
        push("div " + tag, grad_check([&](Tape& t, const DiffValue& v) { return sum_all(div(v, t.leaf(other))); }, x));
        push("neg " + tag, grad_check([](Tape&, const DiffValue& v) { return sum_all(neg(v)); }, x));
        push("log " + tag, grad_check([](Tape&, const DiffValue& v) { return sum_all(log(v)); }, pos));
        push("exp " + tag, grad_check([](Tape&, const DiffValue& v) { return sum_all(exp(v)); }, x));
        push("sqrt " + tag, grad_check([](Tape&, const DiffValue& v) { return sum_all(sqrt(v)); }, pos));
        push("relu " + tag, grad_check([](Tape&, const DiffValue& v) { return sum_all(relu(v)); }, x));
        push("sigmoid " + tag, grad_check([](Tape&, const DiffValue& v) { return sum_all(sigmoid(v)); }, x));
        push("softplus " + tag, grad_check([](Tape&, const DiffValue& v) { return sum_all(softplus(v)); }, x));
        push("reduce-mean " + tag, grad_check([](Tape&, const DiffValue& v) {
                  return sum_all(mul(expand(mean(v, {0}, true), {2, 3}), v));
              }, x));
        push("reduce-sum " + tag, grad_check([](Tape&, const DiffValue& v) {
                  return mean_all(mul(expand(sum(v, {1}, true), {2, 3}), v));
              }, x));

        Tensor x4 = detail::draw_away({2, 4, 4, 4}, rng, 0.05);
        Tensor w4 = detail::draw({3, 4, 3, 3}, rng, -0.8, 0.8);
        Tensor b4 = detail::draw({3}, rng, -0.5, 0.5);
        push("conv2d-x " + tag, grad_check([&](Tape& t, const DiffValue& v) {
                 return sum_all(sigmoid(conv2d(v, t.leaf(w4), t.leaf(b4), 1, 1)));
             }, x4));
        push("conv2d-w " + tag, grad_check([&](Tape& t, const DiffValue& v) {
                 return sum_all(sigmoid(conv2d(t.leaf(x4), v, t.leaf(b4), 2, 1)));
             }, w4));
        push("conv2d-b " + tag, grad_check([&](Tape& t, const DiffValue& v) {
                 return sum_all(sigmoid(conv2d(t.leaf(x4), t.leaf(w4), v, 1, 0)));
             }, b4));
        push("upsample " + tag, grad_check([](Tape&, const DiffValue& v) {
                 return sum_all(mul(upsample_bilinear_2x(v), upsample_bilinear_2x(v)));
             }, x4));
        {
            Tensor m = detail::draw_away({7}, rng, 0.05); // distinct values, no ties w.p. 1
            push("sort-gather " + tag, grad_check([](Tape&, const DiffValue& v) {
                     auto [sorted, perm] = sort_desc_detached(v);
                     return sum_all(mul(sorted, sorted));
                 }, m));
        }

        // norm layers, wrt input and parameters
        Tensor xn = detail::draw({2, 3, 3, 3}, rng, -2.0, 2.0);
        Tensor probe = detail::draw({2, 3, 3, 3}, rng, -1.0, 1.0);
        auto weighted = [probe](DiffValue y) { return mean_all(mul(y, Tape::constant(probe))); };
        {
            NormParams p = NormParams::make(3, "bn");
            p.gamma.value = detail::draw({3}, rng, 0.5, 1.5);
            p.beta.value = detail::draw({3}, rng, -0.5, 0.5);
            push("batch_norm-x " + tag, grad_check([&](Tape& t, const DiffValue& v) {
                     Binder bind(t);
                     return weighted(batch_norm(bind, v, p, Mode::train));
                 }, xn));
            auto f = [&](Tape& t, Binder& bind) { return weighted(batch_norm(bind, t.leaf(xn), p, Mode::train)); };
            push("batch_norm-gamma " + tag, grad_check_param(f, p.gamma));
            push("batch_norm-beta " + tag, grad_check_param(f, p.beta));
        }
        {
            NormParams p = NormParams::make(3, "in");
            push("instance_norm-x " + tag, grad_check([&](Tape& t, const DiffValue& v) {
                     Binder bind(t);
                     return weighted(instance_norm(bind, v, p));
                 }, xn));
            auto f = [&](Tape& t, Binder& bind) { return weighted(instance_norm(bind, t.leaf(xn), p)); };
            push("instance_norm-gamma " + tag, grad_check_param(f, p.gamma));
        }
        {
            NormParams p = NormParams::make(3, "ln");
            push("layer_norm-x " + tag, grad_check([&](Tape& t, const DiffValue& v) {
                     Binder bind(t);
                     return weighted(layer_norm(bind, v, p));
                 }, xn));
            auto f = [&](Tape& t, Binder& bind) { return weighted(layer_norm(bind, t.leaf(xn), p)); };
            push("layer_norm-beta " + tag, grad_check_param(f, p.beta));
        }
        {
            NormParams p = NormParams::make(3, "sn");
            SwitchableWeights w = SwitchableWeights::make("sn");
            w.mean_logits.value = detail::draw({3}, rng, -1.0, 1.0);
            w.var_logits.value = detail::draw({3}, rng, -1.0, 1.0);
            push("switchable_norm-x " + tag, grad_check([&](Tape& t, const DiffValue& v) {
                     Binder bind(t);
                     return weighted(switchable_norm(bind, v, p, w, Mode::train));
                 }, xn));
            auto f = [&](Tape& t, Binder& bind) {
                return weighted(switchable_norm(bind, t.leaf(xn), p, w, Mode::train));
            };
            push("switchable_norm-gamma " + tag, grad_check_param(f, p.gamma));
            push("switchable_norm-mean_logits " + tag, grad_check_param(f, w.mean_logits));
            push("switchable_norm-var_logits " + tag, grad_check_param(f, w.var_logits));
        }

        // losses at generic points: keep |s| away from 1 (lovasz kink at m=0)
        {
            std::vector<double> sv(12), yv(12);
            for (size_t i = 0; i < 12; ++i) {
                do {
                    sv[i] = rng.uniform(-2, 2);
                } while (std::abs(std::abs(sv[i]) - 1.0) < 0.05);
                yv[i] = rng.uniform() < 0.5 ? 1.0 : 0.0;
            }
            yv[static_cast<size_t>(rng.uniform_int(12))] = 1.0;
            Tensor targets = Tensor::from_data({1, 3, 2, 2}, yv);
            Tensor logits = Tensor::from_data({1, 3, 2, 2}, sv);
            auto wrap = [&](auto fn) {
                return [&, fn](Tape&, const DiffValue& v) {
                    BinaryTaskBatch b;
                    b.logits = v;
                    b.targets = targets;
                    return fn(b);
                };
            };
            push("bce_loss " + tag, grad_check(wrap([](const BinaryTaskBatch& b) { return bce_loss(b); }), logits));
            push("dice_loss " + tag, grad_check(wrap([](const BinaryTaskBatch& b) { return dice_loss(b); }), logits));
            push("lovasz_hinge " + tag,
                 grad_check(wrap([](const BinaryTaskBatch& b) { return lovasz_hinge(b); }), logits));
            push("hybrid_loss " + tag,
                 grad_check(wrap([](const BinaryTaskBatch& b) { return hybrid_loss(b, {1.0, 1.0}); }), logits));
        }
    }
    return out;
}

// Exhaustive binary label patterns for p in 1..8, `draws` random logit
// vectors each: lovasz_hinge must match the set-function oracle to 1e-9.
inline std::vector<CheckResult> verify_lovasz_oracle(uint64_t seed = 7, int draws = 50,
                                                     double tol = 1e-9) {
    std::vector<CheckResult> out;
    CounterRng rng(seed);
    for (int p = 1; p <= 8; ++p) {
        double worst = 0.0;
        int cases = 0;
        for (uint32_t pattern = 0; pattern < (1u << p); ++pattern) {
            std::vector<int> y(static_cast<size_t>(p));
            for (int i = 0; i < p; ++i) y[static_cast<size_t>(i)] = (pattern >> i) & 1;
            for (int d = 0; d < draws; ++d) {
                std::vector<double> s(static_cast<size_t>(p)), m(static_cast<size_t>(p)),
                    yd(static_cast<size_t>(p));
                for (int i = 0; i < p; ++i) {
                    s[static_cast<size_t>(i)] = rng.uniform(-3, 3);
                    yd[static_cast<size_t>(i)] = y[static_cast<size_t>(i)];
                    m[static_cast<size_t>(i)] =
                        1.0 - (y[static_cast<size_t>(i)] == 1 ? 1.0 : -1.0) * s[static_cast<size_t>(i)];
                }
                Tape t;
                BinaryTaskBatch b;
                b.logits = t.leaf(Tensor::from_data({1, 1, 1, p}, s));
                b.targets = Tensor::from_data({1, 1, 1, p}, yd);
                worst = std::max(worst, std::abs(lovasz_hinge(b).value[0] - lovasz_extension_oracle(m, y)));
                ++cases;
            }
        }
        char buf[96];
        std::snprintf(buf, sizeof(buf), "%d patterns x %d draws, worst |diff| %.3g",
                      1 << p, draws, worst);
        out.push_back({"lovasz-oracle p=" + std::to_string(p) + " (" + std::to_string(cases) + " cases)",
                       worst < tol, buf});
    }
    return out;
}

// Hand values of the Gaussian KL machinery and the log-orientation identity.
inline std::vector<CheckResult> verify_divergence_math(double tol = 1e-12) {
    std::vector<CheckResult> out;
    const double floor = 1e-8;
    auto close = [tol](double a, double b) { return std::abs(a - b) < tol; };

    out.push_back({"kl_gaussian (0,1) vs (1,1) = 0.5", close(kl_gaussian(0, 1, 1, 1, floor), 0.5), ""});
    out.push_back({"sym_kl (0,1) vs (1,1) = 1.0", close(sym_kl(0, 1, 1, 1, floor), 1.0), ""});
    out.push_back({"sym_kl (0,1) vs (0,4) = 1.125", close(sym_kl(0, 1, 0, 4, floor), 1.125), ""});

    CounterRng rng(11);
    double worst = 0.0;
    for (int i = 0; i < 100; ++i) {
        double ma = rng.uniform(-3, 3), mb = rng.uniform(-3, 3);
        double va = rng.uniform(0, 4), vb = rng.uniform(0, 4);
        double std_sum = sym_kl(ma, va, mb, vb, floor);
        double flipped = kl_gaussian(ma, va, mb, vb, floor, KlLogOrientation::as_printed) +
                         kl_gaussian(mb, vb, ma, va, floor, KlLogOrientation::as_printed);
        worst = std::max(worst, std::abs(std_sum - flipped));
    }
    out.push_back({"sym_kl invariant to the printed log orientation", worst < tol, detail::fmt_err(worst)});

    LayerStats a("p", 3);
    CounterRng r2(12);
    for (auto& ch : a.channels) {
        ch.count = 100;
        ch.mean = r2.uniform(-1, 1);
        ch.m2 = r2.uniform(10, 200);
    }
    out.push_back({"layer_divergence(A,A) = 0", layer_divergence(a, a, floor) == 0.0, ""});
    return out;
}

// The phase layout of the lr schedule, at full scale and at toy scale.
inline std::vector<CheckResult> verify_schedule(double tol = 1e-12) {
    std::vector<CheckResult> out;
    OptimConfig full;
    full.base_lr = 0.01;
    full.warmup_iters = 1000;
    full.constant_iters = 7000;
    full.poly_iters = 17000;
    out.push_back({"warmup end hits base_lr exactly", lr_at(full, 999) == 0.01, ""});
    out.push_back({"poly start is base_lr exactly", lr_at(full, 8000) == 0.01, ""});
    out.push_back({"full-scale poly midpoint = 0.01*0.5^0.9",
                   std::abs(lr_at(full, 16500) - 0.01 * std::pow(0.5, 0.9)) < tol, ""});

    OptimConfig toy;
    toy.base_lr = 0.01;
    toy.warmup_iters = 100;
    toy.constant_iters = 700;
    toy.poly_iters = 1700;
    out.push_back({"toy-scale poly midpoint = 0.01*0.5^0.9",
                   std::abs(lr_at(toy, 1650) - 0.01 * std::pow(0.5, 0.9)) < tol, ""});
    out.push_back({"ramp is linear: lr(49)/lr(99) = 0.5",
                   std::abs(lr_at(toy, 49) / lr_at(toy, 99) - 0.5) < tol, ""});
    bool threw = false;
    try {
        lr_at(toy, toy.total_iters());
    } catch (const std::out_of_range&) {
        threw = true;
    }
    out.push_back({"out-of-schedule iteration rejected", threw, ""});
    return out;
}

inline bool all_pass(const std::vector<CheckResult>& rs) {
    for (const CheckResult& r : rs)
        if (!r.pass) return false;
    return true;
}

} // namespace segbench
