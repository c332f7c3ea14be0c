#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "segbench/blocks.hpp"
#include "segbench/grad_check.hpp"
#include "segbench/norm.hpp"
#include "segbench/rng.hpp"

using namespace segbench;

namespace {

Tensor random_tensor(std::vector<int> shape, CounterRng& rng, double lo = -2.0, double hi = 2.0) {
    std::vector<double> d(static_cast<size_t>(shape_numel(shape)));
    for (double& v : d) v = rng.uniform(lo, hi);
    return Tensor::from_data(std::move(shape), std::move(d));
}

// plain two-pass mean/variance over a flat range
std::pair<double, double> mean_var(const std::vector<double>& xs) {
    double m = 0;
    for (double v : xs) m += v;
    m /= static_cast<double>(xs.size());
    double s = 0;
    for (double v : xs) s += (v - m) * (v - m);
    return {m, s / static_cast<double>(xs.size())};
}

} // namespace

TEST_CASE("batch_norm train mode standardizes per channel") {
    CounterRng rng(5);
    Tensor x = random_tensor({3, 4, 5, 5}, rng);
    NormParams p = NormParams::make(4, "bn");
    Tape t;
    Binder bind(t);
    Tensor y = batch_norm(bind, t.leaf(x), p, Mode::train).value;
    for (int c = 0; c < 4; ++c) {
        std::vector<double> vals;
        for (int n = 0; n < 3; ++n)
            for (int h = 0; h < 5; ++h)
                for (int w = 0; w < 5; ++w) vals.push_back(y.at4(n, c, h, w));
        auto [m, v] = mean_var(vals);
        CHECK(std::abs(m) < 1e-9);
        CHECK(v <= 1.0 + 1e-12);
        CHECK(v >= 1.0 - 10 * p.eps);
    }
}

TEST_CASE("batch_norm constant channel collapses to beta") {
    NormParams p = NormParams::make(2, "bn");
    p.beta.value = Tensor::from_data({2}, {0.7, -0.3});
    Tape t;
    Binder bind(t);
    Tensor x = Tensor::full({2, 2, 3, 3}, 5.0);
    Tensor y = batch_norm(bind, t.leaf(x), p, Mode::train).value;
    for (int n = 0; n < 2; ++n)
        for (int h = 0; h < 3; ++h)
            for (int w = 0; w < 3; ++w) {
                CHECK(y.at4(n, 0, h, w) == doctest::Approx(0.7));
                CHECK(y.at4(n, 1, h, w) == doctest::Approx(-0.3));
            }
}

TEST_CASE("batch_norm eval mode uses running statistics") {
    NormParams p = NormParams::make(1, "bn");
    p.gamma.value = Tensor::from_data({1}, {2.0});
    p.beta.value = Tensor::from_data({1}, {1.0});
    Tape t;
    Binder bind(t);
    Tensor y = batch_norm(bind, t.leaf(Tensor::full({1, 1, 1, 1}, 1.0)), p, Mode::eval).value;
    CHECK(y[0] == doctest::Approx(2.0 / std::sqrt(1.0 + p.eps) + 1.0).epsilon(1e-12));
}

TEST_CASE("batch_norm updates running stats and rejects degenerate batches") {
    CounterRng rng(6);
    NormParams p = NormParams::make(2, "bn");
    Tensor x = random_tensor({2, 2, 3, 3}, rng);
    {
        Tape t;
        Binder bind(t);
        batch_norm(bind, t.leaf(x), p, Mode::train);
    }
    std::vector<double> ch0;
    for (int n = 0; n < 2; ++n)
        for (int h = 0; h < 3; ++h)
            for (int w = 0; w < 3; ++w) ch0.push_back(x.at4(n, 0, h, w));
    auto [m, v] = mean_var(ch0);
    CHECK(p.running_mean[0] == doctest::Approx(0.9 * 0.0 + 0.1 * m).epsilon(1e-12));
    CHECK(p.running_var[0] == doctest::Approx(0.9 * 1.0 + 0.1 * v).epsilon(1e-12));

    Tape t;
    Binder bind(t);
    NormParams p1 = NormParams::make(2, "bn");
    CHECK_THROWS(batch_norm(bind, t.leaf(Tensor::zeros({1, 2, 1, 1})), p1, Mode::train));
}

TEST_CASE("instance_norm hand value on a 2x2 plane") {
    NormParams p = NormParams::make(1, "in");
    Tape t;
    Binder bind(t);
    Tensor y = instance_norm(bind, t.leaf(Tensor::from_data({1, 1, 2, 2}, {1, 2, 3, 4})), p).value;
    const double denom = std::sqrt(1.25 + p.eps); // biased variance of {1,2,3,4}
    CHECK(y[0] == doctest::Approx(-1.5 / denom).epsilon(1e-12));
    CHECK(y[1] == doctest::Approx(-0.5 / denom).epsilon(1e-12));
    CHECK(y[2] == doctest::Approx(0.5 / denom).epsilon(1e-12));
    CHECK(y[3] == doctest::Approx(1.5 / denom).epsilon(1e-12));
}

TEST_CASE("instance_norm is invariant to per-plane positive affine remaps") {
    CounterRng rng(7);
    Tensor x = random_tensor({2, 3, 4, 4}, rng);
    std::vector<double> remapped(x.vec());
    for (int n = 0; n < 2; ++n)
        for (int c = 0; c < 3; ++c) {
            double a = rng.uniform(0.5, 3.0), b = rng.uniform(-2.0, 2.0);
            for (int h = 0; h < 4; ++h)
                for (int w = 0; w < 4; ++w) {
                    size_t i = static_cast<size_t>(((n * 3 + c) * 4 + h) * 4 + w);
                    remapped[i] = a * remapped[i] + b;
                }
        }
    Tensor xr = Tensor::from_data({2, 3, 4, 4}, std::move(remapped));

    // with a negligible variance floor the invariance holds to 1e-9
    {
        NormParams p = NormParams::make(3, "in", /*eps=*/1e-12);
        Tape t;
        Binder bind(t);
        Tensor base = instance_norm(bind, t.leaf(x), p).value;
        Tensor y = instance_norm(bind, t.leaf(xr), p).value;
        for (int64_t i = 0; i < y.numel(); ++i) CHECK(std::abs(y[i] - base[i]) < 1e-9);
    }
    // the default eps floor perturbs scale remaps at the ~1e-5 level
    {
        NormParams p = NormParams::make(3, "in");
        Tape t;
        Binder bind(t);
        Tensor base = instance_norm(bind, t.leaf(x), p).value;
        Tensor y = instance_norm(bind, t.leaf(xr), p).value;
        for (int64_t i = 0; i < y.numel(); ++i) CHECK(std::abs(y[i] - base[i]) < 1e-4);
    }

    NormParams p = NormParams::make(3, "in");
    Tape t;
    Binder bind(t);
    CHECK_THROWS(instance_norm(bind, t.leaf(Tensor::zeros({1, 3, 1, 1})), p));
}

TEST_CASE("layer_norm examples") {
    NormParams p = NormParams::make(2, "ln");
    Tape t;
    Binder bind(t);
    Tensor y = layer_norm(bind, t.leaf(Tensor::from_data({1, 2, 1, 1}, {1, 3})), p).value;
    const double denom = std::sqrt(1.0 + p.eps);
    CHECK(y[0] == doctest::Approx(-1.0 / denom).epsilon(1e-12));
    CHECK(y[1] == doctest::Approx(1.0 / denom).epsilon(1e-12));

    // constant sample collapses to beta; fresh tape, since a Param binds once per tape
    p.beta.value = Tensor::from_data({2}, {0.25, 0.25});
    Tape t2;
    Binder bind2(t2);
    Tensor z = layer_norm(bind2, t2.leaf(Tensor::full({2, 2, 2, 2}, 3.0)), p).value;
    for (int64_t i = 0; i < z.numel(); ++i) CHECK(z[i] == doctest::Approx(0.25));

    NormParams p1 = NormParams::make(1, "ln");
    CHECK_THROWS(layer_norm(bind, t.leaf(Tensor::zeros({2, 1, 1, 1})), p1));
}

TEST_CASE("switchable_norm saturates to its pure branches") {
    CounterRng rng(9);
    Tensor x = random_tensor({2, 3, 4, 4}, rng);

    auto saturated = [&](int hot) {
        std::vector<double> l = {-40, -40, -40};
        l[static_cast<size_t>(hot)] = 40;
        return Tensor::from_data({3}, std::move(l));
    };

    // mass on BN reproduces batch_norm
    {
        NormParams psn = NormParams::make(3, "sn");
        SwitchableWeights w = SwitchableWeights::make("sn");
        w.mean_logits.value = saturated(SwitchableWeights::kBN);
        w.var_logits.value = saturated(SwitchableWeights::kBN);
        NormParams pbn = NormParams::make(3, "bn");
        Tape t;
        Binder bind(t);
        Tensor got = switchable_norm(bind, t.leaf(x), psn, w, Mode::train).value;
        Tensor want = batch_norm(bind, t.leaf(x), pbn, Mode::train).value;
        for (int64_t i = 0; i < got.numel(); ++i) CHECK(std::abs(got[i] - want[i]) < 1e-6);
    }
    // mass on IN reproduces instance_norm
    {
        NormParams psn = NormParams::make(3, "sn");
        SwitchableWeights w = SwitchableWeights::make("sn");
        w.mean_logits.value = saturated(SwitchableWeights::kIN);
        w.var_logits.value = saturated(SwitchableWeights::kIN);
        NormParams pin = NormParams::make(3, "in");
        Tape t;
        Binder bind(t);
        Tensor got = switchable_norm(bind, t.leaf(x), psn, w, Mode::train).value;
        Tensor want = instance_norm(bind, t.leaf(x), pin).value;
        for (int64_t i = 0; i < got.numel(); ++i) CHECK(std::abs(got[i] - want[i]) < 1e-6);
    }
}

TEST_CASE("switchable_norm with equal logits mixes branch means arithmetically") {
    CounterRng rng(10);
    Tensor x = random_tensor({2, 2, 2, 2}, rng);
    NormParams p = NormParams::make(2, "sn");
    SwitchableWeights w = SwitchableWeights::make("sn");
    Tape t;
    Binder bind(t);
    Tensor y = switchable_norm(bind, t.leaf(x), p, w, Mode::train).value;

    // independent recomputation with plain loops
    for (int n = 0; n < 2; ++n)
        for (int c = 0; c < 2; ++c) {
            std::vector<double> in_vals, ln_vals, bn_vals;
            for (int h = 0; h < 2; ++h)
                for (int wd = 0; wd < 2; ++wd) in_vals.push_back(x.at4(n, c, h, wd));
            for (int cc = 0; cc < 2; ++cc)
                for (int h = 0; h < 2; ++h)
                    for (int wd = 0; wd < 2; ++wd) ln_vals.push_back(x.at4(n, cc, h, wd));
            for (int nn = 0; nn < 2; ++nn)
                for (int h = 0; h < 2; ++h)
                    for (int wd = 0; wd < 2; ++wd) bn_vals.push_back(x.at4(nn, c, h, wd));
            auto [mi, vi] = mean_var(in_vals);
            auto [ml, vl] = mean_var(ln_vals);
            auto [mb, vb] = mean_var(bn_vals);
            const double mu = (mi + ml + mb) / 3.0;
            const double var = (vi + vl + vb) / 3.0;
            for (int h = 0; h < 2; ++h)
                for (int wd = 0; wd < 2; ++wd) {
                    double want = (x.at4(n, c, h, wd) - mu) / std::sqrt(var + p.eps);
                    CHECK(y.at4(n, c, h, wd) == doctest::Approx(want).epsilon(1e-9));
                }
        }
}

TEST_CASE("switchable_norm honors a restricted {IN,BN} branch set") {
    CounterRng rng(12);
    Tensor x = random_tensor({2, 3, 4, 4}, rng);
    NormParams p = NormParams::make(3, "sn");
    SwitchableWeights w = SwitchableWeights::make("sn", {true, false, true});
    Tape t;
    Binder bind(t);
    Tensor y = switchable_norm(bind, t.leaf(x), p, w, Mode::train).value;
    CHECK(std::isfinite(y[0]));

    SwitchableWeights none = SwitchableWeights::make("sn", {false, false, false});
    CHECK_THROWS(switchable_norm(bind, t.leaf(x), p, none, Mode::train));
}

TEST_CASE("norm layers pass grad_check at generic points") {
    CounterRng rng(13);
    Tensor x = random_tensor({2, 3, 3, 3}, rng);
    Tensor gamma = random_tensor({3}, rng, 0.5, 1.5);
    Tensor beta = random_tensor({3}, rng, -0.5, 0.5);
    Tensor logits = random_tensor({3}, rng, -1.0, 1.0);

    // fixed probe so the checked scalar touches every output entry
    Tensor probe = random_tensor({2, 3, 3, 3}, rng);
    auto weighted = [&](DiffValue y) { return mean_all(mul(y, Tape::constant(probe))); };

    SUBCASE("batch_norm wrt input, gamma, beta") {
        NormParams p = NormParams::make(3, "bn");
        p.gamma.value = gamma;
        p.beta.value = beta;
        CHECK(grad_check(
                  [&](Tape& t, const DiffValue& v) {
                      Binder bind(t);
                      return weighted(batch_norm(bind, v, p, Mode::train));
                  },
                  x) < 1e-5);
        auto via_params = [&](Tape& t, Binder& bind) {
            return weighted(batch_norm(bind, t.leaf(x), p, Mode::train));
        };
        CHECK(grad_check_param(via_params, p.gamma) < 1e-5);
        CHECK(grad_check_param(via_params, p.beta) < 1e-5);
    }

    SUBCASE("instance_norm and layer_norm wrt input, gamma, beta") {
        NormParams pi = NormParams::make(3, "in");
        pi.gamma.value = gamma;
        pi.beta.value = beta;
        CHECK(grad_check(
                  [&](Tape& t, const DiffValue& v) {
                      Binder bind(t);
                      return weighted(instance_norm(bind, v, pi));
                  },
                  x) < 1e-5);
        auto via_in = [&](Tape& t, Binder& bind) { return weighted(instance_norm(bind, t.leaf(x), pi)); };
        CHECK(grad_check_param(via_in, pi.gamma) < 1e-5);
        CHECK(grad_check_param(via_in, pi.beta) < 1e-5);

        NormParams pl = NormParams::make(3, "ln");
        pl.gamma.value = gamma;
        pl.beta.value = beta;
        CHECK(grad_check(
                  [&](Tape& t, const DiffValue& v) {
                      Binder bind(t);
                      return weighted(layer_norm(bind, v, pl));
                  },
                  x) < 1e-5);
        auto via_ln = [&](Tape& t, Binder& bind) { return weighted(layer_norm(bind, t.leaf(x), pl)); };
        CHECK(grad_check_param(via_ln, pl.gamma) < 1e-5);
    }

    SUBCASE("switchable_norm wrt input, gamma, beta, and both logit triples") {
        NormParams p = NormParams::make(3, "sn");
        p.gamma.value = gamma;
        p.beta.value = beta;
        SwitchableWeights w = SwitchableWeights::make("sn");
        w.mean_logits.value = logits;
        w.var_logits.value = logits;
        CHECK(grad_check(
                  [&](Tape& t, const DiffValue& v) {
                      Binder bind(t);
                      return weighted(switchable_norm(bind, v, p, w, Mode::train));
                  },
                  x) < 1e-5);
        auto via = [&](Tape& t, Binder& bind) {
            return weighted(switchable_norm(bind, t.leaf(x), p, w, Mode::train));
        };
        CHECK(grad_check_param(via, p.gamma) < 1e-5);
        CHECK(grad_check_param(via, p.beta) < 1e-5);
        CHECK(grad_check_param(via, w.mean_logits) < 1e-5);
        CHECK(grad_check_param(via, w.var_logits) < 1e-5);
    }
}

TEST_CASE("bottleneck block with zero residual weights reduces to relu(x)") {
    ToyNet net = build_toynet(NormPolicy::PLAIN_BN, {4}, 2, 77);
    BottleneckBlock& b = net.blocks[0];
    b.conv1.w.value = Tensor::zeros(b.conv1.w.value.shape());
    b.conv2.w.value = Tensor::zeros(b.conv2.w.value.shape());
    b.conv3.w.value = Tensor::zeros(b.conv3.w.value.shape());

    CounterRng rng(14);
    Tensor x = random_tensor({2, 4, 4, 4}, rng);
    Tape t;
    Binder bind(t);
    Tensor y = b.forward(bind, t.leaf(x), Mode::train).value;
    for (int64_t i = 0; i < x.numel(); ++i) CHECK(y[i] == doctest::Approx(std::max(0.0, x[i])).epsilon(1e-12));
}

TEST_CASE("IBN_A norm1 instance-normalizes the IN half and batch-normalizes the rest") {
    ToyNet net = build_toynet(NormPolicy::IBN_A, {8}, 2, 78);
    BottleneckBlock& b = net.blocks[0];
    REQUIRE(b.mid_ch == 4);
    REQUIRE(b.ibn_split == 2); // channels {0,1} IN, {2,3} BN

    CounterRng rng(15);
    Tensor x = random_tensor({3, 4, 5, 5}, rng);
    Tape t;
    Binder bind(t);
    Tensor y = b.norm1(bind, t.leaf(x), Mode::train).value;

    // IN half: every (n,c) plane has zero mean
    for (int n = 0; n < 3; ++n)
        for (int c = 0; c < 2; ++c) {
            double m = 0;
            for (int h = 0; h < 5; ++h)
                for (int w = 0; w < 5; ++w) m += y.at4(n, c, h, w);
            CHECK(std::abs(m / 25.0) < 1e-9);
        }
    // BN half: zero mean per channel over the whole batch, but not per plane
    for (int c = 2; c < 4; ++c) {
        double m = 0;
        for (int n = 0; n < 3; ++n)
            for (int h = 0; h < 5; ++h)
                for (int w = 0; w < 5; ++w) m += y.at4(n, c, h, w);
        CHECK(std::abs(m / 75.0) < 1e-9);
    }
    double plane_mean = 0;
    for (int h = 0; h < 5; ++h)
        for (int w = 0; w < 5; ++w) plane_mean += y.at4(0, 2, h, w);
    CHECK(std::abs(plane_mean / 25.0) > 1e-6);
}

TEST_CASE("odd channel count under IBN_A puts ceil(C/2) channels on IN") {
    ToyNet net = build_toynet(NormPolicy::IBN_A, {6}, 2, 79);
    CHECK(net.blocks[0].mid_ch == 3);
    CHECK(net.blocks[0].ibn_split == 2);
}

TEST_CASE("IBN_S block saturated to BN matches the PLAIN_BN block") {
    // same seed draws identical conv weights for both policies
    ToyNet plain = build_toynet(NormPolicy::PLAIN_BN, {6}, 2, 80);
    ToyNet ibns = build_toynet(NormPolicy::IBN_S, {6}, 2, 80);
    Tensor sat = Tensor::from_data({3}, {-40, -40, 40});
    ibns.blocks[0].sn_weights.mean_logits.value = sat;
    ibns.blocks[0].sn_weights.var_logits.value = sat;

    CounterRng rng(16);
    Tensor x = random_tensor({2, 6, 4, 4}, rng);
    Tape t;
    Binder bind(t);
    Tensor a = plain.blocks[0].forward(bind, t.leaf(x), Mode::train).value;
    Tensor c = ibns.blocks[0].forward(bind, t.leaf(x), Mode::train).value;
    REQUIRE(a.same_shape(c));
    for (int64_t i = 0; i < a.numel(); ++i) CHECK(std::abs(a[i] - c[i]) < 1e-6);
}

TEST_CASE("IBN_B equals the PLAIN_BN block followed by IN before the final relu") {
    ToyNet plain = build_toynet(NormPolicy::PLAIN_BN, {6}, 2, 81);
    ToyNet ibnb = build_toynet(NormPolicy::IBN_B, {6}, 2, 81);

    CounterRng rng(17);
    Tensor x = random_tensor({2, 6, 4, 4}, rng);
    Tape t;
    Binder bind(t);
    DiffValue pre;
    plain.blocks[0].forward(bind, t.leaf(x), Mode::train, nullptr, &pre);
    NormParams post = NormParams::make(6, "post_in");
    Tensor want = relu(instance_norm(bind, pre, post)).value;
    Tensor got = ibnb.blocks[0].forward(bind, t.leaf(x), Mode::train).value;
    REQUIRE(got.same_shape(want));
    for (int64_t i = 0; i < got.numel(); ++i) CHECK(std::abs(got[i] - want[i]) < 1e-12);
}
