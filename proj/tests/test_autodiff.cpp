#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "segbench/grad_check.hpp"
#include "segbench/ops.hpp"
#include "segbench/rng.hpp"
#include "segbench/tape.hpp"

using namespace segbench;

namespace {

Tensor random_tensor(std::vector<int> shape, CounterRng& rng, double lo = -2.0, double hi = 2.0) {
    std::vector<double> d(static_cast<size_t>(shape_numel(shape)));
    for (double& v : d) v = rng.uniform(lo, hi);
    return Tensor::from_data(std::move(shape), std::move(d));
}

// keeps random draws away from the measure-zero kinks (relu at 0, ties)
Tensor random_tensor_away_from(std::vector<int> shape, CounterRng& rng, double margin) {
    std::vector<double> d(static_cast<size_t>(shape_numel(shape)));
    for (double& v : d) {
        do {
            v = rng.uniform(-2.0, 2.0);
        } while (std::abs(v) < margin);
    }
    return Tensor::from_data(std::move(shape), std::move(d));
}

// independent six-loop convolution oracle
Tensor conv_naive(const Tensor& x, const Tensor& w, const Tensor* bias, int stride, int pad) {
    const int N = x.extent(0), Cin = x.extent(1), H = x.extent(2), W = x.extent(3);
    const int Cout = w.extent(0), KH = w.extent(2), KW = w.extent(3);
    const int OH = (H + 2 * pad - KH) / stride + 1;
    const int OW = (W + 2 * pad - KW) / stride + 1;
    std::vector<double> out(static_cast<size_t>(N) * Cout * OH * OW, 0.0);
    for (int n = 0; n < N; ++n)
        for (int co = 0; co < Cout; ++co)
            for (int oh = 0; oh < OH; ++oh)
                for (int ow = 0; ow < OW; ++ow) {
                    double acc = bias ? (*bias)[co] : 0.0;
                    for (int ci = 0; ci < Cin; ++ci)
                        for (int kh = 0; kh < KH; ++kh)
                            for (int kw = 0; kw < KW; ++kw) {
                                int ih = oh * stride - pad + kh;
                                int iw = ow * stride - pad + kw;
                                if (ih < 0 || ih >= H || iw < 0 || iw >= W) continue;
                                acc += x.at4(n, ci, ih, iw) * w.at4(co, ci, kh, kw);
                            }
                    out[static_cast<size_t>(((static_cast<int64_t>(n) * Cout + co) * OH + oh) * OW + ow)] = acc;
                }
    return Tensor::from_data({N, Cout, OH, OW}, std::move(out));
}

} // namespace

TEST_CASE("elementwise definitions") {
    Tape t;
    DiffValue a = t.leaf(Tensor::from_data({3}, {-1, 0, 2}));
    Tensor r = relu(a).value;
    CHECK(r[0] == 0.0);
    CHECK(r[1] == 0.0);
    CHECK(r[2] == 2.0);

    CHECK(sigmoid(Tape::constant(Tensor::scalar(0.0))).value[0] == doctest::Approx(0.5));
    CHECK(log(Tape::constant(Tensor::scalar(1.0))).value[0] == doctest::Approx(0.0));
}

TEST_CASE("elementwise rejects incompatible shapes, names both") {
    Tape t;
    DiffValue a = t.leaf(Tensor::zeros({2, 3}));
    DiffValue b = t.leaf(Tensor::zeros({3, 2}));
    try {
        add(a, b);
        CHECK(false);
    } catch (const std::invalid_argument& e) {
        std::string msg = e.what();
        CHECK(msg.find("(2,3)") != std::string::npos);
        CHECK(msg.find("(3,2)") != std::string::npos);
    }
}

TEST_CASE("scalar broadcast works both ways") {
    Tape t;
    DiffValue a = t.leaf(Tensor::from_data({2}, {1, 2}), true);
    DiffValue s = t.leaf(Tensor::scalar(10.0), true);
    DiffValue y = sum_all(mul(a, s));
    CHECK(y.value[0] == doctest::Approx(30.0));
    GradMap g = t.backward(y);
    CHECK(g.at(s.node)[0] == doctest::Approx(3.0));
    CHECK(g.at(a.node)[0] == doctest::Approx(10.0));
    CHECK(g.at(a.node)[1] == doctest::Approx(10.0));
}

TEST_CASE("reduce examples") {
    Tape t;
    CHECK(sum_all(t.leaf(Tensor::full({2, 3}, 1.0))).value[0] == doctest::Approx(6.0));
    CHECK(mean_all(t.leaf(Tensor::from_data({3}, {1, 2, 3}))).value[0] == doctest::Approx(2.0));

    DiffValue x = t.leaf(Tensor::from_data({1, 2, 2, 2}, {1, 2, 3, 4, 5, 6, 7, 8}));
    Tensor m = mean(x, {2, 3}).value;
    REQUIRE(m.numel() == 2);
    CHECK(m[0] == doctest::Approx(2.5));
    CHECK(m[1] == doctest::Approx(6.5));
}

TEST_CASE("reduce keep flag keeps singleton axes") {
    Tape t;
    DiffValue x = t.leaf(Tensor::zeros({2, 3, 4, 5}));
    CHECK(mean(x, {0, 2, 3}, true).value.shape() == std::vector<int>{1, 3, 1, 1});
    CHECK(mean(x, {0, 2, 3}, false).value.shape() == std::vector<int>{3});
    CHECK_THROWS(sum(x, {4}));
}

TEST_CASE("backward basics") {
    {
        Tape t;
        DiffValue x = t.leaf(Tensor::from_data({3}, {5, -1, 0.5}), true);
        GradMap g = t.backward(sum_all(x));
        Tensor gx = g.at(x.node);
        for (int i = 0; i < 3; ++i) CHECK(gx[i] == doctest::Approx(1.0));
    }
    {
        Tape t;
        DiffValue x = t.leaf(Tensor::from_data({2}, {1, 2}), true);
        GradMap g = t.backward(sum_all(mul(x, x)));
        CHECK(g.at(x.node)[0] == doctest::Approx(2.0));
        CHECK(g.at(x.node)[1] == doctest::Approx(4.0));
    }
    {
        Tape t;
        DiffValue x = t.leaf(Tensor::from_data({2}, {1, 2}), true);
        CHECK_THROWS(t.backward(mul(x, x))); // non-scalar root
    }
}

TEST_CASE("parameters untouched by the loss still get zero gradients") {
    Tape t;
    DiffValue x = t.leaf(Tensor::from_data({2}, {1, 2}), true);
    DiffValue unused = t.leaf(Tensor::from_data({3}, {1, 1, 1}), true);
    GradMap g = t.backward(sum_all(x));
    REQUIRE(g.count(unused.node) == 1);
    CHECK(g.at(unused.node).max_abs() == 0.0);
}

TEST_CASE("conv2d trivial cases") {
    Tape t;
    // 1x1 kernel of weight 1 is the identity map
    CounterRng rng(3);
    Tensor img = random_tensor({1, 1, 4, 4}, rng);
    DiffValue y = conv2d(t.leaf(img), t.leaf(Tensor::full({1, 1, 1, 1}, 1.0)));
    REQUIRE(y.value.same_shape(img));
    for (int64_t i = 0; i < img.numel(); ++i) CHECK(y.value[i] == doctest::Approx(img[i]));

    // 3x3 all-ones kernel on 3x3 all-ones image, no padding -> scalar 9
    DiffValue z = conv2d(t.leaf(Tensor::full({1, 1, 3, 3}, 1.0)), t.leaf(Tensor::full({1, 1, 3, 3}, 1.0)));
    CHECK(z.value.numel() == 1);
    CHECK(z.value[0] == doctest::Approx(9.0));
}

TEST_CASE("conv2d matches the naive oracle to 1e-12") {
    CounterRng rng(11);
    struct Case {
        std::vector<int> xs, ws;
        int stride, pad;
        bool bias;
    };
    const Case cases[] = {
        {{2, 3, 8, 8}, {4, 3, 3, 3}, 1, 1, true},
        {{2, 3, 8, 8}, {2, 3, 3, 3}, 2, 1, false},
        {{1, 2, 5, 7}, {3, 2, 1, 1}, 1, 0, true},
        {{2, 2, 6, 6}, {2, 2, 2, 2}, 2, 0, false},
    };
    for (const Case& c : cases) {
        Tensor x = random_tensor(c.xs, rng);
        Tensor w = random_tensor(c.ws, rng);
        Tensor b = random_tensor({c.ws[0]}, rng);
        Tape t;
        DiffValue got = c.bias ? conv2d(t.leaf(x), t.leaf(w), t.leaf(b), c.stride, c.pad)
                               : conv2d(t.leaf(x), t.leaf(w), c.stride, c.pad);
        Tensor want = conv_naive(x, w, c.bias ? &b : nullptr, c.stride, c.pad);
        REQUIRE(got.value.same_shape(want));
        for (int64_t i = 0; i < want.numel(); ++i)
            CHECK(std::abs(got.value[i] - want[i]) < 1e-12);
    }
}

TEST_CASE("conv2d rejects bad wiring") {
    Tape t;
    DiffValue x = t.leaf(Tensor::zeros({1, 3, 4, 4}));
    CHECK_THROWS(conv2d(x, t.leaf(Tensor::zeros({2, 2, 1, 1}))));         // channel mismatch
    CHECK_THROWS(conv2d(x, t.leaf(Tensor::zeros({2, 3, 5, 5})), 1, 0));   // degenerate output
}

TEST_CASE("sort_desc_detached examples") {
    Tape t;
    auto [sorted, perm] = sort_desc_detached(t.leaf(Tensor::from_data({3}, {1, 3, 2}), true));
    CHECK(sorted.value[0] == 3.0);
    CHECK(sorted.value[1] == 2.0);
    CHECK(sorted.value[2] == 1.0);
    CHECK(perm == std::vector<int64_t>{1, 2, 0});

    auto [s2, p2] = sort_desc_detached(t.leaf(Tensor::from_data({2}, {2, 2})));
    CHECK(p2 == std::vector<int64_t>{0, 1}); // stable tie order

    // backward of sum over the sorted vector is all-ones on the input
    Tape t2;
    DiffValue m = t2.leaf(Tensor::from_data({4}, {0.3, -1.2, 2.0, 0.9}), true);
    auto [s3, p3] = sort_desc_detached(m);
    GradMap g = t2.backward(sum_all(s3));
    for (int i = 0; i < 4; ++i) CHECK(g.at(m.node)[i] == doctest::Approx(1.0));
}

TEST_CASE("grad_check on simple functions") {
    CounterRng rng(17);
    Tensor x = random_tensor({6}, rng);
    CHECK(grad_check([](Tape&, const DiffValue& v) { return sum_all(v); }, x) < 1e-10);
    CHECK(grad_check([](Tape&, const DiffValue& v) { return sum_all(sigmoid(v)); }, x) < 1e-6);
}

TEST_CASE("grad_check across every differentiable op at generic points") {
    CounterRng rng(29);
    for (int rep = 0; rep < 8; ++rep) {
        Tensor x = random_tensor_away_from({2, 3}, rng, 0.15);
        Tensor pos = random_tensor({2, 3}, rng, 0.2, 2.0);
        Tensor other = random_tensor_away_from({2, 3}, rng, 0.3);

        auto check = [&](const ScalarFn& f, const Tensor& at, double tol = 1e-6) {
            CHECK(grad_check(f, at) < tol);
        };
        check([&](Tape& t, const DiffValue& v) { return sum_all(add(v, t.leaf(other))); }, x);
        check([&](Tape& t, const DiffValue& v) { return sum_all(sub(v, t.leaf(other))); }, x);
        check([&](Tape& t, const DiffValue& v) { return sum_all(mul(v, t.leaf(other))); }, x);
        check([&](Tape& t, const DiffValue& v) { return sum_all(div(v, t.leaf(other))); }, x);
        check([&](Tape& t, const DiffValue& v) { return sum_all(div(t.leaf(other), v)); }, x);
        check([](Tape&, const DiffValue& v) { return sum_all(neg(v)); }, x);
        check([](Tape&, const DiffValue& v) { return sum_all(log(v)); }, pos);
        check([](Tape&, const DiffValue& v) { return sum_all(exp(v)); }, x);
        check([](Tape&, const DiffValue& v) { return sum_all(sqrt(v)); }, pos);
        check([](Tape&, const DiffValue& v) { return sum_all(relu(v)); }, x);
        check([](Tape&, const DiffValue& v) { return sum_all(sigmoid(v)); }, x);
        check([](Tape&, const DiffValue& v) { return sum_all(softplus(v)); }, x);
        check([](Tape&, const DiffValue& v) { return mean_all(mul(v, v)); }, x);
        check([](Tape&, const DiffValue& v) {
            return sum_all(mul(expand(mean(v, {0}, true), {2, 3}), v));
        }, x);
    }
}

TEST_CASE("grad_check through shape plumbing ops") {
    CounterRng rng(31);
    Tensor x4 = random_tensor({2, 4, 3, 3}, rng);
    CHECK(grad_check(
              [](Tape&, const DiffValue& v) {
                  DiffValue m = mean(v, {0, 2, 3}, true);
                  return sum_all(mul(expand(m, {2, 4, 3, 3}), v));
              },
              x4) < 1e-6);
    CHECK(grad_check(
              [](Tape&, const DiffValue& v) {
                  DiffValue a = slice_channels(v, 0, 2);
                  DiffValue b = slice_channels(v, 2, 4);
                  return sum_all(mul(concat_channels(a, b), v));
              },
              x4) < 1e-6);
    CHECK(grad_check(
              [](Tape&, const DiffValue& v) {
                  return sum_all(gather_flat(v, {0, 5, 5, 17}));
              },
              x4) < 1e-6);
    CHECK(grad_check([](Tape&, const DiffValue& v) { return sum_all(upsample_bilinear_2x(v)); }, x4) < 1e-6);
    CHECK(grad_check(
              [](Tape&, const DiffValue& v) {
                  return sum_all(mul(upsample_bilinear_2x(v), upsample_bilinear_2x(v)));
              },
              x4) < 1e-6);
}

TEST_CASE("grad_check through conv2d wrt input, weight and bias") {
    CounterRng rng(37);
    Tensor x = random_tensor({2, 2, 5, 5}, rng);
    Tensor w = random_tensor({3, 2, 3, 3}, rng);
    Tensor b = random_tensor({3}, rng);

    CHECK(grad_check(
              [&](Tape& t, const DiffValue& v) {
                  return sum_all(sigmoid(conv2d(v, t.leaf(w), t.leaf(b), 1, 1)));
              },
              x) < 1e-5);
    CHECK(grad_check(
              [&](Tape& t, const DiffValue& v) {
                  return sum_all(sigmoid(conv2d(t.leaf(x), v, t.leaf(b), 2, 1)));
              },
              w) < 1e-5);
    CHECK(grad_check(
              [&](Tape& t, const DiffValue& v) {
                  return sum_all(sigmoid(conv2d(t.leaf(x), t.leaf(w), v, 1, 0)));
              },
              b) < 1e-5);
}

TEST_CASE("backward-of-sum linearity") {
    CounterRng rng(41);
    for (int rep = 0; rep < 5; ++rep) {
        Tensor x = random_tensor_away_from({5}, rng, 0.1);
        double a = rng.uniform(-2, 2), b = rng.uniform(-2, 2);

        auto grad_of = [&](auto fn) {
            Tape t;
            DiffValue v = t.leaf(x, true);
            GradMap g = t.backward(fn(v));
            return g.at(v.node);
        };
        auto f = [](const DiffValue& v) { return sum_all(sigmoid(v)); };
        auto g = [](const DiffValue& v) { return mean_all(mul(v, v)); };
        Tensor gf = grad_of(f);
        Tensor gg = grad_of(g);
        Tensor gc = grad_of([&](const DiffValue& v) { return f(v) * a + g(v) * b; });
        for (int i = 0; i < 5; ++i)
            CHECK(std::abs(gc[i] - (a * gf[i] + b * gg[i])) < 1e-12);
    }
}

TEST_CASE("forward replay is bit-identical for identical seeds") {
    auto run = [](uint64_t seed) {
        CounterRng rng(seed);
        Tensor x = random_tensor({2, 3, 6, 6}, rng);
        Tensor w = random_tensor({4, 3, 3, 3}, rng);
        Tape t;
        DiffValue y = mean_all(relu(conv2d(t.leaf(x), t.leaf(w), 1, 1)));
        return y.value[0];
    };
    CHECK(run(123) == run(123));
    CHECK(run(123) != run(124));
}
