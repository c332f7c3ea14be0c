#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>

#include "segbench/blocks.hpp"
#include "segbench/grad_check.hpp"
#include "segbench/rng.hpp"

using namespace segbench;

namespace {

Tensor random_tensor(std::vector<int> shape, CounterRng& rng, double lo = 0.0, double hi = 1.0) {
    std::vector<double> d(static_cast<size_t>(shape_numel(shape)));
    for (double& v : d) v = rng.uniform(lo, hi);
    return Tensor::from_data(std::move(shape), std::move(d));
}

} // namespace

TEST_CASE("toynet construction is deterministic in the seed") {
    ToyNet a = build_toynet(NormPolicy::IBN_A, {8, 16}, 7, 42);
    ToyNet b = build_toynet(NormPolicy::IBN_A, {8, 16}, 7, 42);
    ToyNet c = build_toynet(NormPolicy::IBN_A, {8, 16}, 7, 43);

    auto pa = a.parameters(), pb = b.parameters(), pc = c.parameters();
    REQUIRE(pa.size() == pb.size());
    for (size_t i = 0; i < pa.size(); ++i) {
        CHECK(pa[i]->name == pb[i]->name);
        REQUIRE(pa[i]->value.numel() == pb[i]->value.numel());
        for (int64_t j = 0; j < pa[i]->value.numel(); ++j) CHECK(pa[i]->value[j] == pb[i]->value[j]);
    }
    bool differs = false;
    for (size_t i = 0; i < pa.size() && !differs; ++i)
        for (int64_t j = 0; j < pa[i]->value.numel() && !differs; ++j)
            differs = pa[i]->value[j] != pc[i]->value[j];
    CHECK(differs);
}

TEST_CASE("probe registry: 2 stem/decoder sites + 3 per block, in depth order") {
    ToyNet net = build_toynet(NormPolicy::PLAIN_BN, {8, 16}, 7, 1);
    REQUIRE(net.probes.size() == 2 + 3 * 2);
    CHECK(net.probes.front() == "stem.relu");
    CHECK(net.probes[1] == "block0.relu1");
    CHECK(net.probes[3] == "block0.relu3");
    CHECK(net.probes.back() == "head.relu");

    ToyNet deep = build_toynet(NormPolicy::IBN_S, {8, 8, 16, 16}, 7, 1);
    CHECK(deep.probes.size() == 2 + 3 * 4);
}

TEST_CASE("classifier width follows num_classes") {
    ToyNet net = build_toynet(NormPolicy::PLAIN_BN, {8}, 7, 2);
    CHECK(net.classifier.w.value.extent(0) == 7);
    CHECK_THROWS(build_toynet(NormPolicy::PLAIN_BN, {}, 7, 2));
}

TEST_CASE("forward produces input-aligned logits and honors capture") {
    ToyNet net = build_toynet(NormPolicy::IBN_B, {6, 8}, 7, 3);
    CounterRng rng(4);
    Tensor x = random_tensor({2, 3, 16, 16}, rng);

    Tape t;
    Binder bind(t);
    ForwardResult none = forward_segmentation(net, bind, x, Mode::train);
    CHECK(none.captured.empty());
    CHECK(none.logits.value.shape() == std::vector<int>{2, 7, 16, 16});

    Tape t2;
    Binder bind2(t2);
    std::set<std::string> all(net.probes.begin(), net.probes.end());
    ForwardResult full = forward_segmentation(net, bind2, x, Mode::eval, all);
    CHECK(full.captured.size() == net.probes.size());

    Tape t3;
    Binder bind3(t3);
    CHECK_THROWS(forward_segmentation(net, bind3, x, Mode::eval, {"not.a.probe"}));
}

TEST_CASE("eval forward is idempotent and batch-size independent") {
    ToyNet net = build_toynet(NormPolicy::IBN_S, {6}, 4, 5);
    CounterRng rng(6);
    Tensor x = random_tensor({3, 3, 8, 8}, rng);

    auto run = [&](const Tensor& input) {
        Tape t;
        Binder bind(t);
        return forward_segmentation(net, bind, input, Mode::eval).logits.value;
    };
    Tensor y1 = run(x), y2 = run(x);
    for (int64_t i = 0; i < y1.numel(); ++i) CHECK(y1[i] == y2[i]);

    // single-sample forward of sample 0 matches its slice of the batch
    std::vector<double> first(x.data(), x.data() + 3 * 64);
    Tensor x0 = Tensor::from_data({1, 3, 8, 8}, std::move(first));
    Tensor y0 = run(x0);
    for (int64_t i = 0; i < y0.numel(); ++i) CHECK(std::abs(y0[i] - y1[i]) < 1e-12);
}

TEST_CASE("single-channel inputs are duplicated channel-wise at the stem") {
    ToyNet net = build_toynet(NormPolicy::PLAIN_BN, {6}, 4, 7);
    CounterRng rng(8);
    Tensor mono = random_tensor({2, 1, 8, 8}, rng);
    Tensor tri = adapt_input_channels(mono, 3);
    REQUIRE(tri.shape() == std::vector<int>{2, 3, 8, 8});
    for (int n = 0; n < 2; ++n)
        for (int c = 0; c < 3; ++c)
            for (int h = 0; h < 8; ++h)
                for (int w = 0; w < 8; ++w) CHECK(tri.at4(n, c, h, w) == mono.at4(n, 0, h, w));

    Tape t;
    Binder bind(t);
    CHECK(forward_segmentation(net, bind, mono, Mode::eval).logits.value.extent(1) == 4);
    Tape t2;
    Binder bind2(t2);
    CHECK_THROWS(forward_segmentation(net, bind2, random_tensor({1, 2, 8, 8}, rng), Mode::eval));
}

TEST_CASE("whole-net loss gradient passes grad_check on a miniature net") {
    ToyNet net = build_toynet(NormPolicy::IBN_S, {4}, 2, 9);
    CounterRng rng(10);
    Tensor x = random_tensor({1, 3, 8, 8}, rng);

    // check one conv weight and one SN logit triple through the full forward
    auto loss_fn = [&](Tape& t, Binder& bind) {
        ForwardResult res = forward_segmentation(net, bind, x, Mode::train);
        (void)t;
        return mean_all(mul(res.logits, res.logits));
    };
    CHECK(grad_check_param(loss_fn, net.blocks[0].conv2.w) < 1e-5);
    CHECK(grad_check_param(loss_fn, net.blocks[0].sn_weights.mean_logits) < 1e-5);
    CHECK(grad_check_param(loss_fn, net.stem_bn.gamma) < 1e-5);
}

TEST_CASE("checkpoint round trip preserves every tensor and the probe registry") {
    namespace fs = std::filesystem;
    ToyNet net = build_toynet(NormPolicy::IBN_S, {6, 8}, 5, 11, {true, false, true}, 2e-5, 0.2);
    // make running stats non-trivial before saving
    CounterRng rng(12);
    Tensor x = random_tensor({2, 3, 8, 8}, rng);
    {
        Tape t;
        Binder bind(t);
        forward_segmentation(net, bind, x, Mode::train);
    }
    fs::path dir = fs::temp_directory_path() / "segbench_ckpt_test";
    fs::remove_all(dir);
    save_checkpoint(net, dir.string());

    ToyNet back = load_checkpoint(dir.string());
    CHECK(back.policy == net.policy);
    CHECK(back.widths == net.widths);
    CHECK(back.num_classes == net.num_classes);
    CHECK(back.sn_branches == net.sn_branches);
    CHECK(back.eps == net.eps);
    CHECK(back.probes == net.probes);
    CHECK(load_probe_registry(dir.string()) == net.probes);

    auto ta = net.named_tensors(), tb = back.named_tensors();
    REQUIRE(ta.size() == tb.size());
    for (size_t i = 0; i < ta.size(); ++i) {
        CHECK(ta[i].first == tb[i].first);
        REQUIRE(tb[i].second->same_shape(*ta[i].second));
        for (int64_t j = 0; j < ta[i].second->numel(); ++j)
            CHECK((*tb[i].second)[j] ==
                  doctest::Approx((*ta[i].second)[j]).epsilon(1e-6)); // float32 payload
    }

    // eval forwards agree within float32 reload error
    auto run = [&](ToyNet& n) {
        Tape t;
        Binder bind(t);
        return forward_segmentation(n, bind, x, Mode::eval).logits.value;
    };
    Tensor ya = run(net), yb = run(back);
    for (int64_t i = 0; i < ya.numel(); ++i) CHECK(std::abs(ya[i] - yb[i]) < 1e-4);

    // same run twice writes byte-identical checkpoints
    fs::path dir2 = fs::temp_directory_path() / "segbench_ckpt_test2";
    fs::remove_all(dir2);
    save_checkpoint(net, dir2.string());
    auto slurp = [](const fs::path& p) {
        std::ifstream f(p, std::ios::binary);
        return std::string(std::istreambuf_iterator<char>(f), {});
    };
    CHECK(slurp(dir / "manifest.txt") == slurp(dir2 / "manifest.txt"));
    CHECK(slurp(dir / "tensors/t0000.t1") == slurp(dir2 / "tensors/t0000.t1"));
    fs::remove_all(dir);
    fs::remove_all(dir2);
}

TEST_CASE("corrupt checkpoints are reported") {
    namespace fs = std::filesystem;
    fs::path dir = fs::temp_directory_path() / "segbench_ckpt_missing";
    fs::remove_all(dir);
    CHECK_THROWS(load_checkpoint(dir.string()));
}
