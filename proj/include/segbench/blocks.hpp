#pragma once

#include <array>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "segbench/norm.hpp"
#include "segbench/ops.hpp"
#include "segbench/params.hpp"
#include "segbench/rng.hpp"

namespace segbench {

// Block wiring of the first normalization site (and, for IBN_B, an extra
// instance norm on the block output).
enum class NormPolicy { PLAIN_BN, IBN_A, IBN_B, IBN_S };

inline std::string to_string(NormPolicy p) {
    switch (p) {
        case NormPolicy::PLAIN_BN: return "PLAIN_BN";
        case NormPolicy::IBN_A: return "IBN_A";
        case NormPolicy::IBN_B: return "IBN_B";
        case NormPolicy::IBN_S: return "IBN_S";
    }
    return "?";
}

inline NormPolicy policy_from_string(const std::string& s) {
    if (s == "PLAIN_BN") return NormPolicy::PLAIN_BN;
    if (s == "IBN_A") return NormPolicy::IBN_A;
    if (s == "IBN_B") return NormPolicy::IBN_B;
    if (s == "IBN_S") return NormPolicy::IBN_S;
    throw std::invalid_argument("unknown norm policy '" + s + "' (PLAIN_BN|IBN_A|IBN_B|IBN_S)");
}

struct ConvLayer {
    Param w;                // (Cout,Cin,kh,kw)
    std::optional<Param> b; // (Cout)
    int stride = 1, pad = 0;

    DiffValue forward(Binder& bind, const DiffValue& x) {
        DiffValue wv = bind(w);
        if (b) {
            DiffValue bv = bind(*b);
            return conv2d(x, wv, bv, stride, pad);
        }
        return conv2d(x, wv, stride, pad);
    }
};

namespace detail {

// He fan-in initialization; convs feeding a norm carry no bias
inline ConvLayer make_conv(const std::string& name, int cin, int cout, int k, int stride, int pad,
                           bool bias, CounterRng& rng) {
    ConvLayer c;
    const double stddev = std::sqrt(2.0 / static_cast<double>(static_cast<int64_t>(cin) * k * k));
    std::vector<double> w(static_cast<size_t>(cout) * cin * k * k);
    for (double& v : w) v = rng.normal(0.0, stddev);
    c.w = Param(name + ".w", Tensor::from_data({cout, cin, k, k}, std::move(w)));
    if (bias) c.b = Param(name + ".b", Tensor::zeros({cout}));
    c.stride = stride;
    c.pad = pad;
    return c;
}

} // namespace detail

// Residual bottleneck: conv1x1 -> norm1 -> relu -> conv3x3 -> BN -> relu ->
// conv1x1 -> BN -> (+ identity, 1x1 projection when widths differ) -> relu.
// norm1 depends on the policy: PLAIN_BN and IBN_B use BN over all channels,
// IBN_A instance-normalizes the first ceil(C/2) channels and batch-normalizes
// the rest, IBN_S switches the whole site to switchable normalization.
// IBN_B additionally instance-normalizes the sum before the final relu.
struct BottleneckBlock {
    NormPolicy policy = NormPolicy::PLAIN_BN;
    int in_ch = 0, mid_ch = 0, out_ch = 0;
    int ibn_split = 0; // IBN_A: channels [0, split) of norm1 go through IN

    ConvLayer conv1, conv2, conv3;
    NormParams norm1_bn; // PLAIN_BN / IBN_B: all of norm1; IBN_A: second half
    NormParams norm1_in; // IBN_A: first half
    NormParams norm1_sn; // IBN_S
    SwitchableWeights sn_weights;
    NormParams bn2, bn3;
    std::optional<ConvLayer> proj;
    NormParams post_in; // IBN_B only

    DiffValue norm1(Binder& bind, const DiffValue& x, Mode mode) {
        switch (policy) {
            case NormPolicy::PLAIN_BN:
            case NormPolicy::IBN_B:
                return batch_norm(bind, x, norm1_bn, mode);
            case NormPolicy::IBN_A: {
                DiffValue head = instance_norm(bind, slice_channels(x, 0, ibn_split), norm1_in);
                if (ibn_split == mid_ch) return head;
                DiffValue tail = batch_norm(bind, slice_channels(x, ibn_split, mid_ch), norm1_bn, mode);
                return concat_channels(head, tail);
            }
            case NormPolicy::IBN_S:
                return switchable_norm(bind, x, norm1_sn, sn_weights, mode);
        }
        throw std::logic_error("unreachable");
    }

    // relu_sites receives the three post-relu values in depth order;
    // pre_activation the value entering the final relu
    DiffValue forward(Binder& bind, const DiffValue& x, Mode mode,
                      std::array<DiffValue, 3>* relu_sites = nullptr,
                      DiffValue* pre_activation = nullptr) {
        DiffValue r1 = relu(norm1(bind, conv1.forward(bind, x), mode));
        DiffValue r2 = relu(batch_norm(bind, conv2.forward(bind, r1), bn2, mode));
        DiffValue main = batch_norm(bind, conv3.forward(bind, r2), bn3, mode);
        DiffValue identity = proj ? proj->forward(bind, x) : x;
        DiffValue pre = add(main, identity);
        if (policy == NormPolicy::IBN_B) pre = instance_norm(bind, pre, post_in);
        if (pre_activation) *pre_activation = pre;
        DiffValue out = relu(pre);
        if (relu_sites) *relu_sites = {r1, r2, out};
        return out;
    }
};

namespace detail {

inline BottleneckBlock make_block(const std::string& name, NormPolicy policy, int in_ch, int out_ch,
                                  const std::array<bool, 3>& sn_branches, double eps, double momentum,
                                  CounterRng& rng) {
    BottleneckBlock b;
    b.policy = policy;
    b.in_ch = in_ch;
    b.out_ch = out_ch;
    b.mid_ch = std::max(1, out_ch / 2);
    b.ibn_split = (b.mid_ch + 1) / 2; // ceil(C/2) IN channels when odd
    b.conv1 = make_conv(name + ".conv1", in_ch, b.mid_ch, 1, 1, 0, false, rng);
    b.conv2 = make_conv(name + ".conv2", b.mid_ch, b.mid_ch, 3, 1, 1, false, rng);
    b.conv3 = make_conv(name + ".conv3", b.mid_ch, out_ch, 1, 1, 0, false, rng);
    switch (policy) {
        case NormPolicy::PLAIN_BN:
        case NormPolicy::IBN_B:
            b.norm1_bn = NormParams::make(b.mid_ch, name + ".norm1.bn", eps, momentum);
            break;
        case NormPolicy::IBN_A:
            b.norm1_in = NormParams::make(b.ibn_split, name + ".norm1.in", eps, momentum);
            if (b.ibn_split < b.mid_ch)
                b.norm1_bn = NormParams::make(b.mid_ch - b.ibn_split, name + ".norm1.bn", eps, momentum);
            break;
        case NormPolicy::IBN_S:
            b.norm1_sn = NormParams::make(b.mid_ch, name + ".norm1.sn", eps, momentum);
            b.sn_weights = SwitchableWeights::make(name + ".norm1.sn", sn_branches);
            break;
    }
    b.bn2 = NormParams::make(b.mid_ch, name + ".bn2", eps, momentum);
    b.bn3 = NormParams::make(out_ch, name + ".bn3", eps, momentum);
    if (in_ch != out_ch) b.proj = make_conv(name + ".proj", in_ch, out_ch, 1, 1, 0, false, rng);
    if (policy == NormPolicy::IBN_B) b.post_in = NormParams::make(out_ch, name + ".post_in", eps, momentum);
    return b;
}

} // namespace detail

// Small encoder-decoder segmentation net: strided stem, a stack of
// bottleneck blocks sharing one NormPolicy, and a decoder that upsamples 2x
// and classifies with a 1x1 conv (one logit map per class). Every post-relu
// site is a named probe; the registry order is the depth order.
// Train-mode forwards mutate running statistics, so a net is exclusive to
// one thread while training; eval-mode forwards are read-only.
struct ToyNet {
    NormPolicy policy = NormPolicy::PLAIN_BN;
    std::vector<int> widths;
    int in_channels = 3;
    int num_classes = 7;
    int head_width = 4;
    std::array<bool, 3> sn_branches{true, true, true};
    double eps = 1e-5, momentum = 0.1;
    uint64_t seed = 0;

    ConvLayer stem;
    NormParams stem_bn;
    std::vector<BottleneckBlock> blocks;
    ConvLayer head;       // 1x1, widths.back() -> head_width
    ConvLayer classifier; // 1x1 with bias, head_width -> num_classes
    std::vector<std::string> probes;

    bool has_probe(const std::string& name) const {
        for (const std::string& p : probes)
            if (p == name) return true;
        return false;
    }

    // every trainable tensor, in a fixed traversal order
    std::vector<Param*> parameters() {
        std::vector<Param*> ps;
        auto norm = [&](NormParams& n) {
            if (n.gamma.value.defined()) {
                ps.push_back(&n.gamma);
                ps.push_back(&n.beta);
            }
        };
        ps.push_back(&stem.w);
        norm(stem_bn);
        for (BottleneckBlock& b : blocks) {
            ps.push_back(&b.conv1.w);
            norm(b.norm1_bn);
            norm(b.norm1_in);
            norm(b.norm1_sn);
            if (b.sn_weights.mean_logits.value.defined()) {
                ps.push_back(&b.sn_weights.mean_logits);
                ps.push_back(&b.sn_weights.var_logits);
            }
            ps.push_back(&b.conv2.w);
            norm(b.bn2);
            ps.push_back(&b.conv3.w);
            norm(b.bn3);
            if (b.proj) ps.push_back(&b.proj->w);
            norm(b.post_in);
        }
        ps.push_back(&head.w);
        ps.push_back(&classifier.w);
        ps.push_back(&classifier.b.value());
        return ps;
    }

    // trainables plus running statistics; the checkpoint payload
    std::vector<std::pair<std::string, Tensor*>> named_tensors() {
        std::vector<std::pair<std::string, Tensor*>> ts;
        for (Param* p : parameters()) ts.emplace_back(p->name, &p->value);
        auto running = [&](NormParams& n, const std::string& prefix) {
            if (!n.running_mean.defined()) return;
            ts.emplace_back(prefix + ".running_mean", &n.running_mean);
            ts.emplace_back(prefix + ".running_var", &n.running_var);
        };
        running(stem_bn, "stem.bn");
        for (size_t i = 0; i < blocks.size(); ++i) {
            const std::string bn = "block" + std::to_string(i);
            BottleneckBlock& b = blocks[i];
            if (b.norm1_bn.gamma.value.defined()) running(b.norm1_bn, bn + ".norm1.bn");
            if (b.norm1_sn.gamma.value.defined()) running(b.norm1_sn, bn + ".norm1.sn");
            running(b.bn2, bn + ".bn2");
            running(b.bn3, bn + ".bn3");
        }
        return ts;
    }
};

struct ForwardResult {
    DiffValue logits;
    std::map<std::string, Tensor> captured; // detached copies at probe sites
};

inline ToyNet build_toynet(NormPolicy policy, std::vector<int> widths, int num_classes, uint64_t seed,
                           std::array<bool, 3> sn_branches = {true, true, true}, double eps = 1e-5,
                           double momentum = 0.1, int in_channels = 3) {
    if (widths.empty()) throw std::invalid_argument("build_toynet: widths must be non-empty");
    ToyNet net;
    net.policy = policy;
    net.widths = widths;
    net.in_channels = in_channels;
    net.num_classes = num_classes;
    net.head_width = std::max(4, widths.back() / 2);
    net.sn_branches = sn_branches;
    net.eps = eps;
    net.momentum = momentum;
    net.seed = seed;

    CounterRng rng(seed, /*stream=*/0xF00D);
    net.stem = detail::make_conv("stem.conv", in_channels, widths[0], 3, 2, 1, false, rng);
    net.stem_bn = NormParams::make(widths[0], "stem.bn", eps, momentum);
    net.probes.push_back("stem.relu");
    int prev = widths[0];
    for (size_t i = 0; i < widths.size(); ++i) {
        const std::string name = "block" + std::to_string(i);
        net.blocks.push_back(
            detail::make_block(name, policy, prev, widths[i], sn_branches, eps, momentum, rng));
        prev = widths[i];
        net.probes.push_back(name + ".relu1");
        net.probes.push_back(name + ".relu2");
        net.probes.push_back(name + ".relu3");
    }
    net.head = detail::make_conv("head.conv", prev, net.head_width, 1, 1, 0, false, rng);
    net.classifier = detail::make_conv("classifier", net.head_width, num_classes, 1, 1, 0, true, rng);
    net.probes.push_back("head.relu");
    return net;
}

// Single-channel inputs are duplicated channel-wise up to the stem width.
inline Tensor adapt_input_channels(const Tensor& x, int want) {
    if (x.rank() != 4) throw std::invalid_argument("forward: input must be NCHW, got " + x.shape_str());
    if (x.extent(1) == want) return x;
    if (x.extent(1) != 1)
        throw std::invalid_argument("forward: input channels " + std::to_string(x.extent(1)) +
                                    " incompatible with stem " + std::to_string(want));
    const int N = x.extent(0), H = x.extent(2), W = x.extent(3);
    const int64_t plane = static_cast<int64_t>(H) * W;
    std::vector<double> out(static_cast<size_t>(N) * want * plane);
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < want; ++c)
            std::copy(x.data() + n * plane, x.data() + (n + 1) * plane,
                      out.data() + (static_cast<int64_t>(n) * want + c) * plane);
    return Tensor::from_data({N, want, H, W}, std::move(out));
}

inline ForwardResult forward_segmentation(ToyNet& net, Binder& bind, const Tensor& x, Mode mode,
                                          const std::set<std::string>& capture = {}) {
    for (const std::string& name : capture)
        if (!net.has_probe(name)) throw std::invalid_argument("unknown probe name '" + name + "'");

    ForwardResult res;
    auto grab = [&](const std::string& name, const DiffValue& v) {
        if (capture.count(name)) res.captured.emplace(name, v.value);
    };

    DiffValue cur = Tape::constant(adapt_input_channels(x, net.in_channels));
    cur = relu(batch_norm(bind, net.stem.forward(bind, cur), net.stem_bn, mode));
    grab("stem.relu", cur);
    for (size_t i = 0; i < net.blocks.size(); ++i) {
        std::array<DiffValue, 3> sites;
        cur = net.blocks[i].forward(bind, cur, mode, &sites);
        const std::string bn = "block" + std::to_string(i);
        grab(bn + ".relu1", sites[0]);
        grab(bn + ".relu2", sites[1]);
        grab(bn + ".relu3", sites[2]);
    }
    cur = relu(net.head.forward(bind, cur));
    grab("head.relu", cur);
    cur = upsample_bilinear_2x(cur);
    res.logits = net.classifier.forward(bind, cur);
    return res;
}

// --- checkpoint: text manifest + tensor v1 payloads -------------------------

namespace detail {

inline std::string fmt17(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

inline std::string join_widths(const std::vector<int>& w) {
    std::string s;
    for (size_t i = 0; i < w.size(); ++i) {
        if (i) s += ",";
        s += std::to_string(w[i]);
    }
    return s;
}

inline std::vector<int> parse_int_list(const std::string& s) {
    std::vector<int> out;
    std::stringstream ss(s);
    std::string tok;
    while (std::getline(ss, tok, ',')) out.push_back(std::stoi(tok));
    return out;
}

inline std::string branches_str(const std::array<bool, 3>& b) {
    std::string s;
    const char* names[3] = {"IN", "LN", "BN"};
    for (int k = 0; k < 3; ++k) {
        if (!b[static_cast<size_t>(k)]) continue;
        if (!s.empty()) s += ",";
        s += names[k];
    }
    return s;
}

inline std::array<bool, 3> branches_from_str(const std::string& s) {
    std::array<bool, 3> b{false, false, false};
    std::stringstream ss(s);
    std::string tok;
    while (std::getline(ss, tok, ',')) {
        if (tok == "IN") b[0] = true;
        else if (tok == "LN") b[1] = true;
        else if (tok == "BN") b[2] = true;
        else throw std::invalid_argument("bad sn branch '" + tok + "'");
    }
    return b;
}

} // namespace detail

inline void save_checkpoint(ToyNet& net, const std::string& dir) {
    namespace fs = std::filesystem;
    fs::create_directories(fs::path(dir) / "tensors");
    auto tensors = net.named_tensors();
    std::ofstream m(fs::path(dir) / "manifest.txt");
    if (!m) throw std::runtime_error("cannot write checkpoint manifest in " + dir);
    m << "segbench checkpoint v1\n";
    m << "policy " << to_string(net.policy) << "\n";
    m << "widths " << detail::join_widths(net.widths) << "\n";
    m << "num_classes " << net.num_classes << "\n";
    m << "in_channels " << net.in_channels << "\n";
    m << "sn_branches " << detail::branches_str(net.sn_branches) << "\n";
    m << "eps " << detail::fmt17(net.eps) << "\n";
    m << "momentum " << detail::fmt17(net.momentum) << "\n";
    m << "seed " << net.seed << "\n";
    m << "tensors " << tensors.size() << "\n";
    for (size_t i = 0; i < tensors.size(); ++i) {
        char file[32];
        std::snprintf(file, sizeof(file), "tensors/t%04zu.t1", i);
        m << tensors[i].first << " " << file << "\n";
        tensors[i].second->save_v1((fs::path(dir) / file).string());
    }
    std::ofstream pr(fs::path(dir) / "probes.txt");
    for (const std::string& p : net.probes) pr << p << "\n";
}

inline ToyNet load_checkpoint(const std::string& dir) {
    namespace fs = std::filesystem;
    std::ifstream m(fs::path(dir) / "manifest.txt");
    if (!m) throw std::runtime_error("cannot open checkpoint manifest in " + dir);
    std::string line;
    std::getline(m, line);
    if (line != "segbench checkpoint v1") throw std::runtime_error("bad checkpoint magic: '" + line + "'");
    std::map<std::string, std::string> kv;
    size_t count = 0;
    while (std::getline(m, line)) {
        std::istringstream ls(line);
        std::string key, val;
        ls >> key >> val;
        if (key == "tensors") {
            count = std::stoul(val);
            break;
        }
        kv[key] = val;
    }
    ToyNet net = build_toynet(policy_from_string(kv.at("policy")), detail::parse_int_list(kv.at("widths")),
                              std::stoi(kv.at("num_classes")), std::stoull(kv.at("seed")),
                              detail::branches_from_str(kv.at("sn_branches")), std::stod(kv.at("eps")),
                              std::stod(kv.at("momentum")), std::stoi(kv.at("in_channels")));
    std::map<std::string, Tensor*> named;
    for (auto& [name, t] : net.named_tensors()) named[name] = t;
    for (size_t i = 0; i < count; ++i) {
        if (!std::getline(m, line)) throw std::runtime_error("checkpoint manifest truncated");
        std::istringstream ls(line);
        std::string name, file;
        ls >> name >> file;
        auto it = named.find(name);
        if (it == named.end()) throw std::runtime_error("checkpoint names unknown tensor '" + name + "'");
        Tensor loaded = Tensor::load_v1((fs::path(dir) / file).string());
        if (!loaded.same_shape(*it->second))
            throw std::runtime_error("checkpoint tensor '" + name + "' has shape " + loaded.shape_str() +
                                     ", expected " + it->second->shape_str());
        *it->second = loaded;
    }
    return net;
}

inline std::vector<std::string> load_probe_registry(const std::string& dir) {
    std::ifstream f(std::filesystem::path(dir) / "probes.txt");
    if (!f) throw std::runtime_error("cannot open probe registry in " + dir);
    std::vector<std::string> probes;
    std::string line;
    while (std::getline(f, line))
        if (!line.empty()) probes.push_back(line);
    return probes;
}

} // namespace segbench
