#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "segbench/blocks.hpp"
#include "segbench/losses.hpp"
#include "segbench/rng.hpp"
#include "segbench/synth.hpp"

namespace segbench {

// warmup (linear ramp) -> constant -> poly decay, one phase after another
struct OptimConfig {
    double base_lr = 0.01;
    double momentum = 0.9;
    double weight_decay = 5e-4;
    int warmup_iters = 100;
    int constant_iters = 700;
    int poly_iters = 1700;
    double poly_power = 0.9;
    int batch_size = 4;
    bool decay_norm_params = true; // weight decay also hits gamma/beta/logits

    int total_iters() const { return warmup_iters + constant_iters + poly_iters; }

    void validate() const {
        if (base_lr <= 0 || poly_power <= 0) throw std::invalid_argument("OptimConfig: base_lr, poly_power must be > 0");
        if (warmup_iters < 0 || constant_iters < 0 || poly_iters < 0 || batch_size < 1)
            throw std::invalid_argument("OptimConfig: negative phase length or batch size");
    }
};

// lr at a 0-based iteration: ramp hits base_lr exactly at the warmup end,
// poly starts at exactly base_lr and decays as (1 - t/P)^power.
inline double lr_at(const OptimConfig& cfg, int iter) {
    if (iter < 0 || iter >= cfg.total_iters())
        throw std::out_of_range("lr_at: iteration " + std::to_string(iter) + " outside schedule of " +
                                std::to_string(cfg.total_iters()));
    if (iter < cfg.warmup_iters)
        return cfg.base_lr * static_cast<double>(iter + 1) / static_cast<double>(cfg.warmup_iters);
    if (iter < cfg.warmup_iters + cfg.constant_iters) return cfg.base_lr;
    const int t = iter - cfg.warmup_iters - cfg.constant_iters;
    return cfg.base_lr *
           std::pow(1.0 - static_cast<double>(t) / static_cast<double>(cfg.poly_iters), cfg.poly_power);
}

// training aborted on a non-finite loss or gradient
struct TrainingDiverged : std::runtime_error {
    explicit TrainingDiverged(const std::string& what) : std::runtime_error(what) {}
};

// g <- grad + weight_decay * param; v <- momentum * v + g; param <- param - lr * v
inline void sgd_update(Param& p, const Tensor& grad, double lr, const OptimConfig& cfg) {
    if (!grad.same_shape(p.value))
        throw std::invalid_argument("sgd_update: gradient shape mismatch for " + p.name);
    const bool decay = cfg.weight_decay != 0.0 && (cfg.decay_norm_params || !p.norm_affine);
    const int64_t n = p.value.numel();
    if (!p.velocity.defined()) p.velocity = Tensor::zeros(p.value.shape());
    std::vector<double> v(p.velocity.vec()), w(p.value.vec());
    for (int64_t i = 0; i < n; ++i) {
        double g = grad[i] + (decay ? cfg.weight_decay * w[static_cast<size_t>(i)] : 0.0);
        if (!std::isfinite(g)) throw TrainingDiverged("non-finite gradient in parameter " + p.name);
        v[static_cast<size_t>(i)] = cfg.momentum * v[static_cast<size_t>(i)] + g;
        w[static_cast<size_t>(i)] -= lr * v[static_cast<size_t>(i)];
    }
    p.velocity = Tensor::from_data(p.value.shape(), std::move(v));
    p.value = Tensor::from_data(p.value.shape(), std::move(w));
}

inline void sgd_step(const std::vector<Binder::Binding>& bindings, const GradMap& grads, double lr,
                     const OptimConfig& cfg) {
    for (const Binder::Binding& b : bindings) sgd_update(*b.param, grads.at(b.value.node), lr, cfg);
}

struct RunLog {
    struct IterRow {
        int iter;
        double lr, loss;
    };
    struct EvalRow {
        int iter;
        IouReport iou;
    };
    std::vector<IterRow> iters;
    std::vector<EvalRow> evals;
};

namespace detail {

inline Tensor modality_input(const SegSample& s, char modality) {
    if (modality == 'A' || modality == 'a') return s.image_a;
    if (modality == 'B' || modality == 'b') return s.image_b;
    throw std::invalid_argument("modality must be A or B");
}

// (N,C,H,W) batch from per-sample (C,H,W) tensors
inline Tensor stack(const std::vector<Tensor>& planes, const std::vector<int64_t>& ids) {
    const Tensor& f = planes[static_cast<size_t>(ids[0])];
    const int C = f.extent(0), H = f.extent(1), W = f.extent(2);
    std::vector<double> buf(ids.size() * static_cast<size_t>(C) * H * W);
    for (size_t i = 0; i < ids.size(); ++i) {
        const Tensor& t = planes[static_cast<size_t>(ids[i])];
        std::copy(t.data(), t.data() + t.numel(),
                  buf.begin() + static_cast<int64_t>(i) * C * H * W);
    }
    return Tensor::from_data({static_cast<int>(ids.size()), C, H, W}, std::move(buf));
}

} // namespace detail

// Dataset-aggregated mIoU of a net over any sample source, eval mode,
// logits thresholded at 0.
inline IouReport eval_miou_source(ToyNet& net, const std::function<SegSample(int64_t)>& sample_at,
                                  int64_t count, char modality, int batch = 8) {
    IouAccumulator acc(net.num_classes);
    std::vector<Tensor> inputs, masks;
    for (int64_t i = 0; i < count; ++i) {
        SegSample s = sample_at(i);
        inputs.push_back(detail::modality_input(s, modality));
        masks.push_back(s.mask);
    }
    for (int64_t at = 0; at < count; at += batch) {
        std::vector<int64_t> ids;
        for (int64_t i = at; i < std::min<int64_t>(count, at + batch); ++i) ids.push_back(i);
        Tape tape;
        Binder bind(tape);
        ForwardResult res = forward_segmentation(net, bind, detail::stack(inputs, ids), Mode::eval);
        acc.add(threshold_logits(res.logits.value), detail::stack(masks, ids));
    }
    return acc.report();
}

inline IouReport eval_miou(ToyNet& net, const SampleStream& stream, char modality, int batch = 8) {
    return eval_miou_source(
        net, [&stream](int64_t i) { return stream.at(i); }, stream.size(), modality, batch);
}

struct TrainOptions {
    char modality = 'A';
    bool lovasz_per_image = true;
    int eval_interval = 0; // 0 disables periodic eval
    const SampleStream* val = nullptr;
    int log_every = 1;
};

// SGD-with-momentum training of a ToyNet on a synthetic stream. Deterministic
// given (net initial state, stream, seed): epoch order is a seeded
// permutation, every tensor is 64-bit, and updates run in binding order.
inline RunLog train(ToyNet& net, const SampleStream& stream, const LossConfig& loss_cfg,
                    const OptimConfig& optim, uint64_t seed, const TrainOptions& opts = {}) {
    optim.validate();
    RunLog log;
    const int total = optim.total_iters();
    if (total == 0) return log;

    std::vector<Tensor> inputs, masks;
    for (int64_t i = 0; i < stream.size(); ++i) {
        SegSample s = stream.at(i);
        inputs.push_back(detail::modality_input(s, opts.modality));
        masks.push_back(s.mask);
    }

    std::vector<int64_t> order(static_cast<size_t>(stream.size()));
    int64_t cursor = 0;
    uint64_t epoch = 0;
    auto reshuffle = [&]() {
        for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int64_t>(i);
        CounterRng rng(seed, 0x5EED0000ull + epoch);
        rng.shuffle(order);
        cursor = 0;
        ++epoch;
    };
    reshuffle();

    for (int iter = 0; iter < total; ++iter) {
        std::vector<int64_t> ids;
        for (int b = 0; b < optim.batch_size; ++b) {
            if (cursor >= static_cast<int64_t>(order.size())) reshuffle();
            ids.push_back(order[static_cast<size_t>(cursor++)]);
        }
        Tape tape;
        Binder bind(tape);
        ForwardResult res = forward_segmentation(net, bind, detail::stack(inputs, ids), Mode::train);
        BinaryTaskBatch batch;
        batch.logits = res.logits;
        batch.targets = detail::stack(masks, ids);
        DiffValue loss = hybrid_loss(batch, loss_cfg, opts.lovasz_per_image);
        const double loss_val = loss.value[0];
        if (!std::isfinite(loss_val))
            throw TrainingDiverged("non-finite loss at iteration " + std::to_string(iter));
        const double lr = lr_at(optim, iter);
        GradMap grads = tape.backward(loss);
        sgd_step(bind.bindings(), grads, lr, optim);
        if (opts.log_every > 0 && iter % opts.log_every == 0) log.iters.push_back({iter, lr, loss_val});

        if (opts.eval_interval > 0 && opts.val && (iter + 1) % opts.eval_interval == 0)
            log.evals.push_back({iter, eval_miou(net, *opts.val, opts.modality)});
    }
    return log;
}

// Same-vs-cross modality evaluation of one trained net: the toy analog of
// the train-on-one, test-on-both protocol.
struct CrossModalityResult {
    char trained_on = 'A';
    double miou_same = 0.0;  // evaluated on the training modality
    double miou_cross = 0.0; // evaluated on the other modality
    double decay = 0.0;      // same - cross
    IouReport report_same, report_cross;
};

inline CrossModalityResult cross_modality_eval(ToyNet& net, const SampleStream& stream, char trained_on) {
    CrossModalityResult r;
    r.trained_on = trained_on;
    const char other = (trained_on == 'A' || trained_on == 'a') ? 'B' : 'A';
    r.report_same = eval_miou(net, stream, trained_on);
    r.report_cross = eval_miou(net, stream, other);
    r.miou_same = r.report_same.mean;
    r.miou_cross = r.report_cross.mean;
    r.decay = r.miou_same - r.miou_cross;
    return r;
}

// --- RunLog CSV --------------------------------------------------------------

inline void save_runlog_csv(const RunLog& log, const std::string& iter_path, const std::string& eval_path) {
    char buf[64];
    {
        std::ofstream os(iter_path);
        if (!os) throw std::runtime_error("cannot write " + iter_path);
        os << "iter,lr,loss\n";
        for (const RunLog::IterRow& r : log.iters) {
            os << r.iter << ",";
            std::snprintf(buf, sizeof(buf), "%.17g", r.lr);
            os << buf << ",";
            std::snprintf(buf, sizeof(buf), "%.17g", r.loss);
            os << buf << "\n";
        }
    }
    {
        std::ofstream os(eval_path);
        if (!os) throw std::runtime_error("cannot write " + eval_path);
        os << "iter,class,iou\n";
        for (const RunLog::EvalRow& r : log.evals) {
            for (size_t c = 0; c < r.iou.per_class.size(); ++c) {
                std::snprintf(buf, sizeof(buf), "%.17g", r.iou.per_class[c]);
                os << r.iter << ",c" << c << "," << buf << "\n";
            }
            std::snprintf(buf, sizeof(buf), "%.17g", r.iou.mean);
            os << r.iter << ",mean," << buf << "\n";
        }
    }
}

} // namespace segbench
