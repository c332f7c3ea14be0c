#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "segbench/ops.hpp"
#include "segbench/tape.hpp"
#include "segbench/tensor.hpp"

namespace segbench {

// m-class segmentation treated as m independent binary tasks; target
// channels may overlap (no one-hot assumption anywhere).
struct BinaryTaskBatch {
    DiffValue logits; // (N,m,H,W)
    Tensor targets;   // same shape, entries in {0,1}
};

struct LossConfig {
    double lambda1 = 1.0; // dice weight
    double lambda2 = 1.0; // lovasz weight
};

namespace detail {

inline void check_batch(const BinaryTaskBatch& b, const char* name) {
    if (!b.logits.value.same_shape(b.targets))
        throw std::invalid_argument(std::string(name) + ": logits " + b.logits.value.shape_str() +
                                    " vs targets " + b.targets.shape_str());
    for (int64_t i = 0; i < b.targets.numel(); ++i) {
        double y = b.targets[i];
        if (y != 0.0 && y != 1.0)
            throw std::invalid_argument(std::string(name) + ": targets must be binary, entry " +
                                        std::to_string(i) + " is " + std::to_string(y));
    }
}

} // namespace detail

// Mean binary cross-entropy from logits, in the stable softplus form:
// y*softplus(-s) + (1-y)*softplus(s). Never materializes log(sigmoid).
inline DiffValue bce_loss(const BinaryTaskBatch& batch) {
    detail::check_batch(batch, "bce_loss");
    DiffValue y = Tape::constant(batch.targets);
    DiffValue pos = mul(y, softplus(neg(batch.logits)));
    DiffValue neg_part = mul(1.0 - y, softplus(batch.logits));
    return mean_all(add(pos, neg_part));
}

// Per-pixel dice: -(1/N) sum 2*y*sigmoid(s) / (y + sigmoid(s)).
// Pixels with y = 0 contribute exactly 0, so negative labels are ignored.
inline DiffValue dice_loss(const BinaryTaskBatch& batch) {
    detail::check_batch(batch, "dice_loss");
    DiffValue y = Tape::constant(batch.targets);
    DiffValue p = sigmoid(batch.logits);
    DiffValue term = div(mul(y, p) * 2.0, add(y, p));
    return neg(mean_all(term));
}

namespace detail {

// Jaccard-gradient weights from labels sorted by decreasing error:
// delta_i = 1 - (sum_{j>i} g_j) / (sum_j g_j + sum_{j<=i}(1-g_j)),
// returned as first differences.
inline std::vector<double> jaccard_weights(const std::vector<double>& sorted_labels) {
    const size_t p = sorted_labels.size();
    double total = 0;
    for (double g : sorted_labels) total += g;
    std::vector<double> delta(p);
    double cum_pos = 0, cum_neg = 0;
    for (size_t i = 0; i < p; ++i) {
        cum_pos += sorted_labels[i];
        cum_neg += 1.0 - sorted_labels[i];
        delta[i] = 1.0 - (total - cum_pos) / (total + cum_neg);
    }
    for (size_t i = p; i-- > 1;) delta[i] -= delta[i - 1];
    return delta;
}

// Variant weighting with the delta quotient taken over the sorted errors
// themselves rather than the sorted labels (values detached). Kept behind a
// flag for comparison only; disagrees with the set-function oracle by
// construction and carries no correctness claim.
inline std::vector<double> literal_error_weights(const std::vector<double>& sorted_errors) {
    const size_t p = sorted_errors.size();
    double total = 0;
    for (double m : sorted_errors) total += m;
    std::vector<double> delta(p);
    double cum = 0, cum_neg = 0;
    for (size_t i = 0; i < p; ++i) {
        cum += sorted_errors[i];
        cum_neg += 1.0 - sorted_errors[i];
        delta[i] = 1.0 - (total - cum) / (total + cum_neg);
    }
    for (size_t i = p; i-- > 1;) delta[i] -= delta[i - 1];
    return delta;
}

// one flattened binary task
inline DiffValue lovasz_task(const DiffValue& logits_flat, const std::vector<double>& labels,
                             bool paper_delta) {
    const size_t p = labels.size();
    std::vector<double> signs(p);
    for (size_t i = 0; i < p; ++i) signs[i] = labels[i] > 0.0 ? 1.0 : -1.0; // sign(0) = -1
    DiffValue errors =
        1.0 - mul(Tape::constant(Tensor::from_data({static_cast<int>(p)}, std::move(signs))), logits_flat);
    auto [sorted, perm] = sort_desc_detached(errors);
    std::vector<double> weights;
    if (paper_delta) {
        std::vector<double> sorted_errors(p);
        for (size_t i = 0; i < p; ++i) sorted_errors[i] = sorted.value[static_cast<int64_t>(i)];
        weights = literal_error_weights(sorted_errors);
    } else {
        std::vector<double> sorted_labels(p);
        for (size_t i = 0; i < p; ++i) sorted_labels[i] = labels[static_cast<size_t>(perm[i])];
        weights = jaccard_weights(sorted_labels);
    }
    return sum_all(
        mul(relu(sorted), Tape::constant(Tensor::from_data({static_cast<int>(p)}, std::move(weights)))));
}

} // namespace detail

// Lovasz hinge over binary tasks. per_image flattens each (image, class)
// plane into one task; otherwise each class is one task over the whole
// batch. Tasks without foreground contribute 0 and still count in the mean.
inline DiffValue lovasz_hinge(const BinaryTaskBatch& batch, bool per_image = true,
                              bool paper_delta = false) {
    detail::check_batch(batch, "lovasz_hinge");
    const Tensor& t = batch.targets;
    const int N = t.extent(0), m = t.extent(1);
    const int64_t plane = static_cast<int64_t>(t.extent(2)) * t.extent(3);

    DiffValue total;
    bool first = true;
    int num_tasks = 0;
    auto add_task = [&](const std::vector<int64_t>& idx) {
        ++num_tasks;
        std::vector<double> labels(idx.size());
        double fg = 0;
        for (size_t i = 0; i < idx.size(); ++i) {
            labels[i] = t[idx[i]];
            fg += labels[i];
        }
        if (fg == 0.0) return; // degenerate Jaccard task
        DiffValue task = detail::lovasz_task(gather_flat(batch.logits, idx), labels, paper_delta);
        total = first ? task : add(total, task);
        first = false;
    };

    if (per_image) {
        for (int n = 0; n < N; ++n)
            for (int c = 0; c < m; ++c) {
                std::vector<int64_t> idx(static_cast<size_t>(plane));
                const int64_t base = (static_cast<int64_t>(n) * m + c) * plane;
                for (int64_t i = 0; i < plane; ++i) idx[static_cast<size_t>(i)] = base + i;
                add_task(idx);
            }
    } else {
        for (int c = 0; c < m; ++c) {
            std::vector<int64_t> idx;
            idx.reserve(static_cast<size_t>(N) * plane);
            for (int n = 0; n < N; ++n) {
                const int64_t base = (static_cast<int64_t>(n) * m + c) * plane;
                for (int64_t i = 0; i < plane; ++i) idx.push_back(base + i);
            }
            add_task(idx);
        }
    }
    if (first) return Tape::constant(Tensor::scalar(0.0));
    return total / static_cast<double>(num_tasks);
}

// Direct evaluation of the Lovasz extension of the Jaccard set function
// delta(M) = 1 - |{y=1} n M^c| / |{y=1} u M| at relu(m). Independent of the
// hinge implementation; the verification oracle for it. Empty-foreground
// tasks are degenerate and evaluate to 0, matching the hinge convention.
inline double lovasz_extension_oracle(const std::vector<double>& m, const std::vector<int>& y) {
    if (m.size() != y.size()) throw std::invalid_argument("lovasz_extension_oracle: length mismatch");
    if (m.size() > 12) throw std::invalid_argument("lovasz_extension_oracle: length > 12");
    const size_t p = m.size();
    int fg = 0;
    for (int v : y) {
        if (v != 0 && v != 1) throw std::invalid_argument("lovasz_extension_oracle: labels must be binary");
        fg += v;
    }
    if (fg == 0) return 0.0;

    std::vector<double> mp(p);
    for (size_t i = 0; i < p; ++i) mp[i] = std::max(0.0, m[i]);
    std::vector<size_t> order(p);
    for (size_t i = 0; i < p; ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) { return mp[a] > mp[b]; });

    // Jaccard loss of the misprediction set M, straight from the definition
    auto delta_j = [&](const std::vector<bool>& in_m) {
        int fg_missed = 0, union_size = 0;
        for (size_t i = 0; i < p; ++i) {
            if (y[i] == 1 && !in_m[i]) ++fg_missed; // {y=1} n M^c
            if (y[i] == 1 || in_m[i]) ++union_size; // {y=1} u M
        }
        return 1.0 - static_cast<double>(fg_missed) / static_cast<double>(union_size);
    };

    std::vector<bool> in_m(p, false);
    double prev = delta_j(in_m); // empty set: 1 - fg/fg = 0
    double value = 0.0;
    for (size_t i = 0; i < p; ++i) {
        in_m[order[i]] = true;
        double cur = delta_j(in_m);
        value += mp[order[i]] * (cur - prev);
        prev = cur;
    }
    return value;
}

// Eq-style normalized mix: (bce + l1*dice + l2*lovasz) / (1 + l1 + l2).
inline DiffValue hybrid_loss(const BinaryTaskBatch& batch, const LossConfig& cfg,
                             bool lovasz_per_image = true) {
    if (cfg.lambda1 < 0 || cfg.lambda2 < 0)
        throw std::invalid_argument("hybrid_loss: lambda weights must be non-negative");
    DiffValue acc = bce_loss(batch);
    if (cfg.lambda1 > 0) acc = add(acc, dice_loss(batch) * cfg.lambda1);
    if (cfg.lambda2 > 0) acc = add(acc, lovasz_hinge(batch, lovasz_per_image) * cfg.lambda2);
    return acc / (1.0 + cfg.lambda1 + cfg.lambda2);
}

// --- evaluation -----------------------------------------------------------

// sigmoid(s) > 0.5, i.e. logit > 0
inline Tensor threshold_logits(const Tensor& logits) {
    std::vector<double> out(static_cast<size_t>(logits.numel()));
    for (int64_t i = 0; i < logits.numel(); ++i) out[static_cast<size_t>(i)] = logits[i] > 0.0 ? 1.0 : 0.0;
    return Tensor::from_data(logits.shape(), std::move(out));
}

struct IouReport {
    std::vector<double> per_class;
    std::vector<bool> empty_union; // classes where both pred and target were empty
    double mean = 0.0;
};

// Streaming intersection/union counts, aggregated over a whole dataset.
class IouAccumulator {
public:
    explicit IouAccumulator(int num_classes)
        : inter_(static_cast<size_t>(num_classes), 0.0), uni_(static_cast<size_t>(num_classes), 0.0) {}

    void add(const Tensor& pred, const Tensor& target) {
        if (!pred.same_shape(target))
            throw std::invalid_argument("iou: shape mismatch " + pred.shape_str() + " vs " +
                                        target.shape_str());
        if (pred.rank() != 4 || pred.extent(1) != static_cast<int>(inter_.size()))
            throw std::invalid_argument("iou: expected (N,m,H,W) with m = " + std::to_string(inter_.size()));
        const int N = pred.extent(0), m = pred.extent(1);
        const int64_t plane = static_cast<int64_t>(pred.extent(2)) * pred.extent(3);
        for (int n = 0; n < N; ++n)
            for (int c = 0; c < m; ++c) {
                const double* p = pred.data() + (static_cast<int64_t>(n) * m + c) * plane;
                const double* t = target.data() + (static_cast<int64_t>(n) * m + c) * plane;
                double inter = 0, uni = 0;
                for (int64_t i = 0; i < plane; ++i) {
                    const bool pp = p[i] != 0.0, tt = t[i] != 0.0;
                    inter += (pp && tt) ? 1.0 : 0.0;
                    uni += (pp || tt) ? 1.0 : 0.0;
                }
                inter_[static_cast<size_t>(c)] += inter;
                uni_[static_cast<size_t>(c)] += uni;
            }
    }

    IouReport report() const {
        IouReport r;
        r.per_class.resize(inter_.size());
        r.empty_union.resize(inter_.size());
        double acc = 0;
        for (size_t c = 0; c < inter_.size(); ++c) {
            r.empty_union[c] = uni_[c] == 0.0;
            r.per_class[c] = r.empty_union[c] ? 1.0 : inter_[c] / uni_[c];
            acc += r.per_class[c];
        }
        r.mean = acc / static_cast<double>(inter_.size());
        return r;
    }

private:
    std::vector<double> inter_, uni_;
};

// Per-class IoU + mean over classes of one batch of binary masks.
inline IouReport miou(const Tensor& pred, const Tensor& target) {
    if (pred.rank() != 4) throw std::invalid_argument("miou: expected (N,m,H,W), got " + pred.shape_str());
    IouAccumulator acc(pred.extent(1));
    acc.add(pred, target);
    return acc.report();
}

} // namespace segbench
