#pragma once

#include <functional>
#include <stdexcept>
#include <unordered_map>
#include <utility>
#include <vector>

#include "segbench/tensor.hpp"

namespace segbench {

class Tape;

// Tensor bound to a tape node. node < 0 marks a constant that never
// receives gradient; constants carry no tape pointer.
struct DiffValue {
    Tensor value;
    int node = -1;
    Tape* tape = nullptr;

    bool tracked() const { return node >= 0; }
    const std::vector<int>& shape() const { return value.shape(); }
};

using GradMap = std::unordered_map<int, Tensor>;

// Reverse-mode record. Nodes are appended in evaluation order, so every
// node's inputs precede it; backward() walks the list in exact reverse.
// A Tape and its DiffValues are confined to one thread.
class Tape {
public:
    // fn maps the node's cotangent to one cotangent per tracked input,
    // aligned with `inputs` (entries for untracked inputs were already
    // dropped by the op).
    using BackwardFn = std::function<std::vector<Tensor>(const Tensor& cot)>;

    static DiffValue constant(Tensor t) { return DiffValue{std::move(t), -1, nullptr}; }

    DiffValue leaf(Tensor t, bool is_param = false) {
        Node n;
        n.shape = t.shape();
        n.needs_grad = is_param;
        n.is_param = is_param;
        nodes_.push_back(std::move(n));
        return DiffValue{std::move(t), static_cast<int>(nodes_.size()) - 1, this};
    }

    DiffValue record(Tensor value, std::vector<int> inputs, BackwardFn fn) {
        bool needs = false;
        for (int id : inputs) {
            if (id < 0 || id >= static_cast<int>(nodes_.size()))
                throw std::logic_error("Tape::record: input node id out of range");
            needs = needs || nodes_[static_cast<size_t>(id)].needs_grad;
        }
        Node n;
        n.shape = value.shape();
        n.inputs = std::move(inputs);
        n.needs_grad = needs;
        if (needs) n.fn = std::move(fn);
        nodes_.push_back(std::move(n));
        return DiffValue{std::move(value), static_cast<int>(nodes_.size()) - 1, this};
    }

    // Gradients of a scalar root for every parameter leaf. Parameters the
    // root does not depend on get zero gradients.
    GradMap backward(const DiffValue& root) const {
        if (!root.tracked() || root.tape != this)
            throw std::invalid_argument("backward: root is not tracked on this tape");
        if (nodes_.empty()) throw std::invalid_argument("backward: empty tape");
        if (!root.value.is_scalar())
            throw std::invalid_argument("backward: root must be scalar, got shape " + root.value.shape_str());

        std::vector<std::vector<double>> cot(nodes_.size());
        cot[static_cast<size_t>(root.node)] = std::vector<double>(1, 1.0);

        GradMap grads;
        for (int id = root.node; id >= 0; --id) {
            const Node& n = nodes_[static_cast<size_t>(id)];
            if (!n.needs_grad) continue;
            std::vector<double>& buf = cot[static_cast<size_t>(id)];
            if (buf.empty()) {
                if (n.is_param) grads.emplace(id, Tensor::zeros(n.shape));
                continue;
            }
            Tensor c = Tensor::from_data(n.shape, std::move(buf));
            if (n.is_param) grads.emplace(id, c);
            if (!n.fn) continue;
            std::vector<Tensor> contrib = n.fn(c);
            if (contrib.size() != n.inputs.size())
                throw std::logic_error("Tape::backward: backward rule arity mismatch");
            for (size_t k = 0; k < n.inputs.size(); ++k) {
                const Node& in = nodes_[static_cast<size_t>(n.inputs[k])];
                if (!in.needs_grad) continue;
                accumulate(cot[static_cast<size_t>(n.inputs[k])], contrib[k]);
            }
        }
        // parameters recorded after the root still owe a zero gradient
        for (size_t id = 0; id < nodes_.size(); ++id) {
            if (nodes_[id].is_param && !grads.count(static_cast<int>(id)))
                grads.emplace(static_cast<int>(id), Tensor::zeros(nodes_[id].shape));
        }
        return grads;
    }

    size_t size() const { return nodes_.size(); }

private:
    struct Node {
        std::vector<int> shape;
        std::vector<int> inputs;
        BackwardFn fn;
        bool needs_grad = false;
        bool is_param = false;
    };

    static void accumulate(std::vector<double>& buf, const Tensor& t) {
        if (buf.empty()) {
            buf = t.vec();
            return;
        }
        if (static_cast<int64_t>(buf.size()) != t.numel())
            throw std::logic_error("Tape::backward: cotangent shape mismatch");
        const double* p = t.data();
        for (size_t i = 0; i < buf.size(); ++i) buf[i] += p[i];
    }

    std::vector<Node> nodes_;
};

} // namespace segbench
