#pragma once

#include <string>
#include <vector>

#include "segbench/tape.hpp"
#include "segbench/tensor.hpp"

namespace segbench {

enum class Mode { train, eval };

// Trainable tensor plus its optimizer slot. Layers own their Params;
// each forward pass re-registers them on the current tape.
struct Param {
    std::string name;
    Tensor value;
    Tensor velocity;         // SGD momentum buffer, lazily sized
    bool norm_affine = false; // gamma/beta/SN logits; exemptable from weight decay

    Param() = default;
    Param(std::string n, Tensor v, bool affine = false)
        : name(std::move(n)), value(std::move(v)), norm_affine(affine) {}
};

// Registers Params as leaves on one tape and remembers node -> Param so the
// optimizer can route gradients back after backward(). Binding the same
// Param twice returns the same node, so reuse accumulates gradients
// correctly on the tape.
class Binder {
public:
    explicit Binder(Tape& tape) : tape_(&tape) {}

    DiffValue operator()(Param& p) {
        for (const Binding& b : bound_)
            if (b.param == &p) return b.value;
        DiffValue v = tape_->leaf(p.value, /*is_param=*/true);
        bound_.push_back({v, &p});
        return v;
    }

    Tape& tape() { return *tape_; }

    struct Binding {
        DiffValue value;
        Param* param;
    };
    const std::vector<Binding>& bindings() const { return bound_; }

private:
    Tape* tape_;
    std::vector<Binding> bound_;
};

} // namespace segbench
