#pragma once

#include <functional>
#include <utility>
#include <vector>

#include "tandem/core/array.hpp"

namespace tandem {

struct Var {
    int32_t id = -1;
    bool valid() const { return id >= 0; }
};

/// Reverse-mode gradient recorder. Operations append nodes holding the
/// forward value and a closure that scatters the node's gradient into its
/// parents. Gradients flow only through nodes marked as needing them, so
/// constant inputs (images, positional tables) cost nothing on the way back.
class Tape {
public:
    struct Node {
        Array val;
        Array grad;
        bool has_grad = false;
        bool needs_grad = false;
        std::function<void(Tape&, int32_t)> back;
    };

    Var leaf(Array a, bool needs_grad = false) {
        nodes_.push_back(Node{std::move(a), {}, false, needs_grad, nullptr});
        return Var{static_cast<int32_t>(nodes_.size() - 1)};
    }

    Var apply(Array out, std::initializer_list<Var> parents,
              std::function<void(Tape&, int32_t)> back) {
        bool ng = false;
        for (Var p : parents) ng = ng || nodes_[static_cast<size_t>(p.id)].needs_grad;
        nodes_.push_back(Node{std::move(out), {}, false, ng, ng ? std::move(back) : nullptr});
        return Var{static_cast<int32_t>(nodes_.size() - 1)};
    }

    Var apply(Array out, const std::vector<Var>& parents,
              std::function<void(Tape&, int32_t)> back) {
        bool ng = false;
        for (Var p : parents) ng = ng || nodes_[static_cast<size_t>(p.id)].needs_grad;
        nodes_.push_back(Node{std::move(out), {}, false, ng, ng ? std::move(back) : nullptr});
        return Var{static_cast<int32_t>(nodes_.size() - 1)};
    }

    const Array& val(Var v) const { return nodes_[static_cast<size_t>(v.id)].val; }

    /// Gradient buffer of a node, allocated zero on first touch.
    Array& grad_buf(Var v) {
        Node& n = nodes_[static_cast<size_t>(v.id)];
        if (!n.has_grad) {
            n.grad = Array(n.val.shape());
            n.has_grad = true;
        }
        return n.grad;
    }

    bool wants_grad(Var v) const { return nodes_[static_cast<size_t>(v.id)].needs_grad; }
    bool has_grad(Var v) const { return nodes_[static_cast<size_t>(v.id)].has_grad; }

    /// Gradient of the last backward() target w.r.t. v; zeros if v never
    /// influenced the target.
    Array grad(Var v) const {
        const Node& n = nodes_[static_cast<size_t>(v.id)];
        if (n.has_grad) return n.grad;
        return Array(n.val.shape());
    }

    /// Reverse sweep from a scalar node.
    void backward(Var v) {
        const Node& top = nodes_[static_cast<size_t>(v.id)];
        require(top.val.numel() == 1, "backward: target must be scalar");
        grad_buf(v)[0] = 1.0;
        for (int32_t id = v.id; id >= 0; --id) {
            Node& n = nodes_[static_cast<size_t>(id)];
            if (n.back && n.has_grad) n.back(*this, id);
        }
    }

    size_t size() const { return nodes_.size(); }
    void clear() { nodes_.clear(); }

private:
    std::vector<Node> nodes_;
};

}  // namespace tandem
