#pragma once

#include <functional>
#include <memory>
#include <utility>
#include <vector>

#include "anyad/tensor.hpp"

namespace anyad {

// Reverse-mode tape. Every primitive application appends one node holding the
// op id, its input node ids and the eagerly computed output value. backward()
// walks the nodes in strict reverse recording order, which makes gradients
// deterministic for a fixed graph.
template <typename T>
class GraphT {
public:
    using Tensor = TensorT<T>;
    using Ptr = std::shared_ptr<Tensor>;
    using NodeId = int;

    struct Node {
        const char* op = "";
        std::vector<NodeId> inputs;
        Ptr value;
        bool needs_grad = false;            // any path to a requires_grad leaf
        std::vector<T> adjoint;             // empty until touched by backward
        std::function<void(GraphT&, NodeId)> backprop;  // adds into input adjoints
        Ptr external;                       // leaf only: grads scatter here
    };

    // Leaf referencing an externally owned tensor (parameter or input).
    NodeId leaf(Ptr t) {
        Node n;
        n.op = "leaf";
        n.value = t;
        n.needs_grad = t->requires_grad;
        n.external = t;
        nodes_.push_back(std::move(n));
        return static_cast<NodeId>(nodes_.size() - 1);
    }

    // Graph-owned constant; never receives gradient.
    NodeId constant(Tensor v) {
        auto p = std::make_shared<Tensor>(std::move(v));
        p->requires_grad = false;
        return leaf(std::move(p));
    }

    NodeId record(const char* op, std::vector<NodeId> inputs, Tensor value,
                  std::function<void(GraphT&, NodeId)> backprop) {
        Node n;
        n.op = op;
        n.inputs = std::move(inputs);
        for (NodeId i : n.inputs) n.needs_grad = n.needs_grad || nodes_[i].needs_grad;
        n.value = std::make_shared<Tensor>(std::move(value));
        if (n.needs_grad) n.backprop = std::move(backprop);
        nodes_.push_back(std::move(n));
        return static_cast<NodeId>(nodes_.size() - 1);
    }

    const Tensor& value(NodeId id) const { return *nodes_[id].value; }
    Ptr value_ptr(NodeId id) const { return nodes_[id].value; }
    Node& node(NodeId id) { return nodes_[id]; }
    bool needs_grad(NodeId id) const { return nodes_[id].needs_grad; }
    std::size_t size() const { return nodes_.size(); }

    // Adjoint buffer of a node, zero-initialized on first touch.
    std::vector<T>& adjoint(NodeId id) {
        Node& n = nodes_[id];
        if (n.adjoint.size() != n.value->data.size()) n.adjoint.assign(n.value->data.size(), T(0));
        return n.adjoint;
    }

    bool has_adjoint(NodeId id) const { return !nodes_[id].adjoint.empty(); }

    // Seeds d(loss)/d(loss) = 1 and accumulates into the grad buffers of every
    // requires_grad leaf reachable from `loss`. Accumulates across calls;
    // callers zero grads between steps.
    void backward(NodeId loss) {
        const Node& ln = nodes_[loss];
        if (ln.value->numel() != 1)
            throw ContractError("backward requires a scalar loss, got shape " + shape_str(ln.value->dims));
        if (!ln.needs_grad) return;  // nothing trainable upstream
        adjoint(loss)[0] = T(1);
        for (NodeId id = loss; id >= 0; --id) {
            Node& n = nodes_[id];
            if (!n.needs_grad || n.adjoint.empty()) continue;
            if (n.external) {
                if (n.external->requires_grad) {
                    n.external->ensure_grad();
                    for (std::size_t i = 0; i < n.adjoint.size(); ++i) n.external->grad[i] += n.adjoint[i];
                }
            } else if (n.backprop) {
                n.backprop(*this, id);
            }
            n.adjoint.clear();
        }
    }

    void clear() { nodes_.clear(); }

private:
    std::vector<Node> nodes_;
};

using Graph = GraphT<float>;

}  // namespace anyad
