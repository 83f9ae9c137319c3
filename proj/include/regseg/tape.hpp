#pragma once

#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "regseg/tensor.hpp"

namespace regseg {

// Handle to a node on a Tape. Cheap to copy; valid until Tape::clear().
template <typename T>
struct Var {
    int id = -1;
    bool valid() const { return id >= 0; }
};

// Append-only reverse-mode tape. One training step builds, evaluates and
// backpropagates the graph sequentially; inputs of a node always precede it.
template <typename T>
class Tape {
public:
    struct Node {
        std::string op;
        Tensor<T> value;
        Tensor<T> grad;  // allocated lazily during backward
        std::function<void()> back;
        bool requires_grad = false;
    };

    // When set, every new node's value is scanned and a NumericsError names
    // the first offending node.
    bool check_finite = false;

    Var<T> leaf(Tensor<T> value, const std::string& name = "leaf", bool trainable = false) {
        return push(name, std::move(value), trainable, nullptr);
    }

    // Creates the node first; attach its backward with set_back so the closure
    // can capture the returned Var.
    Var<T> make(const std::string& op, Tensor<T> value, const std::vector<Var<T>>& inputs) {
        bool rg = false;
        for (auto v : inputs) rg = rg || node(v.id).requires_grad;
        return push(op, std::move(value), rg, nullptr);
    }

    void set_back(Var<T> v, std::function<void()> back) {
        Node& n = node(v.id);
        if (n.requires_grad) n.back = std::move(back);
    }

    const Tensor<T>& value(Var<T> v) const { return nodes_[static_cast<size_t>(v.id)].value; }
    Tensor<T>& mutable_value(Var<T> v) { return nodes_[static_cast<size_t>(v.id)].value; }

    // Gradient accumulator for a node; allocates zeros on first use.
    Tensor<T>& grad(Var<T> v) {
        Node& n = node(v.id);
        if (n.grad.size() == 0) n.grad = Tensor<T>(n.value.shape);
        return n.grad;
    }

    bool has_grad(Var<T> v) const {
        return nodes_[static_cast<size_t>(v.id)].grad.size() != 0;
    }

    // Whether gradients flow into this node; ops may skip input-gradient work
    // for nodes that never need one (e.g. image leaves).
    bool requires_grad(Var<T> v) const {
        return nodes_[static_cast<size_t>(v.id)].requires_grad;
    }

    const std::string& op_name(Var<T> v) const { return nodes_[static_cast<size_t>(v.id)].op; }

    void backward(Var<T> loss) {
        Node& ln = node(loss.id);
        if (ln.value.size() != 1)
            throw ShapeError("backward requires a scalar loss, got " + shape_str(ln.value.shape));
        if (!std::isfinite(static_cast<double>(ln.value[0])))
            throw NumericsError("loss is not finite at node '" + ln.op + "'");
        grad(loss)[0] = T(1);
        for (int i = loss.id; i >= 0; --i) {
            Node& n = nodes_[static_cast<size_t>(i)];
            if (n.grad.size() == 0 || !n.back) continue;
            n.back();
        }
    }

    void clear() { nodes_.clear(); }
    size_t num_nodes() const { return nodes_.size(); }

private:
    std::vector<Node> nodes_;

    Node& node(int id) { return nodes_[static_cast<size_t>(id)]; }

    Var<T> push(const std::string& op, Tensor<T> value, bool rg, std::function<void()> back) {
        if (check_finite) {
            long long bad = value.first_nonfinite();
            if (bad >= 0)
                throw NumericsError("non-finite value produced by node '" + op + "' at index " +
                                    std::to_string(bad));
        }
        Node n;
        n.op = op;
        n.value = std::move(value);
        n.requires_grad = rg;
        n.back = std::move(back);
        nodes_.push_back(std::move(n));
        return Var<T>{static_cast<int>(nodes_.size()) - 1};
    }
};

}  // namespace regseg
