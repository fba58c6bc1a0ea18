#pragma once

#include <functional>
#include <unordered_map>
#include <vector>

#include "motionid/tensor.hpp"

namespace motionid::num {

template <typename T>
class Graph;

// Handle to a node in a graph. Cheap to copy; valid while the graph lives.
template <typename T>
struct Value {
    Graph<T>* graph = nullptr;
    int id = -1;

    const Tensor<T>& tensor() const { return graph->value(id); }
    const Shape& shape() const { return tensor().shape(); }
    std::int64_t size() const { return tensor().size(); }
};

// dLoss/dParam per leaf, keyed by the identity the leaf was registered with.
// Leaves that never reached the loss get a zero gradient on lookup.
template <typename T>
class GradientMap {
public:
    void put(const void* key, Tensor<T> grad) { grads_[key] = std::move(grad); }

    bool has(const void* key) const { return grads_.count(key) != 0; }

    Tensor<T> at(const void* key, const Shape& shape) const {
        auto it = grads_.find(key);
        if (it == grads_.end()) return Tensor<T>::zeros(shape);
        return it->second;
    }

    std::size_t size() const { return grads_.size(); }

private:
    std::unordered_map<const void*, Tensor<T>> grads_;
};

// Define-by-run tape. Nodes are appended as operations execute, so the node
// vector is already in topological order; backward() just walks it in
// reverse. A graph is confined to one thread.
template <typename T>
class Graph {
public:
    using BackwardFn = std::function<void(Graph&, int)>;

    struct Node {
        Tensor<T> value;
        std::vector<int> inputs;
        BackwardFn backward;       // pulls grad(self), accumulates into inputs
        const void* key = nullptr; // leaf identity, null for interior nodes
        bool needs_grad = false;
    };

    // Differentiable leaf. Registering the same key twice returns the
    // original node, so shared parameters accumulate naturally.
    Value<T> leaf(const Tensor<T>& t, const void* key = nullptr) {
        if (key != nullptr) {
            auto it = key_index_.find(key);
            if (it != key_index_.end()) return {this, it->second};
        }
        Node n;
        n.value = t;
        n.needs_grad = true;
        n.key = key;
        nodes_.push_back(std::move(n));
        grads_.emplace_back();
        const int id = static_cast<int>(nodes_.size()) - 1;
        if (key != nullptr) key_index_[key] = id;
        return {this, id};
    }

    // Non-differentiable input (batch data, precomputed tables).
    Value<T> constant(const Tensor<T>& t) {
        Node n;
        n.value = t;
        n.needs_grad = false;
        nodes_.push_back(std::move(n));
        grads_.emplace_back();
        return {this, static_cast<int>(nodes_.size()) - 1};
    }

    Value<T> make(Tensor<T> value, std::vector<int> inputs, BackwardFn backward) {
        Node n;
        n.value = std::move(value);
        n.inputs = std::move(inputs);
        for (int in : n.inputs)
            if (nodes_[static_cast<std::size_t>(in)].needs_grad) n.needs_grad = true;
        if (n.needs_grad) n.backward = std::move(backward);
        nodes_.push_back(std::move(n));
        grads_.emplace_back();
        return {this, static_cast<int>(nodes_.size()) - 1};
    }

    const Tensor<T>& value(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }
    bool needs_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].needs_grad; }
    std::size_t size() const { return nodes_.size(); }

    // Gradient buffer, zero-initialized on first touch.
    std::vector<T>& grad(int id) {
        auto& g = grads_[static_cast<std::size_t>(id)];
        if (g.empty()) g.assign(static_cast<std::size_t>(nodes_[static_cast<std::size_t>(id)].value.size()), T(0));
        return g;
    }

    bool grad_seeded(int id) const { return !grads_[static_cast<std::size_t>(id)].empty(); }

private:
    std::vector<Node> nodes_;
    std::vector<std::vector<T>> grads_;
    std::unordered_map<const void*, int> key_index_;

    template <typename U>
    friend GradientMap<U> backward(Graph<U>&, Value<U>);
};

// Reverse-mode sweep from a scalar loss. Accumulates dLoss/dLeaf for every
// differentiable leaf reachable from the loss.
template <typename T>
GradientMap<T> backward(Graph<T>& g, Value<T> loss) {
    if (loss.graph != &g) throw NumericError("backward: loss belongs to a different graph");
    if (loss.size() != 1)
        throw ShapeError("backward requires a scalar loss, got shape " + shape_str(loss.shape()));
    g.grad(loss.id)[0] = T(1);
    for (int id = loss.id; id >= 0; --id) {
        auto& node = g.nodes_[static_cast<std::size_t>(id)];
        if (!node.needs_grad || !g.grad_seeded(id)) continue;
        if (node.backward) node.backward(g, id);
    }
    GradientMap<T> out;
    for (std::size_t i = 0; i < g.nodes_.size(); ++i) {
        const auto& node = g.nodes_[i];
        if (node.key != nullptr && g.grad_seeded(static_cast<int>(i)))
            out.put(node.key, Tensor<T>(node.value.shape(), g.grads_[i]));
    }
    return out;
}

}  // namespace motionid::num
