#pragma once

#include <cstddef>
#include <functional>
#include <deque>

#include "templora/core/error.hpp"
#include "templora/core/tensor.hpp"

namespace templora {

template <class T>
class Graph;

/// Handle to a node recorded on a Graph.
template <class T>
struct Var {
    Graph<T>* graph = nullptr;
    std::size_t id = 0;

    [[nodiscard]] const Tensor<T>& value() const { return graph->value(id); }
    [[nodiscard]] const Shape& shape() const { return value().shape(); }
    [[nodiscard]] bool requires_grad() const { return graph->requires_grad(id); }
};

/// Reverse-mode tape.
///
/// Nodes are appended in evaluation order, which is a topological order of
/// the computation, so backward() walks the tape in reverse and visits each
/// node exactly once. A graph is single-use: backward() may be called once.
/// With recording off, ops only compute values and keep no closures.
template <class T>
class Graph {
public:
    using BackwardFn = std::function<void(Graph&, std::size_t self)>;

    explicit Graph(bool record = true) : record_(record) {}
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    [[nodiscard]] bool recording() const { return record_; }
    [[nodiscard]] std::size_t size() const { return nodes_.size(); }

    /// Non-differentiable input that owns its value.
    Var<T> constant(Tensor<T> value) { return push(std::move(value), nullptr, false, nullptr, nullptr); }

    /// Non-differentiable input that borrows storage (frozen weights). The
    /// referenced tensor must outlive the graph.
    Var<T> borrow(const Tensor<T>& value) { return push({}, &value, false, nullptr, nullptr); }

    /// Leaf bound to a parameter; gradients accumulate into param.grad on backward().
    Var<T> param(Parameter<T>& p) {
        const bool rg = record_ && p.requires_grad;
        return push({}, &p.value, rg, rg ? &p : nullptr, nullptr);
    }

    /// Records an op output. `fn` is kept only if recording and any input needs grad.
    Var<T> make(Tensor<T> value, bool requires_grad, BackwardFn fn) {
        const bool rg = record_ && requires_grad;
        return push(std::move(value), nullptr, rg, nullptr, rg ? std::move(fn) : BackwardFn{});
    }

    [[nodiscard]] const Tensor<T>& value(std::size_t id) const {
        const Node& n = nodes_[id];
        return n.borrowed ? *n.borrowed : n.owned;
    }
    [[nodiscard]] bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }

    /// Gradient buffer of a node, zero-allocated on first access.
    Tensor<T>& grad(std::size_t id) {
        Node& n = nodes_[id];
        if (n.grad.shape() != value(id).shape()) n.grad = Tensor<T>(value(id).shape());
        return n.grad;
    }
    [[nodiscard]] bool has_grad(std::size_t id) const { return !nodes_[id].grad.empty() || value(id).empty(); }

    void backward(Var<T> loss) {
        if (loss.graph != this) throw ConfigError("backward: loss belongs to another graph");
        if (!record_) throw ConfigError("backward: graph was built without recording");
        if (consumed_) throw ConfigError("backward: graph already consumed");
        if (value(loss.id).size() != 1) {
            throw ShapeError("backward: root must be scalar, got " + shape_str(value(loss.id).shape()));
        }
        consumed_ = true;
        if (!nodes_[loss.id].requires_grad) return;
        grad(loss.id)[0] = T{1};
        for (std::size_t i = loss.id + 1; i-- > 0;) {
            Node& n = nodes_[i];
            if (!n.requires_grad || n.grad.empty()) continue;
            if (n.param != nullptr) {
                if (n.param->grad.shape() != n.param->value.shape()) n.param->zero_grad();
                auto dst = n.param->grad.values();
                auto src = n.grad.values();
                for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += src[j];
            } else if (n.backward) {
                n.backward(*this, i);
            }
        }
    }

private:
    struct Node {
        Tensor<T> owned;
        const Tensor<T>* borrowed = nullptr;
        Tensor<T> grad;
        bool requires_grad = false;
        Parameter<T>* param = nullptr;
        BackwardFn backward;
    };

    Var<T> push(Tensor<T> owned, const Tensor<T>* borrowed, bool rg, Parameter<T>* p, BackwardFn fn) {
        nodes_.push_back(Node{std::move(owned), borrowed, {}, rg, p, std::move(fn)});
        return Var<T>{this, nodes_.size() - 1};
    }

    bool record_;
    bool consumed_ = false;
    std::deque<Node> nodes_;  // stable references across push_back
};

}  // namespace templora
