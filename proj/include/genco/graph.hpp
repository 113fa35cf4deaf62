#pragma once

#include <functional>
#include <memory>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "genco/error.hpp"
#include "genco/tensor.hpp"

// Reverse-mode autodiff over a dynamically recorded graph. Operators append
// nodes holding the forward value plus a backward closure; Var is a cheap
// shared handle. backward() seeds a scalar root with 1 and walks the graph in
// reverse topological order (iterative, so deep graphs cannot overflow the
// stack). Leaf gradients accumulate across backward calls until zero_grad().

namespace genco {

template <class T>
struct Node {
    Tensor<T> value;
    Tensor<T> grad;  // allocated on first accumulation
    bool requires_grad = false;
    bool is_leaf = true;
    std::string name;  // non-empty for named parameters
    std::vector<std::shared_ptr<Node<T>>> parents;
    std::function<void(Node<T>&)> backward_fn;  // reads this->grad, accumulates into parents

    bool has_grad() const { return grad.same_shape(value) && grad.numel() == value.numel(); }

    Tensor<T>& ensure_grad() {
        if (!has_grad()) grad = Tensor<T>::zeros(value.shape());
        return grad;
    }

    void accumulate(const Tensor<T>& g) {
        if (g.shape() != value.shape())
            shape_fail("grad accumulate", value.shape(), g.shape());
        ensure_grad().add_(g);
    }

    void zero_grad() {
        if (has_grad()) grad.fill(T(0));
    }
};

// Thread-local recording switch; momentum-encoder forwards and evaluation run
// with recording off so no graph is built.
inline bool& grad_mode_ref() {
    thread_local bool enabled = true;
    return enabled;
}

inline bool grad_enabled() { return grad_mode_ref(); }

struct NoGradGuard {
    bool saved;
    NoGradGuard() : saved(grad_mode_ref()) { grad_mode_ref() = false; }
    ~NoGradGuard() { grad_mode_ref() = saved; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
};

template <class T>
class Var {
public:
    Var() = default;

    explicit Var(Tensor<T> value, bool requires_grad = false, std::string name = {}) {
        node_ = std::make_shared<Node<T>>();
        node_->value = std::move(value);
        node_->requires_grad = requires_grad;
        node_->is_leaf = true;
        node_->name = std::move(name);
    }

    static Var param(Tensor<T> value, std::string name) {
        return Var(std::move(value), true, std::move(name));
    }

    static Var constant(Tensor<T> value) { return Var(std::move(value), false); }

    bool defined() const { return node_ != nullptr; }
    const std::shared_ptr<Node<T>>& node() const { return node_; }

    const Tensor<T>& value() const { return node_->value; }
    Tensor<T>& value() { return node_->value; }
    const Tensor<T>& grad() const { return node_->ensure_grad(); }
    Tensor<T>& grad() { return node_->ensure_grad(); }

    const std::vector<int>& shape() const { return node_->value.shape(); }
    size_t numel() const { return node_->value.numel(); }
    bool requires_grad() const { return node_->requires_grad; }
    const std::string& name() const { return node_->name; }

    void zero_grad() { node_->zero_grad(); }

    // Leaf copy of the current value, cut loose from the recorded graph.
    Var detach() const { return Var(node_->value, false); }

    void backward() const {
        if (!defined()) throw Error("backward on undefined var");
        if (node_->value.numel() != 1) throw Error("backward requires a scalar root");
        if (!node_->requires_grad) throw Error("backward on a var that requires no grad");

        // Iterative post-order DFS: order holds parents before children, so a
        // reverse walk visits every node after all its consumers.
        std::vector<Node<T>*> order;
        std::unordered_set<Node<T>*> visited;
        std::vector<std::pair<Node<T>*, size_t>> stack;
        stack.emplace_back(node_.get(), 0);
        visited.insert(node_.get());
        while (!stack.empty()) {
            auto& top = stack.back();
            Node<T>* n = top.first;
            if (top.second < n->parents.size()) {
                Node<T>* p = n->parents[top.second++].get();
                if (p->requires_grad && visited.insert(p).second) stack.emplace_back(p, 0);
            } else {
                order.push_back(n);
                stack.pop_back();
            }
        }

        node_->ensure_grad().fill(T(1));
        for (size_t i = order.size(); i-- > 0;) {
            Node<T>* n = order[i];
            if (n->backward_fn) n->backward_fn(*n);
        }
    }

    // Used by operator implementations to attach a recorded op result.
    static Var make_result(Tensor<T> value, std::vector<Var> inputs,
                           std::function<void(Node<T>&)> backward_fn) {
        bool needs = false;
        if (grad_enabled())
            for (const auto& in : inputs)
                if (in.defined() && in.node()->requires_grad) needs = true;

        Var out(std::move(value), needs);
        if (needs) {
            out.node_->is_leaf = false;
            out.node_->parents.reserve(inputs.size());
            for (auto& in : inputs) out.node_->parents.push_back(in.node());
            out.node_->backward_fn = std::move(backward_fn);
        }
        return out;
    }

private:
    std::shared_ptr<Node<T>> node_;
};

using VarF = Var<float>;
using VarD = Var<double>;

}  // namespace genco
