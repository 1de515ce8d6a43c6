#ifndef LEFED_AUTODIFF_HPP
#define LEFED_AUTODIFF_HPP

#include <algorithm>
#include <functional>
#include <memory>
#include <unordered_set>

#include "lefed/tensor.hpp"

namespace lefed {

// Reverse-mode tape. Nodes are created in topological order; backward walks
// them in reverse creation order. Gradients only ever flow into parameters,
// inputs are plain constants.

namespace detail {
inline bool& grad_mode_flag() {
    thread_local bool enabled = true;
    return enabled;
}
inline int64_t next_node_id() {
    thread_local int64_t id = 0;
    return ++id;
}
}  // namespace detail

struct NoGradGuard {
    bool prev;
    NoGradGuard() : prev(detail::grad_mode_flag()) { detail::grad_mode_flag() = false; }
    ~NoGradGuard() { detail::grad_mode_flag() = prev; }
    NoGradGuard(const NoGradGuard&) = delete;
};

inline bool grad_enabled() { return detail::grad_mode_flag(); }

template <class S>
struct NodeT {
    TensorT<S> value;
    TensorT<S> grad;  // allocated lazily by backward()
    bool requires_grad = false;
    int64_t id = 0;
    std::vector<std::shared_ptr<NodeT>> parents;
    // reads this node's grad, accumulates into parents' grads
    std::function<void(NodeT&)> backward_fn;

    bool has_grad() const { return grad.numel() == value.numel(); }
    void ensure_grad() {
        if (!has_grad()) grad = TensorT<S>::zeros_like(value);
    }
};

template <class S>
using VarT = std::shared_ptr<NodeT<S>>;

template <class S>
VarT<S> constant(TensorT<S> value) {
    auto n = std::make_shared<NodeT<S>>();
    n->value = std::move(value);
    n->id = detail::next_node_id();
    return n;
}

template <class S>
VarT<S> parameter(TensorT<S> value) {
    auto n = constant(std::move(value));
    n->requires_grad = true;
    return n;
}

template <class S>
VarT<S> scalar_var(S v) {
    return constant(TensorT<S>({1}, v));
}

// Creates the result node; wires parents/backward only when grad mode is on
// and some parent needs gradients.
template <class S>
VarT<S> make_op(TensorT<S> value, std::vector<VarT<S>> parents,
                std::function<void(NodeT<S>&)> backward_fn) {
    auto n = constant(std::move(value));
    bool need = false;
    if (grad_enabled())
        for (auto& p : parents) need = need || p->requires_grad;
    if (need) {
        n->requires_grad = true;
        n->parents = std::move(parents);
        n->backward_fn = std::move(backward_fn);
    }
    return n;
}

// Accumulates d(root)/d(param) * seed into .grad of every reachable parameter.
template <class S>
void backward(const VarT<S>& root, S seed = S(1)) {
    if (!root->requires_grad) return;
    if (root->value.numel() != 1)
        throw std::invalid_argument("backward: root must be scalar");
    // collect the subgraph behind the root
    std::vector<NodeT<S>*> nodes;
    std::unordered_set<NodeT<S>*> seen;
    std::vector<NodeT<S>*> stack{root.get()};
    seen.insert(root.get());
    while (!stack.empty()) {
        NodeT<S>* n = stack.back();
        stack.pop_back();
        nodes.push_back(n);
        for (auto& p : n->parents)
            if (p->requires_grad && seen.insert(p.get()).second) stack.push_back(p.get());
    }
    std::sort(nodes.begin(), nodes.end(),
              [](auto* a, auto* b) { return a->id > b->id; });
    root->ensure_grad();
    root->grad[0] += seed;
    for (NodeT<S>* n : nodes)
        if (n->backward_fn && n->has_grad()) n->backward_fn(*n);
    // intermediate grads stay on the nodes; callers keep only parameter vars,
    // so the rest is freed with the graph
}

// ---- elementwise / scalar ops ----

template <class S>
VarT<S> add(const VarT<S>& a, const VarT<S>& b) {
    check_same_shape(a->value, b->value, "add");
    TensorT<S> out = a->value;
    for (int64_t i = 0; i < out.numel(); ++i) out[i] += b->value[i];
    return make_op<S>(std::move(out), {a, b}, [a, b](NodeT<S>& n) {
        if (a->requires_grad) {
            a->ensure_grad();
            for (int64_t i = 0; i < n.grad.numel(); ++i) a->grad[i] += n.grad[i];
        }
        if (b->requires_grad) {
            b->ensure_grad();
            for (int64_t i = 0; i < n.grad.numel(); ++i) b->grad[i] += n.grad[i];
        }
    });
}

// a + c where c carries no gradient (feedback injection)
template <class S>
VarT<S> add_constant(const VarT<S>& a, const TensorT<S>& c) {
    check_same_shape(a->value, c, "add_constant");
    TensorT<S> out = a->value;
    for (int64_t i = 0; i < out.numel(); ++i) out[i] += c[i];
    return make_op<S>(std::move(out), {a}, [a](NodeT<S>& n) {
        a->ensure_grad();
        for (int64_t i = 0; i < n.grad.numel(); ++i) a->grad[i] += n.grad[i];
    });
}

template <class S>
VarT<S> scale(const VarT<S>& a, S s) {
    TensorT<S> out = a->value;
    for (auto& v : out.data) v *= s;
    return make_op<S>(std::move(out), {a}, [a, s](NodeT<S>& n) {
        a->ensure_grad();
        for (int64_t i = 0; i < n.grad.numel(); ++i) a->grad[i] += s * n.grad[i];
    });
}

template <class S>
VarT<S> leaky_relu(const VarT<S>& a, S slope) {
    TensorT<S> out = a->value;
    for (auto& v : out.data) v = v > S(0) ? v : slope * v;
    return make_op<S>(std::move(out), {a}, [a, slope](NodeT<S>& n) {
        a->ensure_grad();
        for (int64_t i = 0; i < n.grad.numel(); ++i)
            a->grad[i] += (a->value[i] > S(0) ? S(1) : slope) * n.grad[i];
    });
}

// weighted sum of scalar vars: sum_i w_i * x_i
template <class S>
VarT<S> weighted_sum(const std::vector<std::pair<S, VarT<S>>>& terms) {
    S acc = S(0);
    std::vector<VarT<S>> parents;
    for (auto& [w, v] : terms) {
        if (v->value.numel() != 1)
            throw std::invalid_argument("weighted_sum: non-scalar term");
        acc += w * v->value[0];
        parents.push_back(v);
    }
    auto ts = terms;
    return make_op<S>(TensorT<S>({1}, acc), std::move(parents), [ts](NodeT<S>& n) {
        for (auto& [w, v] : ts) {
            if (!v->requires_grad) continue;
            v->ensure_grad();
            v->grad[0] += w * n.grad[0];
        }
    });
}

template <class S>
VarT<S> detach(const VarT<S>& a) {
    return constant(a->value);
}

}  // namespace lefed

#endif
