#pragma once

#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include "ounet/core/error.hpp"
#include "ounet/core/tensor.hpp"

namespace ounet::nn {

/// Node in the reverse-mode graph. Ops attach a `backprop` closure that
/// reads this node's grad and accumulates into the parents' grads.
template <typename T>
struct Var {
    Tensor<T> value;
    Tensor<T> grad;  // allocated on first touch
    bool requires_grad = false;
    std::vector<std::shared_ptr<Var>> parents;
    std::function<void(Var&)> backprop;

    Tensor<T>& ensure_grad() {
        if (grad.numel() != value.numel()) grad = Tensor<T>::zeros(value.shape());
        return grad;
    }

    void zero_grad() {
        if (grad.numel()) grad.set_zero();
    }
};

template <typename T>
using VarPtr = std::shared_ptr<Var<T>>;

template <typename T>
VarPtr<T> make_var(Tensor<T> value, bool requires_grad = false) {
    auto v = std::make_shared<Var<T>>();
    v->value = std::move(value);
    v->requires_grad = requires_grad;
    return v;
}

/// Thread-local gradient mode. When disabled, ops compute values only and
/// record no graph, so intermediates free as references drop.
inline bool& grad_mode_flag() {
    thread_local bool enabled = true;
    return enabled;
}

inline bool grad_enabled() { return grad_mode_flag(); }

class NoGradGuard {
public:
    NoGradGuard() : prev_(grad_mode_flag()) { grad_mode_flag() = false; }
    ~NoGradGuard() { grad_mode_flag() = prev_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

template <typename T>
bool track_grad(const std::vector<VarPtr<T>>& inputs) {
    if (!grad_enabled()) return false;
    for (const auto& v : inputs)
        if (v && v->requires_grad) return true;
    return false;
}

/// Reverse-mode sweep from one or more roots, each seeded with an
/// explicit upstream gradient (dL/droot).
template <typename T>
void backward(const std::vector<std::pair<VarPtr<T>, Tensor<T>>>& roots) {
    // Post-order over the union graph; closures then run in reverse.
    std::vector<Var<T>*> order;
    std::unordered_set<Var<T>*> seen;
    std::vector<Var<T>*> stack;
    std::unordered_set<Var<T>*> expanded;

    for (const auto& [root, seed] : roots) {
        require(root != nullptr, ErrorKind::numerics, "backward: null root");
        require(seed.shape() == root->value.shape(), ErrorKind::shape,
                "backward: seed shape ", shape_str(seed.shape()), " != value shape ",
                shape_str(root->value.shape()));
        Tensor<T>& g = root->ensure_grad();
        for (std::int64_t i = 0; i < g.numel(); ++i) g[i] += seed[i];
        if (!seen.count(root.get())) stack.push_back(root.get());
    }

    while (!stack.empty()) {
        Var<T>* v = stack.back();
        if (expanded.count(v)) {
            stack.pop_back();
            if (!seen.count(v)) {
                seen.insert(v);
                order.push_back(v);
            }
            continue;
        }
        expanded.insert(v);
        for (const auto& p : v->parents)
            if (p && !seen.count(p.get()) && !expanded.count(p.get())) stack.push_back(p.get());
    }

    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Var<T>* v = *it;
        if (v->backprop && v->grad.numel()) v->backprop(*v);
    }
}

template <typename T>
void backward(const VarPtr<T>& root, Tensor<T> seed) {
    backward<T>({{root, std::move(seed)}});
}

}  // namespace ounet::nn
