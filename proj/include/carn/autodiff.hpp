#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "carn/tensor.hpp"

namespace carn {

template <typename T>
struct Node {
    Tensor<T> value;
    Tensor<T> grad;  // allocated lazily on first accumulation
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward_fn;
    bool requires_grad = false;
    const char* op = "leaf";

    void accumulate(std::size_t i, T g) { grad_storage()[i] += g; }
    std::vector<T>& grad_storage() {
        if (grad.size() != value.size()) grad = Tensor<T>(value.shape(), T(0));
        return grad.storage();
    }
};

/// Handle to a node in a reverse-mode computation graph. Copies share the
/// node. Graph edges point from outputs to inputs only, so a graph is freed
/// when its last output handle goes out of scope.
template <typename T>
class Var {
public:
    Var() = default;
    explicit Var(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

    static Var leaf(Tensor<T> value, bool requires_grad) {
        auto n = std::make_shared<Node<T>>();
        n->value = std::move(value);
        n->requires_grad = requires_grad;
        return Var(std::move(n));
    }
    static Var parameter(Tensor<T> value) { return leaf(std::move(value), true); }
    static Var constant(Tensor<T> value) { return leaf(std::move(value), false); }

    const Tensor<T>& value() const { return node_->value; }
    Tensor<T>& mutable_value() { return node_->value; }
    const Shape& shape() const { return node_->value.shape(); }

    /// Gradient after backward(); zeros if nothing reached this node.
    const Tensor<T>& grad() const {
        node_->grad_storage();
        return node_->grad;
    }
    void zero_grad() const { node_->grad = Tensor<T>(); }

    bool requires_grad() const { return node_->requires_grad; }
    bool valid() const noexcept { return static_cast<bool>(node_); }
    Node<T>* node() const noexcept { return node_.get(); }
    const std::shared_ptr<Node<T>>& shared() const noexcept { return node_; }

private:
    std::shared_ptr<Node<T>> node_;
};

/// Creates a non-leaf node. `fn` is called during backward with the node
/// whose `grad` holds dL/d(output); it must accumulate into parents that
/// require gradients.
template <typename T>
Var<T> make_result(Tensor<T> value, std::vector<Var<T>> parents, const char* op,
                   std::function<void(Node<T>&)> fn) {
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(value);
    n->op = op;
    for (auto& p : parents) {
        n->requires_grad = n->requires_grad || p.requires_grad();
        n->parents.push_back(p.shared());
    }
    if (n->requires_grad) n->backward_fn = std::move(fn);
    return Var<T>(std::move(n));
}

/// Reverse-mode sweep from a scalar loss. Gradients accumulate into every
/// reachable node that requires them; a node used twice receives the sum of
/// both contributions.
template <typename T>
void backward(const Var<T>& loss);

/// Records the discrete decisions made by piecewise ops (relu sign, max-pool
/// argmax, |x| sign) so a finite-difference probe can tell when its two
/// evaluations landed on different smooth pieces.
class KinkTrace {
public:
    void record(std::uint64_t v) noexcept {
        hash_ ^= v + 0x9e3779b97f4a7c15ULL + (hash_ << 6) + (hash_ >> 2);
    }
    std::uint64_t value() const noexcept { return hash_; }

private:
    std::uint64_t hash_ = 0xcbf29ce484222325ULL;
};

/// Thread-local active trace; null when tracing is off.
KinkTrace*& active_kink_trace() noexcept;

class ScopedKinkTrace {
public:
    explicit ScopedKinkTrace(KinkTrace& t) noexcept : previous_(active_kink_trace()) {
        active_kink_trace() = &t;
    }
    ~ScopedKinkTrace() { active_kink_trace() = previous_; }
    ScopedKinkTrace(const ScopedKinkTrace&) = delete;
    ScopedKinkTrace& operator=(const ScopedKinkTrace&) = delete;

private:
    KinkTrace* previous_;
};

}  // namespace carn
