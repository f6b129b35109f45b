#include "carn/tensor.hpp"

#include <cmath>
#include <numeric>
#include <unordered_set>

#include "carn/autodiff.hpp"

namespace carn {

std::string shape_to_string(const Shape& shape) {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += ",";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

std::size_t shape_numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

template <typename T>
bool Tensor<T>::all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
}

template class Tensor<float>;
template class Tensor<double>;

KinkTrace*& active_kink_trace() noexcept {
    thread_local KinkTrace* trace = nullptr;
    return trace;
}

template <typename T>
void backward(const Var<T>& loss) {
    if (loss.value().size() != 1) {
        throw ShapeError("backward: loss must be a scalar, got shape " +
                         shape_to_string(loss.shape()));
    }
    // Iterative post-order DFS gives a topological order (inputs first).
    std::vector<Node<T>*> order;
    std::vector<std::pair<Node<T>*, std::size_t>> stack;
    std::unordered_set<Node<T>*> marks;
    auto mark = [&](Node<T>* n) { return marks.insert(n).second; };
    Node<T>* root = loss.node();
    if (!root->requires_grad) return;
    mark(root);
    stack.emplace_back(root, 0);
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            Node<T>* p = node->parents[next++].get();
            if (p->requires_grad && mark(p)) stack.emplace_back(p, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    root->grad_storage()[0] += T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node<T>* n = *it;
        if (n->backward_fn && n->grad.size() == n->value.size()) n->backward_fn(*n);
    }
}

template void backward<float>(const Var<float>&);
template void backward<double>(const Var<double>&);

}  // namespace carn
