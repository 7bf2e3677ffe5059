// SPDX-License-Identifier: Apache-2.0
#include "cpolab/tensor.hpp"

#include <cmath>
#include <cstring>
#include <numeric>
#include <unordered_set>

namespace cpolab {

namespace {
thread_local bool g_grad_enabled = true;
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool grad_enabled() noexcept { return g_grad_enabled; }

std::size_t shape_numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
    std::string out = "(";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) {
            out += ", ";
        }
        out += std::to_string(shape[i]);
    }
    return out + ")";
}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> data, bool requires_grad) : node_(std::make_shared<Node>()) {
    if (shape_numel(shape) != data.size()) {
        throw DimensionError("tensor shape " + shape_str(shape) + " does not match " + std::to_string(data.size()) +
                             " values");
    }
    node_->shape = std::move(shape);
    node_->data = std::move(data);
    node_->requires_grad = requires_grad;
}

template <typename T>
Tensor<T> Tensor<T>::zeros(Shape shape, bool requires_grad) {
    const std::size_t n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<T>(n, T{0}), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T value, bool requires_grad) {
    return Tensor(Shape{1}, std::vector<T>{value}, requires_grad);
}

template <typename T>
std::size_t Tensor<T>::dim(std::size_t axis) const {
    if (axis >= rank()) {
        throw DimensionError("axis " + std::to_string(axis) + " out of range for shape " + shape_str(shape()));
    }
    return node_->shape[axis];
}

template <typename T>
T Tensor<T>::item() const {
    if (numel() != 1) {
        throw ContractError("item() on tensor of shape " + shape_str(shape()));
    }
    return node_->data[0];
}

template <typename T>
void Tensor<T>::set_requires_grad(bool on) {
    if (!is_leaf()) {
        throw ContractError("requires_grad can only be toggled on leaf tensors");
    }
    node_->requires_grad = on;
}

template <typename T>
Tensor<T> Tensor<T>::clone() const {
    Tensor out(shape(), node_->data, requires_grad());
    out.node_->grad = node_->grad;
    return out;
}

template <typename T>
void backward(const Tensor<T>& loss) {
    if (loss.numel() != 1) {
        throw ContractError("backward() needs a scalar loss, got shape " + shape_str(loss.shape()));
    }
    if (!loss.requires_grad()) {
        throw ContractError("backward() on a tensor that is not part of a recorded graph");
    }

    using Node = TensorNode<T>;
    // Iterative post-order DFS gives a topological order (parents before children).
    std::vector<Node*> order;
    std::unordered_set<Node*> visited;
    std::vector<std::pair<Node*, std::size_t>> stack{{loss.node().get(), 0}};
    visited.insert(loss.node().get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            Node* parent = node->parents[next++].get();
            if (parent->requires_grad && visited.insert(parent).second) {
                stack.emplace_back(parent, 0);
            }
            continue;
        }
        order.push_back(node);
        stack.pop_back();
    }

    loss.node()->grad_buffer()[0] += T{1};
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* node = *it;
        if (node->backward_fn && !node->grad.empty()) {
            node->backward_fn(*node);
        }
    }
    for (Node* node : order) {
        if (!node->is_leaf()) {
            node->backward_fn = nullptr;
            node->parents.clear();
            node->grad.clear();
            node->grad.shrink_to_fit();
        }
    }
}

template <typename T>
Tensor<T> finite_diff_grad(const std::function<double(const Tensor<T>&)>& f, Tensor<T> x, double h) {
    if (!(h > 0.0)) {
        throw ContractError("finite_diff_grad needs h > 0");
    }
    std::vector<T> out(x.numel());
    auto values = x.mutable_data();
    for (std::size_t i = 0; i < values.size(); ++i) {
        const T original = values[i];
        const T plus = static_cast<T>(static_cast<double>(original) + h);
        const T minus = static_cast<T>(static_cast<double>(original) - h);
        values[i] = plus;
        const double f_plus = f(x);
        values[i] = minus;
        const double f_minus = f(x);
        values[i] = original;
        // Divide by the representable step actually taken.
        const double step = static_cast<double>(plus) - static_cast<double>(minus);
        out[i] = static_cast<T>((f_plus - f_minus) / step);
    }
    return Tensor<T>(x.shape(), std::move(out));
}

double relative_error(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) {
        throw DimensionError("relative_error on spans of different length");
    }
    double diff = 0.0;
    double na = 0.0;
    double nb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        diff += (a[i] - b[i]) * (a[i] - b[i]);
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    const double denom = std::sqrt(std::max(na, nb));
    return denom == 0.0 ? 0.0 : std::sqrt(diff) / denom;
}

template <typename T>
std::uint64_t tensor_hash(const Tensor<T>& t) {
    std::uint64_t h = 1469598103934665603ULL;
    const auto values = t.data();
    const auto* bytes = reinterpret_cast<const unsigned char*>(values.data());
    for (std::size_t i = 0; i < values.size_bytes(); ++i) {
        h ^= bytes[i];
        h *= 1099511628211ULL;
    }
    for (std::size_t d : t.shape()) {
        h ^= static_cast<std::uint64_t>(d);
        h *= 1099511628211ULL;
    }
    return h;
}

template class Tensor<float>;
template class Tensor<double>;
template void backward(const Tensor<float>&);
template void backward(const Tensor<double>&);
template Tensor<float> finite_diff_grad(const std::function<double(const Tensor<float>&)>&, Tensor<float>, double);
template Tensor<double> finite_diff_grad(const std::function<double(const Tensor<double>&)>&, Tensor<double>, double);
template std::uint64_t tensor_hash(const Tensor<float>&);
template std::uint64_t tensor_hash(const Tensor<double>&);

} // namespace cpolab
