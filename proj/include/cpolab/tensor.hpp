// SPDX-License-Identifier: Apache-2.0
//
// Dense row-major tensors with reverse-mode differentiation.
//
// A Tensor is a cheap handle onto shared storage (copying a Tensor aliases it,
// use clone() for a deep copy). Every op whose inputs require gradients records
// its parents and a backward closure on the output node; backward() walks that
// recorded graph in reverse topological order and then frees it, so each forward
// pass is differentiated exactly once. Leaf gradients accumulate across calls
// until zero_grad().
#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "cpolab/errors.hpp"

namespace cpolab {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

template <typename T>
struct TensorNode {
    using BackwardFn = std::function<void(TensorNode&)>;

    Shape shape;
    std::vector<T> data;
    std::vector<T> grad; // empty until something flows into this node
    bool requires_grad = false;
    std::vector<std::shared_ptr<TensorNode>> parents;
    BackwardFn backward_fn;

    bool is_leaf() const noexcept { return !backward_fn; }

    std::vector<T>& grad_buffer() {
        if (grad.empty()) {
            grad.assign(data.size(), T{0});
        }
        return grad;
    }
};

template <typename T>
class Tensor {
public:
    using Node = TensorNode<T>;

    Tensor() : Tensor(Shape{0}, {}) {}
    Tensor(Shape shape, std::vector<T> data, bool requires_grad = false);

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor scalar(T value, bool requires_grad = false);
    static Tensor from_node(std::shared_ptr<Node> node) { return Tensor(std::move(node)); }

    const Shape& shape() const noexcept { return node_->shape; }
    std::size_t rank() const noexcept { return node_->shape.size(); }
    std::size_t dim(std::size_t axis) const;
    std::size_t numel() const noexcept { return node_->data.size(); }

    std::span<const T> data() const noexcept { return node_->data; }
    // Direct write access. Only meaningful for leaves (parameters, inputs).
    std::span<T> mutable_data() noexcept { return node_->data; }
    T item() const;

    bool requires_grad() const noexcept { return node_->requires_grad; }
    void set_requires_grad(bool on);
    bool has_grad() const noexcept { return !node_->grad.empty(); }
    std::span<const T> grad() const noexcept { return node_->grad; }
    std::span<T> mutable_grad() noexcept { return node_->grad; }
    void zero_grad() noexcept { node_->grad.clear(); }

    bool is_leaf() const noexcept { return node_->is_leaf(); }
    const std::shared_ptr<Node>& node() const noexcept { return node_; }

    Tensor clone() const;
    Tensor detach() const { return Tensor(shape(), node_->data, false); }

private:
    explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}
    std::shared_ptr<Node> node_;
};

// While alive, ops on this thread record no graph (inference passes over
// parameters that still have requires_grad set).
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

bool grad_enabled() noexcept;

// Fills grads of every requires_grad tensor reachable from `loss`, then frees
// the recorded graph. Throws ContractError for a non-scalar loss or one that
// was not produced by a recorded computation.
template <typename T>
void backward(const Tensor<T>& loss);

// Central difference (f(x+h e_i) - f(x-h e_i)) / (2h) for every coordinate of
// x. x is perturbed in place (and restored bit-exactly), so f may read x
// through any alias, e.g. a model parameter set sharing x's storage.
template <typename T>
Tensor<T> finite_diff_grad(const std::function<double(const Tensor<T>&)>& f, Tensor<T> x, double h);

// ||a - b|| / max(||a||, ||b||), 0 when both are zero.
double relative_error(std::span<const double> a, std::span<const double> b);

// FNV-1a over the raw bytes of the values. Used for freeze checks.
template <typename T>
std::uint64_t tensor_hash(const Tensor<T>& t);

} // namespace cpolab
