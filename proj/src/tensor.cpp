#include "bifrec/tensor.hpp"

#include <algorithm>
#include <string>

#include "bifrec/errors.hpp"

namespace bifrec {

namespace {

thread_local int g_no_grad_depth = 0;

std::size_t shape_numel(const std::vector<std::size_t>& shape) {
    std::size_t n = 1;
    for (std::size_t e : shape) {
        if (e == 0) throw ShapeError("tensor extents must be positive");
        n *= e;
    }
    return n;
}

}  // namespace

bool grad_enabled() { return g_no_grad_depth == 0; }

NoGradGuard::NoGradGuard() { ++g_no_grad_depth; }
NoGradGuard::~NoGradGuard() { --g_no_grad_depth; }

Tensor Tensor::zeros(std::vector<std::size_t> shape) {
    return full(std::move(shape), 0.0);
}

Tensor Tensor::full(std::vector<std::size_t> shape, double v) {
    auto n = std::make_shared<detail::Node>();
    std::size_t count = shape_numel(shape);
    n->shape = std::move(shape);
    n->value.assign(count, v);
    return Tensor(std::move(n));
}

Tensor Tensor::from_data(std::vector<std::size_t> shape, std::vector<double> data) {
    if (shape_numel(shape) != data.size())
        throw ShapeError("from_data: shape does not match data length");
    auto n = std::make_shared<detail::Node>();
    n->shape = std::move(shape);
    n->value = std::move(data);
    return Tensor(std::move(n));
}

Tensor Tensor::scalar(double v) { return from_data({1}, {v}); }

Tensor Tensor::randn(std::vector<std::size_t> shape, RandomStream& rs,
                     double stddev, double mean) {
    std::size_t count = shape_numel(shape);
    std::vector<double> data(count);
    for (auto& d : data) d = rs.normal(mean, stddev);
    return from_data(std::move(shape), std::move(data));
}

double Tensor::item() const {
    if (numel() != 1) throw ShapeError("item: tensor is not a scalar");
    return node_->value[0];
}

Tensor& Tensor::set_requires_grad(bool rg) {
    if (!node_->is_leaf)
        throw NumericError("requires_grad can only be toggled on leaf tensors");
    node_->requires_grad = rg;
    return *this;
}

const std::vector<double>& Tensor::grad() const {
    if (!has_grad()) throw NumericError("tensor holds no grad");
    return node_->grad;
}

Tensor Tensor::detach_copy() const {
    return from_data(node_->shape, node_->value);
}

Tensor Tensor::make_interior(std::vector<std::size_t> shape, std::vector<double> value,
                             std::vector<Tensor> parents,
                             std::function<void(const detail::Node&)> backward_fn) {
    if (shape_numel(shape) != value.size())
        throw ShapeError("make_interior: shape does not match value length");
    auto n = std::make_shared<detail::Node>();
    n->shape = std::move(shape);
    n->value = std::move(value);
    if (grad_enabled()) {
        bool needs = false;
        for (const auto& p : parents) needs = needs || p.node().requires_grad;
        if (needs) {
            n->is_leaf = false;
            n->requires_grad = true;
            for (auto& p : parents) n->parents.push_back(p.node_ptr());
            n->backward_fn = std::move(backward_fn);
        }
    }
    return Tensor(std::move(n));
}

void backward(const Tensor& loss) {
    if (!loss.defined() || loss.numel() != 1)
        throw NumericError("backward: loss must be a defined scalar (numel == 1)");

    auto* root = loss.node_ptr().get();

    // Iterative post-order DFS; reversing the post-order gives the
    // root-first order needed so a node's grad is complete before its
    // backward_fn pushes into its parents. Visited bookkeeping uses a
    // per-call epoch stamp so membership checks stay O(1).
    static thread_local uint64_t epoch = 0;
    ++epoch;
    std::vector<detail::Node*> order;
    std::vector<std::pair<detail::Node*, std::size_t>> stack;
    auto mark_seen = [&](detail::Node* n) {
        if (n->visit_mark == epoch) return false;
        n->visit_mark = epoch;
        return true;
    };
    if (mark_seen(root)) stack.push_back({root, 0});
    while (!stack.empty()) {
        auto& [node, idx] = stack.back();
        if (idx < node->parents.size()) {
            detail::Node* next = node->parents[idx++].get();
            if (!next->is_leaf && mark_seen(next)) stack.push_back({next, 0});
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    for (detail::Node* n : order) {
        if (n->consumed)
            throw NumericError("backward: tape already consumed; rebuild the forward graph");
    }

    root->grad.assign(1, 1.0);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        detail::Node* n = *it;
        if (n->grad.empty()) n->grad.assign(n->numel(), 0.0);
        if (n->backward_fn) n->backward_fn(*n);
        n->consumed = true;
    }
}

}  // namespace bifrec
