#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <vector>

#include "bifrec/rng.hpp"

namespace bifrec {

class Tensor;

namespace detail {

struct Node {
    std::vector<std::size_t> shape;
    std::vector<double> value;
    std::vector<double> grad;  // allocated on first backward touch
    bool requires_grad = false;
    bool is_leaf = true;
    bool consumed = false;     // interior node whose backward already ran
    uint64_t visit_mark = 0;   // traversal epoch, see backward()
    std::vector<std::shared_ptr<Node>> parents;
    // Accumulates this node's grad into its parents' grads. The node itself
    // is passed in so the closure never captures its own owner.
    std::function<void(const Node&)> backward_fn;

    std::size_t numel() const { return value.size(); }
};

}  // namespace detail

// Dense 64-bit float tensor participating in a reverse-mode tape. Value
// semantics over a shared node: copies alias the same storage, which is what
// both the graph and the optimizer want.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(std::vector<std::size_t> shape);
    static Tensor full(std::vector<std::size_t> shape, double v);
    static Tensor from_data(std::vector<std::size_t> shape, std::vector<double> data);
    static Tensor scalar(double v);
    static Tensor randn(std::vector<std::size_t> shape, RandomStream& rs,
                        double stddev = 1.0, double mean = 0.0);

    bool defined() const { return node_ != nullptr; }
    const std::vector<std::size_t>& shape() const { return node_->shape; }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t numel() const { return node_->value.size(); }
    std::size_t extent(std::size_t axis) const { return node_->shape.at(axis); }

    const std::vector<double>& data() const { return node_->value; }
    std::vector<double>& mutable_data() { return node_->value; }
    double item() const;

    Tensor& set_requires_grad(bool rg);
    bool requires_grad() const { return node_->requires_grad; }
    bool is_leaf() const { return node_->is_leaf; }

    bool has_grad() const { return node_ && !node_->grad.empty(); }
    const std::vector<double>& grad() const;
    void zero_grad() { if (node_) node_->grad.clear(); }

    // Detached copy of the forward value (constant leaf, no grad).
    Tensor detach_copy() const;

    // Identity of the underlying storage, for frozen-set bookkeeping.
    const void* node_id() const { return node_.get(); }

    // --- internals for op construction ---
    static Tensor make_interior(std::vector<std::size_t> shape, std::vector<double> value,
                                std::vector<Tensor> parents,
                                std::function<void(const detail::Node&)> backward_fn);
    detail::Node& node() const { return *node_; }
    std::shared_ptr<detail::Node> node_ptr() const { return node_; }

private:
    explicit Tensor(std::shared_ptr<detail::Node> n) : node_(std::move(n)) {}
    std::shared_ptr<detail::Node> node_;
};

// Runs reverse-mode accumulation from a scalar loss. Every requires_grad
// leaf reachable from the loss ends up with a fully populated grad; frozen
// leaves get none. A second backward over the same interior nodes throws.
void backward(const Tensor& loss);

// While alive, ops build no tape: results are constants. Thread-local.
struct NoGradGuard {
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
};

bool grad_enabled();

}  // namespace bifrec
