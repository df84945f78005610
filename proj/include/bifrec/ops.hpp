#pragma once

#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "bifrec/tensor.hpp"

namespace bifrec {

// Differentiable primitive catalog. All ops operate on rank-1/rank-2 tensors,
// record themselves on the tape when grad mode is on, and implement the
// textbook forward definition. Shape violations throw ShapeError naming the
// offending shapes.

Tensor add(const Tensor& a, const Tensor& b);   // b may be a row (d) or scalar
Tensor sub(const Tensor& a, const Tensor& b);   // same broadcast rule as add
Tensor mul(const Tensor& a, const Tensor& b);   // elementwise; same rule
Tensor scalar_mul(const Tensor& a, double c);
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
Tensor slice(const Tensor& a, std::size_t axis, std::size_t start, std::size_t end);
Tensor softmax(const Tensor& a, std::size_t axis);
Tensor layer_norm(const Tensor& a);  // normalizes each row, eps 1e-5, no affine
Tensor gelu(const Tensor& a);        // exact erf form
Tensor embedding_lookup(const Tensor& table, const std::vector<int>& ids);
Tensor mean(const Tensor& a, std::size_t axis);
Tensor l2_normalize_rows(const Tensor& a);  // rows with norm <= 1e-9 map to zero
Tensor vlog(const Tensor& a);
Tensor vexp(const Tensor& a);
Tensor negate(const Tensor& a);
Tensor sum(const Tensor& a);  // full reduction to a scalar

// Attributes for primitives that need more than tensor inputs.
struct OpAttrs {
    std::optional<std::size_t> axis;
    std::optional<std::size_t> start;
    std::optional<std::size_t> end;
    std::optional<double> scalar;
    std::vector<int> ids;
};

// Dispatch by op id over the closed catalog. Unknown ids are rejected.
Tensor apply_primitive(std::string_view op_id, const std::vector<Tensor>& inputs,
                       const OpAttrs& attrs = {});

const std::vector<std::string>& primitive_catalog();

// Central-difference gradient oracle: (f(x+eps e_i) - f(x-eps e_i)) / (2 eps)
// per coordinate. Used by tests to check every analytic gradient.
Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f,
                        const Tensor& theta, double eps);

std::string shape_str(const std::vector<std::size_t>& shape);

}  // namespace bifrec
