#include "bifrec/ops.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "bifrec/errors.hpp"

namespace bifrec {

namespace {

using detail::Node;

std::vector<double>& grad_buf(Node& n) {
    if (n.grad.empty()) n.grad.assign(n.numel(), 0.0);
    return n.grad;
}

bool wants_grad(const Node& n) { return n.requires_grad; }

[[noreturn]] void shape_fail(const std::string& op, const Tensor& a, const Tensor& b) {
    throw ShapeError(op + ": incompatible shapes " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()));
}

// Broadcast classification for add/sub/mul: the right operand may be the
// same shape, a row vector matching the last extent, or a scalar.
enum class Bcast { same, row, scalar };

Bcast classify_broadcast(const std::string& op, const Tensor& a, const Tensor& b) {
    if (a.shape() == b.shape()) return Bcast::same;
    if (b.numel() == 1) return Bcast::scalar;
    if (a.rank() == 2 && b.rank() == 1 && b.extent(0) == a.extent(1)) return Bcast::row;
    if (a.rank() == 2 && b.rank() == 2 && b.extent(0) == 1 && b.extent(1) == a.extent(1))
        return Bcast::row;
    shape_fail(op, a, b);
}

Tensor binary_pointwise(const std::string& op, const Tensor& a, const Tensor& b,
                        double b_sign, bool is_mul) {
    Bcast bc = classify_broadcast(op, a, b);
    const auto& av = a.data();
    const auto& bv = b.data();
    std::size_t n = a.numel();
    std::size_t cols = a.rank() == 2 ? a.extent(1) : n;
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i) {
        double bval = bc == Bcast::same ? bv[i] : bc == Bcast::scalar ? bv[0] : bv[i % cols];
        out[i] = is_mul ? av[i] * bval : av[i] + b_sign * bval;
    }
    return Tensor::make_interior(
        a.shape(), std::move(out), {a, b},
        [a, b, bc, cols, b_sign, is_mul](const Node& self) {
            std::size_t n = self.numel();
            if (wants_grad(a.node())) {
                auto& ga = grad_buf(a.node());
                const auto& bv = b.data();
                for (std::size_t i = 0; i < n; ++i) {
                    double bval = bc == Bcast::same ? bv[i]
                                : bc == Bcast::scalar ? bv[0] : bv[i % cols];
                    ga[i] += self.grad[i] * (is_mul ? bval : 1.0);
                }
            }
            if (wants_grad(b.node())) {
                auto& gb = grad_buf(b.node());
                const auto& av = a.data();
                for (std::size_t i = 0; i < n; ++i) {
                    double w = is_mul ? av[i] : b_sign;
                    std::size_t j = bc == Bcast::same ? i : bc == Bcast::scalar ? 0 : i % cols;
                    gb[j] += self.grad[i] * w;
                }
            }
        });
}

void require_rank2(const std::string& op, const Tensor& a) {
    if (a.rank() != 2)
        throw ShapeError(op + ": expected a rank-2 tensor, got " + shape_str(a.shape()));
}

}  // namespace

std::string shape_str(const std::vector<std::size_t>& shape) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << "]";
    return os.str();
}

Tensor add(const Tensor& a, const Tensor& b) { return binary_pointwise("add", a, b, 1.0, false); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary_pointwise("sub", a, b, -1.0, false); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary_pointwise("elementwise-mul", a, b, 1.0, true); }

Tensor scalar_mul(const Tensor& a, double c) {
    std::vector<double> out(a.data());
    for (auto& v : out) v *= c;
    return Tensor::make_interior(a.shape(), std::move(out), {a}, [a, c](const Node& self) {
        if (!wants_grad(a.node())) return;
        auto& ga = grad_buf(a.node());
        for (std::size_t i = 0; i < self.numel(); ++i) ga[i] += c * self.grad[i];
    });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    require_rank2("matmul", a);
    require_rank2("matmul", b);
    std::size_t m = a.extent(0), k = a.extent(1), k2 = b.extent(0), n = b.extent(1);
    if (k != k2) shape_fail("matmul", a, b);
    std::vector<double> out(m * n, 0.0);
    {
        const double* A = a.data().data();
        const double* B = b.data().data();
        double* C = out.data();
        for (std::size_t i = 0; i < m; ++i) {
            const double* arow = A + i * k;
            double* crow = C + i * n;
            for (std::size_t p = 0; p < k; ++p) {
                double aip = arow[p];
                const double* brow = B + p * n;
                for (std::size_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
            }
        }
    }
    return Tensor::make_interior(
        {m, n}, std::move(out), {a, b}, [a, b, m, k, n](const Node& self) {
            const double* G = self.grad.data();
            if (wants_grad(a.node())) {
                // dA = G @ B^T
                double* GA = grad_buf(a.node()).data();
                const double* B = b.data().data();
                for (std::size_t i = 0; i < m; ++i) {
                    const double* grow = G + i * n;
                    double* garow = GA + i * k;
                    for (std::size_t p = 0; p < k; ++p) {
                        const double* brow = B + p * n;
                        double acc = 0.0;
                        for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
                        garow[p] += acc;
                    }
                }
            }
            if (wants_grad(b.node())) {
                // dB = A^T @ G
                double* GB = grad_buf(b.node()).data();
                const double* A = a.data().data();
                for (std::size_t i = 0; i < m; ++i) {
                    const double* arow = A + i * k;
                    const double* grow = G + i * n;
                    for (std::size_t p = 0; p < k; ++p) {
                        double aip = arow[p];
                        double* gbrow = GB + p * n;
                        for (std::size_t j = 0; j < n; ++j) gbrow[j] += aip * grow[j];
                    }
                }
            }
        });
}

Tensor transpose(const Tensor& a) {
    require_rank2("transpose", a);
    std::size_t r = a.extent(0), c = a.extent(1);
    std::vector<double> out(r * c);
    const auto& av = a.data();
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) out[j * r + i] = av[i * c + j];
    return Tensor::make_interior({c, r}, std::move(out), {a}, [a, r, c](const Node& self) {
        if (!wants_grad(a.node())) return;
        auto& ga = grad_buf(a.node());
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) ga[i * c + j] += self.grad[j * r + i];
    });
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
    if (parts.empty()) throw ShapeError("concat-along-axis: no inputs");
    if (axis > 1) throw ShapeError("concat-along-axis: axis must be 0 or 1");
    for (const auto& p : parts) require_rank2("concat-along-axis", p);
    std::size_t fixed = axis == 0 ? parts[0].extent(1) : parts[0].extent(0);
    std::size_t total = 0;
    for (const auto& p : parts) {
        if ((axis == 0 ? p.extent(1) : p.extent(0)) != fixed)
            shape_fail("concat-along-axis", parts[0], p);
        total += p.extent(axis);
    }
    std::size_t rows = axis == 0 ? total : fixed;
    std::size_t cols = axis == 0 ? fixed : total;
    std::vector<double> out(rows * cols);
    std::size_t off = 0;
    for (const auto& p : parts) {
        const auto& pv = p.data();
        std::size_t pr = p.extent(0), pc = p.extent(1);
        if (axis == 0) {
            std::copy(pv.begin(), pv.end(), out.begin() + off * cols);
            off += pr;
        } else {
            for (std::size_t i = 0; i < pr; ++i)
                std::copy(pv.begin() + i * pc, pv.begin() + (i + 1) * pc,
                          out.begin() + i * cols + off);
            off += pc;
        }
    }
    return Tensor::make_interior(
        {rows, cols}, std::move(out), parts, [parts, axis, cols](const Node& self) {
            std::size_t off = 0;
            for (const auto& p : parts) {
                std::size_t pr = p.extent(0), pc = p.extent(1);
                if (wants_grad(p.node())) {
                    auto& gp = grad_buf(p.node());
                    if (axis == 0) {
                        for (std::size_t i = 0; i < pr * pc; ++i)
                            gp[i] += self.grad[off * cols + i];
                    } else {
                        for (std::size_t i = 0; i < pr; ++i)
                            for (std::size_t j = 0; j < pc; ++j)
                                gp[i * pc + j] += self.grad[i * cols + off + j];
                    }
                }
                off += axis == 0 ? pr : pc;
            }
        });
}

Tensor slice(const Tensor& a, std::size_t axis, std::size_t start, std::size_t end) {
    if (a.rank() == 1 && axis != 0)
        throw ShapeError("slice: rank-1 tensors slice along axis 0 only");
    if (a.rank() > 2 || axis > 1) throw ShapeError("slice: axis must be 0 or 1 on rank <= 2");
    std::size_t extent = a.rank() == 1 ? a.extent(0) : a.extent(axis);
    if (start >= end || end > extent)
        throw ShapeError("slice: range [" + std::to_string(start) + "," + std::to_string(end) +
                         ") out of bounds for " + shape_str(a.shape()));
    if (a.rank() == 1) {
        std::vector<double> out(a.data().begin() + start, a.data().begin() + end);
        return Tensor::make_interior({end - start}, std::move(out), {a},
                                     [a, start](const Node& self) {
                                         if (!wants_grad(a.node())) return;
                                         auto& ga = grad_buf(a.node());
                                         for (std::size_t i = 0; i < self.numel(); ++i)
                                             ga[start + i] += self.grad[i];
                                     });
    }
    std::size_t rows = a.extent(0), cols = a.extent(1);
    std::size_t or_ = axis == 0 ? end - start : rows;
    std::size_t oc = axis == 0 ? cols : end - start;
    std::vector<double> out(or_ * oc);
    const auto& av = a.data();
    for (std::size_t i = 0; i < or_; ++i)
        for (std::size_t j = 0; j < oc; ++j)
            out[i * oc + j] = axis == 0 ? av[(start + i) * cols + j] : av[i * cols + start + j];
    return Tensor::make_interior(
        {or_, oc}, std::move(out), {a}, [a, axis, start, cols, or_, oc](const Node& self) {
            if (!wants_grad(a.node())) return;
            auto& ga = grad_buf(a.node());
            for (std::size_t i = 0; i < or_; ++i)
                for (std::size_t j = 0; j < oc; ++j) {
                    std::size_t src = axis == 0 ? (start + i) * cols + j : i * cols + start + j;
                    ga[src] += self.grad[i * oc + j];
                }
        });
}

Tensor softmax(const Tensor& a, std::size_t axis) {
    require_rank2("softmax-along-axis", a);
    if (axis > 1) throw ShapeError("softmax-along-axis: axis must be 0 or 1");
    std::size_t rows = a.extent(0), cols = a.extent(1);
    std::size_t groups = axis == 1 ? rows : cols;
    std::size_t len = axis == 1 ? cols : rows;
    auto at = [axis, cols](std::size_t g, std::size_t i) {
        return axis == 1 ? g * cols + i : i * cols + g;
    };
    std::vector<double> out(a.numel());
    const auto& av = a.data();
    for (std::size_t g = 0; g < groups; ++g) {
        double mx = -HUGE_VAL;
        for (std::size_t i = 0; i < len; ++i) mx = std::max(mx, av[at(g, i)]);
        double denom = 0.0;
        for (std::size_t i = 0; i < len; ++i) denom += std::exp(av[at(g, i)] - mx);
        for (std::size_t i = 0; i < len; ++i) out[at(g, i)] = std::exp(av[at(g, i)] - mx) / denom;
    }
    return Tensor::make_interior(
        {rows, cols}, std::move(out), {a}, [a, groups, len, at](const Node& self) {
            if (!wants_grad(a.node())) return;
            auto& ga = grad_buf(a.node());
            // dx = s * (g - <g, s>) per group
            for (std::size_t g = 0; g < groups; ++g) {
                double dot = 0.0;
                for (std::size_t i = 0; i < len; ++i) {
                    std::size_t k = at(g, i);
                    dot += self.grad[k] * self.value[k];
                }
                for (std::size_t i = 0; i < len; ++i) {
                    std::size_t k = at(g, i);
                    ga[k] += self.value[k] * (self.grad[k] - dot);
                }
            }
        });
}

Tensor layer_norm(const Tensor& a) {
    require_rank2("layer-norm", a);
    constexpr double eps = 1e-5;
    std::size_t rows = a.extent(0), cols = a.extent(1);
    std::vector<double> out(a.numel());
    std::vector<double> inv_sigma(rows);
    const auto& av = a.data();
    for (std::size_t i = 0; i < rows; ++i) {
        const double* x = av.data() + i * cols;
        double mu = 0.0;
        for (std::size_t j = 0; j < cols; ++j) mu += x[j];
        mu /= static_cast<double>(cols);
        double var = 0.0;
        for (std::size_t j = 0; j < cols; ++j) var += (x[j] - mu) * (x[j] - mu);
        var /= static_cast<double>(cols);
        double is = 1.0 / std::sqrt(var + eps);
        inv_sigma[i] = is;
        for (std::size_t j = 0; j < cols; ++j) out[i * cols + j] = (x[j] - mu) * is;
    }
    return Tensor::make_interior(
        {rows, cols}, std::move(out), {a},
        [a, rows, cols, inv_sigma](const Node& self) {
            if (!wants_grad(a.node())) return;
            auto& ga = grad_buf(a.node());
            // dx = (1/sigma) * (g - mean(g) - y * mean(g * y)) per row
            for (std::size_t i = 0; i < rows; ++i) {
                const double* g = self.grad.data() + i * cols;
                const double* y = self.value.data() + i * cols;
                double gm = 0.0, gym = 0.0;
                for (std::size_t j = 0; j < cols; ++j) {
                    gm += g[j];
                    gym += g[j] * y[j];
                }
                gm /= static_cast<double>(cols);
                gym /= static_cast<double>(cols);
                for (std::size_t j = 0; j < cols; ++j)
                    ga[i * cols + j] += inv_sigma[i] * (g[j] - gm - y[j] * gym);
            }
        });
}

Tensor gelu(const Tensor& a) {
    const double inv_sqrt2 = 1.0 / std::sqrt(2.0);
    const double inv_sqrt2pi = 1.0 / std::sqrt(2.0 * M_PI);
    std::vector<double> out(a.numel());
    const auto& av = a.data();
    for (std::size_t i = 0; i < out.size(); ++i)
        out[i] = 0.5 * av[i] * (1.0 + std::erf(av[i] * inv_sqrt2));
    return Tensor::make_interior(
        a.shape(), std::move(out), {a}, [a, inv_sqrt2, inv_sqrt2pi](const Node& self) {
            if (!wants_grad(a.node())) return;
            auto& ga = grad_buf(a.node());
            const auto& av = a.data();
            for (std::size_t i = 0; i < self.numel(); ++i) {
                double x = av[i];
                double cdf = 0.5 * (1.0 + std::erf(x * inv_sqrt2));
                double pdf = inv_sqrt2pi * std::exp(-0.5 * x * x);
                ga[i] += self.grad[i] * (cdf + x * pdf);
            }
        });
}

Tensor embedding_lookup(const Tensor& table, const std::vector<int>& ids) {
    require_rank2("embedding-lookup", table);
    std::size_t vocab = table.extent(0), dim = table.extent(1);
    if (ids.empty()) throw ShapeError("embedding-lookup: empty id list");
    for (int id : ids)
        if (id < 0 || static_cast<std::size_t>(id) >= vocab)
            throw ShapeError("embedding-lookup: id " + std::to_string(id) +
                             " outside vocabulary of size " + std::to_string(vocab));
    std::vector<double> out(ids.size() * dim);
    const auto& tv = table.data();
    for (std::size_t i = 0; i < ids.size(); ++i)
        std::copy(tv.begin() + ids[i] * dim, tv.begin() + (ids[i] + 1) * dim,
                  out.begin() + i * dim);
    return Tensor::make_interior(
        {ids.size(), dim}, std::move(out), {table}, [table, ids, dim](const Node& self) {
            if (!wants_grad(table.node())) return;
            auto& gt = grad_buf(table.node());
            for (std::size_t i = 0; i < ids.size(); ++i)
                for (std::size_t j = 0; j < dim; ++j)
                    gt[ids[i] * dim + j] += self.grad[i * dim + j];
        });
}

Tensor mean(const Tensor& a, std::size_t axis) {
    require_rank2("mean-along-axis", a);
    if (axis > 1) throw ShapeError("mean-along-axis: axis must be 0 or 1");
    std::size_t rows = a.extent(0), cols = a.extent(1);
    std::size_t out_len = axis == 0 ? cols : rows;
    std::size_t red_len = axis == 0 ? rows : cols;
    std::vector<double> out(out_len, 0.0);
    const auto& av = a.data();
    for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < cols; ++j) out[axis == 0 ? j : i] += av[i * cols + j];
    for (auto& v : out) v /= static_cast<double>(red_len);
    return Tensor::make_interior(
        {out_len}, std::move(out), {a}, [a, rows, cols, axis, red_len](const Node& self) {
            if (!wants_grad(a.node())) return;
            auto& ga = grad_buf(a.node());
            double inv = 1.0 / static_cast<double>(red_len);
            for (std::size_t i = 0; i < rows; ++i)
                for (std::size_t j = 0; j < cols; ++j)
                    ga[i * cols + j] += self.grad[axis == 0 ? j : i] * inv;
        });
}

Tensor l2_normalize_rows(const Tensor& a) {
    require_rank2("l2-normalize-rows", a);
    constexpr double degenerate = 1e-9;
    std::size_t rows = a.extent(0), cols = a.extent(1);
    std::vector<double> out(a.numel());
    std::vector<double> norms(rows);
    const auto& av = a.data();
    for (std::size_t i = 0; i < rows; ++i) {
        double ss = 0.0;
        for (std::size_t j = 0; j < cols; ++j) ss += av[i * cols + j] * av[i * cols + j];
        double norm = std::sqrt(ss);
        norms[i] = norm;
        double inv = norm > degenerate ? 1.0 / norm : 0.0;  // degenerate rows map to zero
        for (std::size_t j = 0; j < cols; ++j) out[i * cols + j] = av[i * cols + j] * inv;
    }
    return Tensor::make_interior(
        {rows, cols}, std::move(out), {a}, [a, rows, cols, norms](const Node& self) {
            if (!wants_grad(a.node())) return;
            auto& ga = grad_buf(a.node());
            for (std::size_t i = 0; i < rows; ++i) {
                if (norms[i] <= 1e-9) continue;  // zero subgradient at the degenerate point
                const double* g = self.grad.data() + i * cols;
                const double* y = self.value.data() + i * cols;
                double dot = 0.0;
                for (std::size_t j = 0; j < cols; ++j) dot += g[j] * y[j];
                for (std::size_t j = 0; j < cols; ++j)
                    ga[i * cols + j] += (g[j] - y[j] * dot) / norms[i];
            }
        });
}

Tensor vlog(const Tensor& a) {
    std::vector<double> out(a.numel());
    const auto& av = a.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::log(av[i]);
    return Tensor::make_interior(a.shape(), std::move(out), {a}, [a](const Node& self) {
        if (!wants_grad(a.node())) return;
        auto& ga = grad_buf(a.node());
        const auto& av = a.data();
        for (std::size_t i = 0; i < self.numel(); ++i) ga[i] += self.grad[i] / av[i];
    });
}

Tensor vexp(const Tensor& a) {
    std::vector<double> out(a.numel());
    const auto& av = a.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::exp(av[i]);
    return Tensor::make_interior(a.shape(), std::move(out), {a}, [a](const Node& self) {
        if (!wants_grad(a.node())) return;
        auto& ga = grad_buf(a.node());
        for (std::size_t i = 0; i < self.numel(); ++i) ga[i] += self.grad[i] * self.value[i];
    });
}

Tensor negate(const Tensor& a) { return scalar_mul(a, -1.0); }

Tensor sum(const Tensor& a) {
    double acc = 0.0;
    for (double v : a.data()) acc += v;
    return Tensor::make_interior({1}, {acc}, {a}, [a](const Node& self) {
        if (!wants_grad(a.node())) return;
        auto& ga = grad_buf(a.node());
        for (auto& g : ga) g += self.grad[0];
    });
}

const std::vector<std::string>& primitive_catalog() {
    static const std::vector<std::string> catalog = {
        "add", "sub", "elementwise-mul", "scalar-mul", "matmul", "transpose",
        "concat-along-axis", "slice", "softmax-along-axis", "layer-norm", "gelu",
        "embedding-lookup", "mean-along-axis", "l2-normalize-rows", "log", "exp",
        "negate", "sum"};
    return catalog;
}

Tensor apply_primitive(std::string_view op_id, const std::vector<Tensor>& inputs,
                       const OpAttrs& attrs) {
    auto arity = [&](std::size_t n) {
        if (inputs.size() != n)
            throw ShapeError(std::string(op_id) + ": expected " + std::to_string(n) +
                             " inputs, got " + std::to_string(inputs.size()));
    };
    auto need_axis = [&]() -> std::size_t {
        if (!attrs.axis) throw ShapeError(std::string(op_id) + ": missing axis attribute");
        return *attrs.axis;
    };
    if (op_id == "add") { arity(2); return add(inputs[0], inputs[1]); }
    if (op_id == "sub") { arity(2); return sub(inputs[0], inputs[1]); }
    if (op_id == "elementwise-mul") { arity(2); return mul(inputs[0], inputs[1]); }
    if (op_id == "scalar-mul") {
        arity(1);
        if (!attrs.scalar) throw ShapeError("scalar-mul: missing scalar attribute");
        return scalar_mul(inputs[0], *attrs.scalar);
    }
    if (op_id == "matmul") { arity(2); return matmul(inputs[0], inputs[1]); }
    if (op_id == "transpose") { arity(1); return transpose(inputs[0]); }
    if (op_id == "concat-along-axis") return concat(inputs, need_axis());
    if (op_id == "slice") {
        arity(1);
        if (!attrs.start || !attrs.end) throw ShapeError("slice: missing start/end attributes");
        return slice(inputs[0], need_axis(), *attrs.start, *attrs.end);
    }
    if (op_id == "softmax-along-axis") { arity(1); return softmax(inputs[0], need_axis()); }
    if (op_id == "layer-norm") { arity(1); return layer_norm(inputs[0]); }
    if (op_id == "gelu") { arity(1); return gelu(inputs[0]); }
    if (op_id == "embedding-lookup") { arity(1); return embedding_lookup(inputs[0], attrs.ids); }
    if (op_id == "mean-along-axis") { arity(1); return mean(inputs[0], need_axis()); }
    if (op_id == "l2-normalize-rows") { arity(1); return l2_normalize_rows(inputs[0]); }
    if (op_id == "log") { arity(1); return vlog(inputs[0]); }
    if (op_id == "exp") { arity(1); return vexp(inputs[0]); }
    if (op_id == "negate") { arity(1); return negate(inputs[0]); }
    if (op_id == "sum") { arity(1); return sum(inputs[0]); }
    throw ShapeError("unknown primitive '" + std::string(op_id) + "'");
}

Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f,
                        const Tensor& theta, double eps) {
    if (eps <= 0.0) throw NumericError("finite_diff_grad: eps must be positive");
    Tensor probe = theta.detach_copy();
    std::vector<double> grad(theta.numel());
    for (std::size_t i = 0; i < theta.numel(); ++i) {
        double orig = probe.data()[i];
        probe.mutable_data()[i] = orig + eps;
        double hi = f(probe);
        probe.mutable_data()[i] = orig - eps;
        double lo = f(probe);
        probe.mutable_data()[i] = orig;
        grad[i] = (hi - lo) / (2.0 * eps);
    }
    return Tensor::from_data(theta.shape(), std::move(grad));
}

}  // namespace bifrec
