#pragma once

// Minimal dense-tensor engine with reverse-mode automatic differentiation.
// Tensors are immutable values once created; gradients are produced by
// backward() as a map from node id to gradient buffer. Double precision
// throughout, no implicit broadcasting (bias addition is an explicit op).

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "cma/error.hpp"

namespace cma {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& s) {
    std::size_t n = 1;
    for (std::size_t e : s) n *= e;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << "]";
    return os.str();
}

namespace detail {

struct Node;
using NodePtr = std::shared_ptr<Node>;

struct Node {
    Shape shape;
    std::vector<double> values;
    std::vector<double> grad;  // sized lazily during backward
    std::uint64_t id = 0;
    bool requires_grad = false;
    std::vector<NodePtr> parents;
    // Scatters this node's grad into its parents' grad buffers.
    std::function<void(Node&)> backprop;
};

inline std::uint64_t next_node_id() {
    static std::atomic<std::uint64_t> counter{1};
    return counter.fetch_add(1);
}

inline bool& grad_mode() {
    thread_local bool enabled = true;
    return enabled;
}

inline void ensure_grad(Node& n) {
    if (n.grad.size() != n.values.size()) n.grad.assign(n.values.size(), 0.0);
}

}  // namespace detail

// Scoped guard disabling tape recording (evaluation-only forward passes).
class NoGradGuard {
  public:
    NoGradGuard() : prev_(detail::grad_mode()) { detail::grad_mode() = false; }
    ~NoGradGuard() { detail::grad_mode() = prev_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

  private:
    bool prev_;
};

class Tensor {
  public:
    Tensor() = default;

    static Tensor zeros(Shape shape) { return filled(std::move(shape), 0.0); }

    static Tensor filled(Shape shape, double v) {
        auto n = std::make_shared<detail::Node>();
        n->values.assign(numel(shape), v);
        n->shape = std::move(shape);
        n->id = detail::next_node_id();
        return Tensor(std::move(n));
    }

    static Tensor from(Shape shape, std::vector<double> values) {
        if (numel(shape) != values.size())
            throw DimensionError("tensor: " + shape_str(shape) + " does not hold " +
                                 std::to_string(values.size()) + " values");
        auto n = std::make_shared<detail::Node>();
        n->shape = std::move(shape);
        n->values = std::move(values);
        n->id = detail::next_node_id();
        return Tensor(std::move(n));
    }

    static Tensor scalar(double v) { return from({1}, {v}); }

    // Leaf tensor participating in gradient computation.
    static Tensor param(Shape shape, std::vector<double> values) {
        Tensor t = from(std::move(shape), std::move(values));
        t.node_->requires_grad = true;
        return t;
    }

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    const std::vector<double>& values() const { return node_->values; }
    std::vector<double>& mutable_values() { return node_->values; }
    std::uint64_t id() const { return node_->id; }
    bool requires_grad() const { return node_ && node_->requires_grad; }
    std::size_t size() const { return node_->values.size(); }

    double item() const {
        if (size() != 1) throw ContractError("item(): tensor has " + std::to_string(size()) + " values");
        return node_->values[0];
    }

    double at(std::size_t i) const { return node_->values[i]; }
    double at(std::size_t r, std::size_t c) const {
        return node_->values[r * node_->shape[1] + c];
    }

    std::size_t rows() const { return node_->shape[0]; }
    std::size_t cols() const { return node_->shape.size() > 1 ? node_->shape[1] : 1; }

    detail::NodePtr node() const { return node_; }

    explicit Tensor(detail::NodePtr n) : node_(std::move(n)) {}

  private:
    detail::NodePtr node_;
};

using GradMap = std::unordered_map<std::uint64_t, std::vector<double>>;

namespace detail {

inline Tensor make_result(Shape shape, std::vector<double> values,
                          std::vector<NodePtr> parents,
                          std::function<void(Node&)> backprop) {
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->values = std::move(values);
    n->id = next_node_id();
    bool any_grad = false;
    for (const auto& p : parents)
        if (p->requires_grad) any_grad = true;
    if (grad_mode() && any_grad) {
        n->requires_grad = true;
        n->parents = std::move(parents);
        n->backprop = std::move(backprop);
    }
    return Tensor(std::move(n));
}

inline void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape())
        throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                             " vs " + shape_str(b.shape()));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise operations

inline Tensor add(const Tensor& a, const Tensor& b) {
    detail::check_same_shape(a, b, "add");
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) + b.at(i);
    auto pa = a.node(), pb = b.node();
    return detail::make_result(a.shape(), std::move(out), {pa, pb}, [pa, pb](detail::Node& n) {
        if (pa->requires_grad) {
            detail::ensure_grad(*pa);
            for (std::size_t i = 0; i < n.grad.size(); ++i) pa->grad[i] += n.grad[i];
        }
        if (pb->requires_grad) {
            detail::ensure_grad(*pb);
            for (std::size_t i = 0; i < n.grad.size(); ++i) pb->grad[i] += n.grad[i];
        }
    });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    detail::check_same_shape(a, b, "sub");
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) - b.at(i);
    auto pa = a.node(), pb = b.node();
    return detail::make_result(a.shape(), std::move(out), {pa, pb}, [pa, pb](detail::Node& n) {
        if (pa->requires_grad) {
            detail::ensure_grad(*pa);
            for (std::size_t i = 0; i < n.grad.size(); ++i) pa->grad[i] += n.grad[i];
        }
        if (pb->requires_grad) {
            detail::ensure_grad(*pb);
            for (std::size_t i = 0; i < n.grad.size(); ++i) pb->grad[i] -= n.grad[i];
        }
    });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    detail::check_same_shape(a, b, "mul");
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) * b.at(i);
    auto pa = a.node(), pb = b.node();
    return detail::make_result(a.shape(), std::move(out), {pa, pb}, [pa, pb](detail::Node& n) {
        if (pa->requires_grad) {
            detail::ensure_grad(*pa);
            for (std::size_t i = 0; i < n.grad.size(); ++i) pa->grad[i] += n.grad[i] * pb->values[i];
        }
        if (pb->requires_grad) {
            detail::ensure_grad(*pb);
            for (std::size_t i = 0; i < n.grad.size(); ++i) pb->grad[i] += n.grad[i] * pa->values[i];
        }
    });
}

inline Tensor scale(const Tensor& a, double s) {
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) * s;
    auto pa = a.node();
    return detail::make_result(a.shape(), std::move(out), {pa}, [pa, s](detail::Node& n) {
        detail::ensure_grad(*pa);
        for (std::size_t i = 0; i < n.grad.size(); ++i) pa->grad[i] += n.grad[i] * s;
    });
}

inline Tensor relu(const Tensor& a) {
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) > 0.0 ? a.at(i) : 0.0;
    auto pa = a.node();
    return detail::make_result(a.shape(), std::move(out), {pa}, [pa](detail::Node& n) {
        detail::ensure_grad(*pa);
        for (std::size_t i = 0; i < n.grad.size(); ++i)
            if (pa->values[i] > 0.0) pa->grad[i] += n.grad[i];
    });
}

inline Tensor sigmoid(const Tensor& a) {
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = 1.0 / (1.0 + std::exp(-a.at(i)));
    auto pa = a.node();
    auto saved = out;
    return detail::make_result(a.shape(), std::move(out), {pa},
                               [pa, saved = std::move(saved)](detail::Node& n) {
                                   detail::ensure_grad(*pa);
                                   for (std::size_t i = 0; i < n.grad.size(); ++i)
                                       pa->grad[i] += n.grad[i] * saved[i] * (1.0 - saved[i]);
                               });
}

inline Tensor tanh_op(const Tensor& a) {
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(a.at(i));
    auto pa = a.node();
    auto saved = out;
    return detail::make_result(a.shape(), std::move(out), {pa},
                               [pa, saved = std::move(saved)](detail::Node& n) {
                                   detail::ensure_grad(*pa);
                                   for (std::size_t i = 0; i < n.grad.size(); ++i)
                                       pa->grad[i] += n.grad[i] * (1.0 - saved[i] * saved[i]);
                               });
}

inline Tensor log_op(const Tensor& a) {
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        if (a.at(i) <= 0.0)
            throw DomainError("log: non-positive value " + std::to_string(a.at(i)) +
                              " at index " + std::to_string(i));
        out[i] = std::log(a.at(i));
    }
    auto pa = a.node();
    return detail::make_result(a.shape(), std::move(out), {pa}, [pa](detail::Node& n) {
        detail::ensure_grad(*pa);
        for (std::size_t i = 0; i < n.grad.size(); ++i) pa->grad[i] += n.grad[i] / pa->values[i];
    });
}

// ---------------------------------------------------------------------------
// Linear algebra

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.shape().size() != 2 || b.shape().size() != 2)
        throw DimensionError("matmul: rank-2 operands required, got " + shape_str(a.shape()) +
                             " and " + shape_str(b.shape()));
    const std::size_t r = a.shape()[0], k = a.shape()[1], c = b.shape()[1];
    if (b.shape()[0] != k)
        throw DimensionError("matmul: inner extents differ, " + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
    std::vector<double> out(r * c, 0.0);
    const auto& av = a.values();
    const auto& bv = b.values();
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t p = 0; p < k; ++p) {
            const double aip = av[i * k + p];
            if (aip == 0.0) continue;
            const double* brow = bv.data() + p * c;
            double* orow = out.data() + i * c;
            for (std::size_t j = 0; j < c; ++j) orow[j] += aip * brow[j];
        }
    auto pa = a.node(), pb = b.node();
    return detail::make_result({r, c}, std::move(out), {pa, pb}, [pa, pb, r, k, c](detail::Node& n) {
        if (pa->requires_grad) {
            detail::ensure_grad(*pa);
            // dA = G B^T
            for (std::size_t i = 0; i < r; ++i)
                for (std::size_t p = 0; p < k; ++p) {
                    double acc = 0.0;
                    const double* grow = n.grad.data() + i * c;
                    const double* brow = pb->values.data() + p * c;
                    for (std::size_t j = 0; j < c; ++j) acc += grow[j] * brow[j];
                    pa->grad[i * k + p] += acc;
                }
        }
        if (pb->requires_grad) {
            detail::ensure_grad(*pb);
            // dB = A^T G
            for (std::size_t i = 0; i < r; ++i) {
                const double* grow = n.grad.data() + i * c;
                for (std::size_t p = 0; p < k; ++p) {
                    const double aip = pa->values[i * k + p];
                    if (aip == 0.0) continue;
                    double* brow = pb->grad.data() + p * c;
                    for (std::size_t j = 0; j < c; ++j) brow[j] += aip * grow[j];
                }
            }
        }
    });
}

inline Tensor transpose(const Tensor& a) {
    if (a.shape().size() != 2)
        throw DimensionError("transpose: rank-2 required, got " + shape_str(a.shape()));
    const std::size_t r = a.shape()[0], c = a.shape()[1];
    std::vector<double> out(r * c);
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) out[j * r + i] = a.at(i, j);
    auto pa = a.node();
    return detail::make_result({c, r}, std::move(out), {pa}, [pa, r, c](detail::Node& n) {
        detail::ensure_grad(*pa);
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) pa->grad[i * c + j] += n.grad[j * r + i];
    });
}

// Adds a bias row to every row of a rank-2 tensor (explicit broadcast).
inline Tensor add_bias(const Tensor& x, const Tensor& b) {
    if (x.shape().size() != 2)
        throw DimensionError("add_bias: rank-2 input required, got " + shape_str(x.shape()));
    const std::size_t r = x.shape()[0], c = x.shape()[1];
    if (b.size() != c)
        throw DimensionError("add_bias: bias " + shape_str(b.shape()) + " does not match columns of " +
                             shape_str(x.shape()));
    std::vector<double> out(x.values());
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) out[i * c + j] += b.at(j);
    auto px = x.node(), pb = b.node();
    return detail::make_result(x.shape(), std::move(out), {px, pb}, [px, pb, r, c](detail::Node& n) {
        if (px->requires_grad) {
            detail::ensure_grad(*px);
            for (std::size_t i = 0; i < n.grad.size(); ++i) px->grad[i] += n.grad[i];
        }
        if (pb->requires_grad) {
            detail::ensure_grad(*pb);
            for (std::size_t i = 0; i < r; ++i)
                for (std::size_t j = 0; j < c; ++j) pb->grad[j] += n.grad[i * c + j];
        }
    });
}

// ---------------------------------------------------------------------------
// Shape manipulation

inline Tensor reshape(const Tensor& a, Shape shape) {
    if (numel(shape) != a.size())
        throw DimensionError("reshape: " + shape_str(a.shape()) + " -> " + shape_str(shape) +
                             " changes element count");
    auto pa = a.node();
    return detail::make_result(std::move(shape), a.values(), {pa}, [pa](detail::Node& n) {
        detail::ensure_grad(*pa);
        for (std::size_t i = 0; i < n.grad.size(); ++i) pa->grad[i] += n.grad[i];
    });
}

// Concatenation along the last axis; all other extents must agree.
inline Tensor concat_last(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw EmptyInputError("concat_last: no parts");
    const Shape& s0 = parts[0].shape();
    const std::size_t rank = s0.size();
    std::size_t total_last = 0;
    for (const auto& p : parts) {
        if (p.shape().size() != rank)
            throw DimensionError("concat_last: rank mismatch " + shape_str(s0) + " vs " +
                                 shape_str(p.shape()));
        for (std::size_t d = 0; d + 1 < rank; ++d)
            if (p.shape()[d] != s0[d])
                throw DimensionError("concat_last: leading extents differ, " + shape_str(s0) +
                                     " vs " + shape_str(p.shape()));
        total_last += p.shape()[rank - 1];
    }
    std::size_t lead = 1;
    for (std::size_t d = 0; d + 1 < rank; ++d) lead *= s0[d];
    Shape out_shape = s0;
    out_shape[rank - 1] = total_last;
    std::vector<double> out(lead * total_last);
    std::vector<std::size_t> widths;
    std::vector<detail::NodePtr> parents;
    for (const auto& p : parts) {
        widths.push_back(p.shape()[rank - 1]);
        parents.push_back(p.node());
    }
    std::size_t offset = 0;
    for (std::size_t pi = 0; pi < parts.size(); ++pi) {
        const auto& v = parts[pi].values();
        const std::size_t w = widths[pi];
        for (std::size_t i = 0; i < lead; ++i)
            std::copy(v.begin() + i * w, v.begin() + (i + 1) * w,
                      out.begin() + i * total_last + offset);
        offset += w;
    }
    auto parents_copy = parents;
    return detail::make_result(std::move(out_shape), std::move(out), std::move(parents),
                               [ps = std::move(parents_copy), widths, lead, total_last](detail::Node& n) {
                                   std::size_t off = 0;
                                   for (std::size_t pi = 0; pi < ps.size(); ++pi) {
                                       const std::size_t w = widths[pi];
                                       if (ps[pi]->requires_grad) {
                                           detail::ensure_grad(*ps[pi]);
                                           for (std::size_t i = 0; i < lead; ++i)
                                               for (std::size_t j = 0; j < w; ++j)
                                                   ps[pi]->grad[i * w + j] +=
                                                       n.grad[i * total_last + off + j];
                                       }
                                       off += w;
                                   }
                               });
}

inline Tensor concat_last(const Tensor& a, const Tensor& b) { return concat_last(std::vector<Tensor>{a, b}); }
inline Tensor concat_last(const Tensor& a, const Tensor& b, const Tensor& c) {
    return concat_last(std::vector<Tensor>{a, b, c});
}

// ---------------------------------------------------------------------------
// Reductions, softmax, gathers

inline Tensor mean_rows(const Tensor& x) {
    if (x.shape().size() != 2)
        throw DimensionError("mean_rows: rank-2 required, got " + shape_str(x.shape()));
    const std::size_t n = x.shape()[0], d = x.shape()[1];
    if (n == 0) throw EmptyInputError("mean_rows: zero rows");
    std::vector<double> out(d, 0.0);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j) out[j] += x.at(i, j);
    for (std::size_t j = 0; j < d; ++j) out[j] /= static_cast<double>(n);
    auto px = x.node();
    return detail::make_result({d}, std::move(out), {px}, [px, n, d](detail::Node& nd) {
        detail::ensure_grad(*px);
        const double inv = 1.0 / static_cast<double>(n);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < d; ++j) px->grad[i * d + j] += nd.grad[j] * inv;
    });
}

inline Tensor sum_all(const Tensor& x) {
    double s = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) s += x.at(i);
    auto px = x.node();
    return detail::make_result({1}, {s}, {px}, [px](detail::Node& n) {
        detail::ensure_grad(*px);
        for (std::size_t i = 0; i < px->grad.size(); ++i) px->grad[i] += n.grad[0];
    });
}

// Numerically stabilized softmax along the given axis (rank 1 or 2).
inline Tensor softmax(const Tensor& x, std::size_t axis) {
    const std::size_t rank = x.shape().size();
    if (rank == 0 || rank > 2 || axis >= rank)
        throw DimensionError("softmax: axis " + std::to_string(axis) + " invalid for " +
                             shape_str(x.shape()));
    std::size_t slices, len, slice_stride, elem_stride;
    if (rank == 1) {
        slices = 1;
        len = x.shape()[0];
        slice_stride = 0;
        elem_stride = 1;
    } else if (axis == 1) {
        slices = x.shape()[0];
        len = x.shape()[1];
        slice_stride = len;
        elem_stride = 1;
    } else {
        slices = x.shape()[1];
        len = x.shape()[0];
        slice_stride = 1;
        elem_stride = x.shape()[1];
    }
    if (len == 0) throw DimensionError("softmax: empty axis in " + shape_str(x.shape()));
    std::vector<double> out(x.size());
    for (std::size_t s = 0; s < slices; ++s) {
        const std::size_t base = s * slice_stride;
        double mx = -1e300;
        for (std::size_t i = 0; i < len; ++i) mx = std::max(mx, x.at(base + i * elem_stride));
        double denom = 0.0;
        for (std::size_t i = 0; i < len; ++i) {
            const double e = std::exp(x.at(base + i * elem_stride) - mx);
            out[base + i * elem_stride] = e;
            denom += e;
        }
        for (std::size_t i = 0; i < len; ++i) out[base + i * elem_stride] /= denom;
    }
    auto px = x.node();
    auto saved = out;
    return detail::make_result(
        x.shape(), std::move(out), {px},
        [px, saved = std::move(saved), slices, len, slice_stride, elem_stride](detail::Node& n) {
            detail::ensure_grad(*px);
            for (std::size_t s = 0; s < slices; ++s) {
                const std::size_t base = s * slice_stride;
                double dot = 0.0;
                for (std::size_t i = 0; i < len; ++i) {
                    const std::size_t idx = base + i * elem_stride;
                    dot += n.grad[idx] * saved[idx];
                }
                for (std::size_t i = 0; i < len; ++i) {
                    const std::size_t idx = base + i * elem_stride;
                    px->grad[idx] += saved[idx] * (n.grad[idx] - dot);
                }
            }
        });
}

// Gathers row i of a rank-2 tensor as a 1 x d row (embedding lookup).
inline Tensor row(const Tensor& x, std::size_t i) {
    if (x.shape().size() != 2)
        throw DimensionError("row: rank-2 required, got " + shape_str(x.shape()));
    const std::size_t n = x.shape()[0], d = x.shape()[1];
    if (i >= n) throw ContractError("row: index " + std::to_string(i) + " out of " + std::to_string(n));
    std::vector<double> out(x.values().begin() + i * d, x.values().begin() + (i + 1) * d);
    auto px = x.node();
    return detail::make_result({1, d}, std::move(out), {px}, [px, i, d](detail::Node& nd) {
        detail::ensure_grad(*px);
        for (std::size_t j = 0; j < d; ++j) px->grad[i * d + j] += nd.grad[j];
    });
}

// Gathers rows of a rank-2 tensor by index (embedding lookup for a token
// sequence). Gradient scatters back with accumulation on repeated indices.
inline Tensor gather_rows(const Tensor& x, const std::vector<int>& idx) {
    if (x.shape().size() != 2)
        throw DimensionError("gather_rows: rank-2 required, got " + shape_str(x.shape()));
    const std::size_t n = x.shape()[0], d = x.shape()[1];
    std::vector<double> out(idx.size() * d);
    for (std::size_t i = 0; i < idx.size(); ++i) {
        if (idx[i] < 0 || static_cast<std::size_t>(idx[i]) >= n)
            throw ContractError("gather_rows: index " + std::to_string(idx[i]) + " out of " +
                                std::to_string(n));
        std::copy(x.values().begin() + idx[i] * d, x.values().begin() + (idx[i] + 1) * d,
                  out.begin() + i * d);
    }
    auto px = x.node();
    return detail::make_result({idx.size(), d}, std::move(out), {px}, [px, idx, d](detail::Node& nd) {
        detail::ensure_grad(*px);
        for (std::size_t i = 0; i < idx.size(); ++i)
            for (std::size_t j = 0; j < d; ++j) px->grad[idx[i] * d + j] += nd.grad[i * d + j];
    });
}

// Picks a single element as a scalar tensor.
inline Tensor pick(const Tensor& x, std::size_t i) {
    if (i >= x.size()) throw ContractError("pick: index out of range");
    auto px = x.node();
    return detail::make_result({1}, {x.at(i)}, {px}, [px, i](detail::Node& n) {
        detail::ensure_grad(*px);
        px->grad[i] += n.grad[0];
    });
}

// ---------------------------------------------------------------------------
// Backward pass

// Reverse-mode sweep from a scalar loss. Returns gradients for every leaf
// tensor (no parents) with requires_grad, keyed by node id.
inline GradMap backward(const Tensor& loss) {
    if (loss.size() != 1) throw ContractError("backward: loss must be scalar, got " + shape_str(loss.shape()));
    if (!loss.requires_grad())
        throw ContractError("backward: loss does not depend on any tracked parameter");

    // Topological order over the tape.
    std::vector<detail::Node*> order;
    std::unordered_set<detail::Node*> visited;
    std::vector<std::pair<detail::Node*, std::size_t>> stack;
    stack.emplace_back(loss.node().get(), 0);
    visited.insert(loss.node().get());
    while (!stack.empty()) {
        auto& [node, idx] = stack.back();
        if (idx < node->parents.size()) {
            detail::Node* p = node->parents[idx++].get();
            if (p->requires_grad && visited.insert(p).second) stack.emplace_back(p, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    // order is now children-after-parents; walk it backwards.
    detail::ensure_grad(*loss.node());
    loss.node()->grad[0] = 1.0;
    GradMap grads;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        detail::Node* n = *it;
        detail::ensure_grad(*n);
        if (n->backprop) {
            n->backprop(*n);
        } else if (n->requires_grad) {
            grads[n->id] = n->grad;
        }
    }
    // Clear transient grad buffers so the next backward starts clean.
    for (detail::Node* n : order) n->grad.clear();
    return grads;
}

// ---------------------------------------------------------------------------
// Optimizer

inline void clip_gradients(GradMap& grads, double lo = -0.1, double hi = 0.1) {
    if (!(lo < hi)) throw ContractError("clip_gradients: lo must be < hi");
    for (auto& [id, g] : grads)
        for (double& v : g) v = std::clamp(v, lo, hi);
}

struct AdamState {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    std::uint64_t step = 0;
    std::unordered_map<std::uint64_t, std::vector<double>> m;
    std::unordered_map<std::uint64_t, std::vector<double>> v;
};

// Bias-corrected Adam update applied in place to the given parameters.
inline void adam_step(std::vector<Tensor>& params, const GradMap& grads, AdamState& state) {
    state.step += 1;
    const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
    for (auto& p : params) {
        auto& m = state.m[p.id()];
        auto& v = state.v[p.id()];
        if (m.size() != p.size()) m.assign(p.size(), 0.0);
        if (v.size() != p.size()) v.assign(p.size(), 0.0);
        auto git = grads.find(p.id());
        static const std::vector<double> kEmpty;
        const std::vector<double>* g = git != grads.end() ? &git->second : nullptr;
        if (g && g->size() != p.size())
            throw DimensionError("adam_step: gradient size " + std::to_string(g->size()) +
                                 " vs parameter size " + std::to_string(p.size()));
        auto& pv = p.mutable_values();
        for (std::size_t i = 0; i < pv.size(); ++i) {
            const double gi = g ? (*g)[i] : 0.0;
            m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * gi;
            v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * gi * gi;
            const double mhat = m[i] / bc1;
            const double vhat = v[i] / bc2;
            pv[i] -= state.lr * mhat / (std::sqrt(vhat) + state.eps);
        }
    }
}

}  // namespace cma
