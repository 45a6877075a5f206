#pragma once

// Dense float64 tensors with define-by-run reverse-mode differentiation.
//
// A Tensor is a shared handle to a graph node. Operations on tensors that
// require gradients record their inputs and a backward closure; backward()
// walks the recorded graph in reverse topological order and then releases it.
// Tensors that do not require gradients carry no graph at all, so inference
// pays nothing for autodiff.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numbers>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

namespace downscale {

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << ']';
    return os.str();
}

inline std::size_t numel_of(const Shape& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>{});
}

class ShapeError : public std::invalid_argument {
  public:
    using std::invalid_argument::invalid_argument;
};

class NumericError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

namespace detail {

struct Node;
using NodePtr = std::shared_ptr<Node>;
using BackwardFn = std::function<void(Node& self)>;

struct Node {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;  // empty until first accumulation
    bool requires_grad = false;
    bool released = false;
    const char* op = "leaf";
    std::vector<NodePtr> inputs;
    BackwardFn backward;

    std::vector<double>& grad_buffer() {
        if (grad.empty()) grad.assign(value.size(), 0.0);
        return grad;
    }
};

}  // namespace detail

class Tensor {
  public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        const std::size_t n = checked_numel(shape);
        return from(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
    }

    static Tensor full(Shape shape, double v, bool requires_grad = false) {
        const std::size_t n = checked_numel(shape);
        return from(std::move(shape), std::vector<double>(n, v), requires_grad);
    }

    static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false) {
        const std::size_t n = checked_numel(shape);
        if (values.size() != n)
            throw ShapeError("tensor data length " + std::to_string(values.size()) +
                             " does not match shape " + shape_str(shape));
        auto node = std::make_shared<detail::Node>();
        node->shape = std::move(shape);
        node->value = std::move(values);
        node->requires_grad = requires_grad;
        return Tensor(std::move(node));
    }

    static Tensor scalar(double v) { return from({1}, {v}); }

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node().shape; }
    std::size_t dim() const { return node().shape.size(); }
    std::size_t size(std::size_t axis) const { return node().shape.at(axis); }
    std::size_t numel() const { return node().value.size(); }

    std::span<const double> data() const { return node().value; }
    /// Writable view of the values. Only meaningful for leaves (parameters, inputs).
    std::span<double> mutable_data() { return node().value; }
    const std::vector<double>& values() const { return node().value; }

    double item() const {
        if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
        return node().value[0];
    }
    double operator[](std::size_t i) const { return node().value[i]; }

    bool requires_grad() const { return node().requires_grad; }
    void set_requires_grad(bool on) { node().requires_grad = on; }

    bool has_grad() const { return !node().grad.empty(); }
    /// Accumulated gradient; zeros if nothing has been accumulated yet.
    std::vector<double> grad() const {
        return has_grad() ? node().grad : std::vector<double>(numel(), 0.0);
    }
    std::span<const double> grad_view() const { return node().grad; }
    void zero_grad() { node().grad.clear(); }

    bool is_leaf() const { return node().inputs.empty() && !node().backward; }
    const char* op_name() const { return node().op; }

    /// Copy of the values with no graph attached.
    Tensor detach() const { return from(shape(), node().value, false); }

    detail::Node& node() const {
        if (!node_) throw std::logic_error("use of undefined tensor");
        return *node_;
    }
    const detail::NodePtr& node_ptr() const { return node_; }

    explicit Tensor(detail::NodePtr n) : node_(std::move(n)) {}

  private:
    static std::size_t checked_numel(const Shape& s) {
        if (s.empty()) throw ShapeError("tensor shape must have at least one dimension");
        for (auto d : s)
            if (d == 0) throw ShapeError("tensor shape " + shape_str(s) + " has a zero dimension");
        return numel_of(s);
    }

    detail::NodePtr node_;
};

/// Builds an op result. If no input requires a gradient the result is a plain
/// value and the backward closure is dropped. Exposed so that tests and
/// fixtures can register their own differentiable operations.
inline Tensor make_op(const char* op, Shape shape, std::vector<double> value,
                      std::vector<Tensor> inputs, detail::BackwardFn backward) {
    Tensor out = Tensor::from(std::move(shape), std::move(value));
    const bool needs = std::any_of(inputs.begin(), inputs.end(),
                                   [](const Tensor& t) { return t.requires_grad(); });
    auto& n = out.node();
    n.op = op;
    if (needs) {
        n.requires_grad = true;
        n.inputs.reserve(inputs.size());
        for (auto& t : inputs) n.inputs.push_back(t.node_ptr());
        n.backward = std::move(backward);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Graph traversal and backward

struct GraphRecord {
    std::size_t id;
    std::string op;
    std::vector<std::size_t> inputs;
};

/// Ordered record of the operations reachable from a root. Inputs always
/// precede the nodes that consume them.
struct Graph {
    std::vector<GraphRecord> nodes;
};

namespace detail {

inline std::vector<Node*> topo_order(Node* root) {
    std::vector<Node*> order;
    std::unordered_map<Node*, int> state;  // 1 = on stack, 2 = done
    std::vector<std::pair<Node*, std::size_t>> stack{{root, 0}};
    state[root] = 1;
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->inputs.size()) {
            Node* child = node->inputs[next++].get();
            if (!child->requires_grad || state.count(child)) continue;
            state[child] = 1;
            stack.emplace_back(child, 0);
        } else {
            state[node] = 2;
            order.push_back(node);
            stack.pop_back();
        }
    }
    return order;
}

}  // namespace detail

inline Graph trace(const Tensor& root) {
    Graph g;
    auto order = detail::topo_order(&root.node());
    std::unordered_map<detail::Node*, std::size_t> ids;
    for (auto* n : order) {
        GraphRecord r{ids.size(), n->op, {}};
        for (auto& in : n->inputs)
            if (auto it = ids.find(in.get()); it != ids.end()) r.inputs.push_back(it->second);
        ids[n] = r.id;
        g.nodes.push_back(std::move(r));
    }
    return g;
}

struct BackwardOptions {
    bool retain_graph = false;
};

/// Accumulates d(loss)/d(leaf) into every reachable leaf that requires grad.
inline void backward(const Tensor& loss, BackwardOptions opts = {}) {
    auto& root = loss.node();
    if (loss.numel() != 1)
        throw ShapeError("backward() needs a scalar loss, got shape " + shape_str(loss.shape()));
    if (root.released) throw std::logic_error("backward() through an already released graph");
    if (!root.requires_grad) return;

    auto order = detail::topo_order(&root);
    for (auto* n : order)
        if (n->released) throw std::logic_error("backward() reaches a node of a released graph");
    root.grad_buffer()[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        detail::Node* n = *it;
        if (n->backward && !n->grad.empty()) n->backward(*n);
    }
    if (!opts.retain_graph) {
        for (auto* n : order) {
            if (!n->backward) continue;  // leaf
            n->backward = nullptr;
            n->inputs.clear();
            n->grad.clear();
            n->released = true;
        }
    }
}

// ---------------------------------------------------------------------------
// Elementwise binary ops with trailing-dimension broadcasting

namespace detail {

// The smaller operand must match the trailing dimensions of the larger one,
// or be a single element.
inline Shape broadcast_shape(const char* op, const Shape& a, const Shape& b) {
    auto suffix_of = [](const Shape& small, const Shape& big) {
        if (small.size() > big.size()) return false;
        return std::equal(small.rbegin(), small.rend(), big.rbegin());
    };
    if (a == b) return a;
    if (numel_of(b) == 1 && a.size() >= b.size()) return a;
    if (numel_of(a) == 1 && b.size() >= a.size()) return b;
    if (suffix_of(b, a)) return a;
    if (suffix_of(a, b)) return b;
    throw ShapeError(std::string(op) + ": shapes " + shape_str(a) + " and " + shape_str(b) +
                     " are not broadcast-compatible");
}

template <typename F, typename Da, typename Db>
Tensor binary(const char* op, const Tensor& a, const Tensor& b, F f, Da dfa, Db dfb) {
    Shape out_shape = broadcast_shape(op, a.shape(), b.shape());
    const std::size_t n = numel_of(out_shape), na = a.numel(), nb = b.numel();
    const auto& av = a.values();
    const auto& bv = b.values();
    std::vector<double> out(n);
    if (na == n && nb == n) {
        for (std::size_t i = 0; i < n; ++i) out[i] = f(av[i], bv[i]);
    } else {
        for (std::size_t i = 0; i < n; ++i) out[i] = f(av[i % na], bv[i % nb]);
    }
    return make_op(op, std::move(out_shape), std::move(out), {a, b},
                   [dfa, dfb, n, na, nb](Node& self) {
                       auto& A = *self.inputs[0];
                       auto& B = *self.inputs[1];
                       const auto& g = self.grad;
                       if (A.requires_grad) {
                           auto& ga = A.grad_buffer();
                           for (std::size_t i = 0; i < n; ++i)
                               ga[i % na] += g[i] * dfa(A.value[i % na], B.value[i % nb]);
                       }
                       if (B.requires_grad) {
                           auto& gb = B.grad_buffer();
                           for (std::size_t i = 0; i < n; ++i)
                               gb[i % nb] += g[i] * dfb(A.value[i % na], B.value[i % nb]);
                       }
                   });
}

template <typename F, typename D>
Tensor unary(const char* op, const Tensor& a, F f, D df) {
    const auto& av = a.values();
    std::vector<double> out(av.size());
    for (std::size_t i = 0; i < av.size(); ++i) out[i] = f(av[i]);
    return make_op(op, a.shape(), std::move(out), {a}, [df](Node& self) {
        auto& A = *self.inputs[0];
        auto& ga = A.grad_buffer();
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i] * df(A.value[i], self.value[i]);
    });
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
    return detail::binary(
        "add", a, b, [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
        [](double, double) { return 1.0; });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    return detail::binary(
        "sub", a, b, [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
        [](double, double) { return -1.0; });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    return detail::binary(
        "mul", a, b, [](double x, double y) { return x * y; }, [](double, double y) { return y; },
        [](double x, double) { return x; });
}

inline Tensor div(const Tensor& a, const Tensor& b) {
    return detail::binary(
        "div", a, b, [](double x, double y) { return x / y; },
        [](double, double y) { return 1.0 / y; }, [](double x, double y) { return -x / (y * y); });
}

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator+(const Tensor& a, double s) { return add(a, Tensor::scalar(s)); }
inline Tensor operator-(const Tensor& a, double s) { return sub(a, Tensor::scalar(s)); }
inline Tensor operator*(const Tensor& a, double s) { return mul(a, Tensor::scalar(s)); }
inline Tensor operator*(double s, const Tensor& a) { return mul(a, Tensor::scalar(s)); }
inline Tensor operator/(const Tensor& a, double s) { return div(a, Tensor::scalar(s)); }

inline Tensor neg(const Tensor& a) {
    return detail::unary(
        "neg", a, [](double x) { return -x; }, [](double, double) { return -1.0; });
}
inline Tensor operator-(const Tensor& a) { return neg(a); }

inline Tensor square(const Tensor& a) {
    return detail::unary(
        "square", a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

/// |x| with the subgradient at exactly zero taken as 0.
inline Tensor abs(const Tensor& a) {
    return detail::unary(
        "abs", a, [](double x) { return std::abs(x); },
        [](double x, double) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}

/// Exact (erf-based) GELU.
inline Tensor gelu(const Tensor& a) {
    return detail::unary(
        "gelu", a, [](double x) { return 0.5 * x * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0)); },
        [](double x, double) {
            const double cdf = 0.5 * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0));
            const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
            return cdf + x * pdf;
        });
}

// ---------------------------------------------------------------------------
// Reductions and shape manipulation

inline Tensor sum(const Tensor& a) {
    const auto& v = a.values();
    double s = 0.0;
    for (double x : v) s += x;
    return make_op("sum", {1}, {s}, {a}, [](detail::Node& self) {
        auto& ga = self.inputs[0]->grad_buffer();
        for (auto& g : ga) g += self.grad[0];
    });
}

inline Tensor mean(const Tensor& a) { return sum(a) / static_cast<double>(a.numel()); }

/// Sums over the last axis: [..., n] -> [...] (a 1-D input gives [1]).
inline Tensor sum_last(const Tensor& a) {
    const Shape& s = a.shape();
    const std::size_t len = s.back(), rows = a.numel() / len;
    Shape out_shape(s.begin(), s.end() - 1);
    if (out_shape.empty()) out_shape = {1};
    std::vector<double> out(rows, 0.0);
    const auto& v = a.values();
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < len; ++j) out[r] += v[r * len + j];
    return make_op("sum_last", std::move(out_shape), std::move(out), {a}, [rows, len](detail::Node& self) {
        auto& ga = self.inputs[0]->grad_buffer();
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < len; ++j) ga[r * len + j] += self.grad[r];
    });
}

inline Tensor reshape(const Tensor& a, Shape shape) {
    if (numel_of(shape) != a.numel())
        throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
    return make_op("reshape", std::move(shape), a.values(), {a}, [](detail::Node& self) {
        auto& ga = self.inputs[0]->grad_buffer();
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i];
    });
}

using Index = std::shared_ptr<const std::vector<std::size_t>>;

/// out[i] = a[index[i]]. Any permutation, tiling, or selection can be
/// expressed this way; the backward pass scatter-adds.
inline Tensor gather(const Tensor& a, Index index, Shape shape, const char* op = "gather") {
    if (numel_of(shape) != index->size())
        throw ShapeError(std::string(op) + ": index length does not match shape " + shape_str(shape));
    const auto& v = a.values();
    std::vector<double> out(index->size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const std::size_t j = (*index)[i];
        if (j >= v.size()) throw ShapeError(std::string(op) + ": index out of range");
        out[i] = v[j];
    }
    return make_op(op, std::move(shape), std::move(out), {a}, [index](detail::Node& self) {
        auto& ga = self.inputs[0]->grad_buffer();
        for (std::size_t i = 0; i < index->size(); ++i) ga[(*index)[i]] += self.grad[i];
    });
}

/// Swaps the last two axes.
inline Tensor transpose_last2(const Tensor& a) {
    const Shape& s = a.shape();
    if (s.size() < 2) throw ShapeError("transpose_last2 needs rank >= 2, got " + shape_str(s));
    const std::size_t m = s[s.size() - 2], n = s.back(), batch = a.numel() / (m * n);
    auto idx = std::make_shared<std::vector<std::size_t>>(a.numel());
    for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t j = 0; j < n; ++j)
            for (std::size_t i = 0; i < m; ++i) (*idx)[b * m * n + j * m + i] = b * m * n + i * n + j;
    Shape out = s;
    std::swap(out[s.size() - 2], out[s.size() - 1]);
    return gather(a, std::move(idx), std::move(out), "transpose");
}

// ---------------------------------------------------------------------------
// Matrix products (Eigen GEMM kernels)

namespace detail {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapC = Eigen::Map<const RowMat>;
using Map = Eigen::Map<RowMat>;

// C (+)= op(A) * op(B) with op(A) m x k and op(B) k x n. Operands are copied
// into Eigen-owned buffers first: Eigen's kernels peel differently depending
// on pointer alignment, which would make results vary between runs.
inline void gemm(const double* a, bool trans_a, const double* b, bool trans_b, double* c, std::size_t m,
                 std::size_t n, std::size_t k, bool accumulate) {
    const auto M = static_cast<Eigen::Index>(m), N = static_cast<Eigen::Index>(n), K = static_cast<Eigen::Index>(k);
    const RowMat A = trans_a ? RowMat(MapC(a, K, M).transpose()) : RowMat(MapC(a, M, K));
    const RowMat B = trans_b ? RowMat(MapC(b, N, K).transpose()) : RowMat(MapC(b, K, N));
    RowMat C(M, N);
    C.noalias() = A * B;
    Map out(c, M, N);
    if (accumulate) {
        out += C;
    } else {
        out = C;
    }
}

}  // namespace detail

/// Batched product: a [B, m, k] times b [B, k, n] (or b^T when b is [B, n, k]
/// and transpose_b is set). Rank-2 operands are treated as B = 1.
inline Tensor bmm(const Tensor& a, const Tensor& b, bool transpose_b = false) {
    const Shape& sa = a.shape();
    const Shape& sb = b.shape();
    if (sa.size() != sb.size() || (sa.size() != 2 && sa.size() != 3))
        throw ShapeError("matmul: unsupported ranks " + shape_str(sa) + " x " + shape_str(sb));
    const bool batched = sa.size() == 3;
    const std::size_t B = batched ? sa[0] : 1;
    if (batched && sb[0] != B)
        throw ShapeError("matmul: batch sizes differ " + shape_str(sa) + " x " + shape_str(sb));
    const std::size_t m = sa[sa.size() - 2], k = sa.back();
    const std::size_t kb = transpose_b ? sb.back() : sb[sb.size() - 2];
    const std::size_t n = transpose_b ? sb[sb.size() - 2] : sb.back();
    if (k != kb)
        throw ShapeError("matmul: inner dimensions differ " + shape_str(sa) + " x " + shape_str(sb) +
                         (transpose_b ? " (b transposed)" : ""));
    std::vector<double> out(B * m * n);
    const auto& av = a.values();
    const auto& bv = b.values();
    for (std::size_t i = 0; i < B; ++i)
        detail::gemm(av.data() + i * m * k, false, bv.data() + i * k * n, transpose_b, out.data() + i * m * n, m, n, k,
                     false);
    Shape out_shape = batched ? Shape{B, m, n} : Shape{m, n};
    return make_op(batched ? "bmm" : "matmul", std::move(out_shape), std::move(out), {a, b},
                   [B, m, k, n, transpose_b](detail::Node& self) {
                       auto& An = *self.inputs[0];
                       auto& Bn = *self.inputs[1];
                       for (std::size_t i = 0; i < B; ++i) {
                           const double* G = self.grad.data() + i * m * n;
                           const double* A = An.value.data() + i * m * k;
                           const double* Bv = Bn.value.data() + i * k * n;
                           if (An.requires_grad)  // dA = G op(B)^T
                               detail::gemm(G, false, Bv, !transpose_b, An.grad_buffer().data() + i * m * k, m, k, n,
                                            true);
                           if (Bn.requires_grad) {
                               if (transpose_b)  // dB = G^T A, [n, k]
                                   detail::gemm(G, true, A, false, Bn.grad_buffer().data() + i * n * k, n, k, m, true);
                               else  // dB = A^T G, [k, n]
                                   detail::gemm(A, true, G, false, Bn.grad_buffer().data() + i * k * n, k, n, m, true);
                           }
                       }
                   });
}

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.dim() != 2 || b.dim() != 2)
        throw ShapeError("matmul: expected matrices, got " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
    return bmm(a, b, false);
}

/// x [n, in] * w [in, out] + bias [out]
inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias) {
    Tensor y = matmul(x, w);
    return bias.defined() ? add(y, bias) : y;
}

// ---------------------------------------------------------------------------
// Normalization and attention primitives

/// Softmax along `axis`, stabilized by subtracting the slice maximum.
inline Tensor softmax(const Tensor& a, std::size_t axis) {
    const Shape& s = a.shape();
    if (axis >= s.size())
        throw ShapeError("softmax: axis " + std::to_string(axis) + " invalid for shape " + shape_str(s));
    const std::size_t len = s[axis];
    const std::size_t inner = numel_of(Shape(s.begin() + axis + 1, s.end())) ;
    const std::size_t outer = a.numel() / (len * inner);
    const auto& v = a.values();
    for (double x : v)
        if (!std::isfinite(x)) throw NumericError("softmax: non-finite input");
    std::vector<double> out(v.size());
    for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t in = 0; in < inner; ++in) {
            const std::size_t base = o * len * inner + in;
            double mx = v[base];
            for (std::size_t j = 1; j < len; ++j) mx = std::max(mx, v[base + j * inner]);
            double z = 0.0;
            for (std::size_t j = 0; j < len; ++j) {
                const double e = std::exp(v[base + j * inner] - mx);
                out[base + j * inner] = e;
                z += e;
            }
            for (std::size_t j = 0; j < len; ++j) out[base + j * inner] /= z;
        }
    }
    return make_op("softmax", s, std::move(out), {a}, [outer, len, inner](detail::Node& self) {
        auto& ga = self.inputs[0]->grad_buffer();
        const auto& y = self.value;
        const auto& g = self.grad;
        for (std::size_t o = 0; o < outer; ++o) {
            for (std::size_t in = 0; in < inner; ++in) {
                const std::size_t base = o * len * inner + in;
                double dot = 0.0;
                for (std::size_t j = 0; j < len; ++j) dot += g[base + j * inner] * y[base + j * inner];
                for (std::size_t j = 0; j < len; ++j) {
                    const std::size_t p = base + j * inner;
                    ga[p] += y[p] * (g[p] - dot);
                }
            }
        }
    });
}

inline constexpr double kLayerNormEps = 1e-5;

/// Normalizes each row over the last axis, then applies gamma/beta.
inline Tensor layer_norm(const Tensor& a, const Tensor& gamma, const Tensor& beta,
                         double eps = kLayerNormEps) {
    const std::size_t d = a.shape().back();
    if (gamma.numel() != d || beta.numel() != d)
        throw ShapeError("layer_norm: gamma/beta " + shape_str(gamma.shape()) + "/" +
                         shape_str(beta.shape()) + " do not match last dimension of " +
                         shape_str(a.shape()));
    const std::size_t rows = a.numel() / d;
    const auto& x = a.values();
    const auto& gm = gamma.values();
    const auto& bt = beta.values();
    std::vector<double> out(x.size());
    auto xhat = std::make_shared<std::vector<double>>(x.size());
    auto inv_std = std::make_shared<std::vector<double>>(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const double* row = x.data() + r * d;
        double mu = 0.0;
        for (std::size_t j = 0; j < d; ++j) mu += row[j];
        mu /= static_cast<double>(d);
        double var = 0.0;
        for (std::size_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
        var /= static_cast<double>(d);
        const double is = 1.0 / std::sqrt(var + eps);
        (*inv_std)[r] = is;
        for (std::size_t j = 0; j < d; ++j) {
            const double h = (row[j] - mu) * is;
            (*xhat)[r * d + j] = h;
            out[r * d + j] = h * gm[j] + bt[j];
        }
    }
    return make_op("layer_norm", a.shape(), std::move(out), {a, gamma, beta},
                   [rows, d, xhat, inv_std](detail::Node& self) {
                       auto& X = *self.inputs[0];
                       auto& G = *self.inputs[1];
                       auto& Bt = *self.inputs[2];
                       const auto& g = self.grad;
                       if (G.requires_grad) {
                           auto& gg = G.grad_buffer();
                           for (std::size_t r = 0; r < rows; ++r)
                               for (std::size_t j = 0; j < d; ++j) gg[j] += g[r * d + j] * (*xhat)[r * d + j];
                       }
                       if (Bt.requires_grad) {
                           auto& gb = Bt.grad_buffer();
                           for (std::size_t r = 0; r < rows; ++r)
                               for (std::size_t j = 0; j < d; ++j) gb[j] += g[r * d + j];
                       }
                       if (X.requires_grad) {
                           auto& gx = X.grad_buffer();
                           const auto& gm = G.value;
                           for (std::size_t r = 0; r < rows; ++r) {
                               double s1 = 0.0, s2 = 0.0;
                               for (std::size_t j = 0; j < d; ++j) {
                                   const double dh = g[r * d + j] * gm[j];
                                   s1 += dh;
                                   s2 += dh * (*xhat)[r * d + j];
                               }
                               const double inv_d = 1.0 / static_cast<double>(d);
                               for (std::size_t j = 0; j < d; ++j) {
                                   const double dh = g[r * d + j] * gm[j];
                                   gx[r * d + j] += (*inv_std)[r] *
                                                    (dh - inv_d * s1 - (*xhat)[r * d + j] * inv_d * s2);
                               }
                           }
                       }
                   });
}

// ---------------------------------------------------------------------------
// Spatial ops on [C, H, W] tensors

namespace detail {

struct Chw {
    std::size_t c, h, w;
};

inline Chw as_chw(const char* op, const Tensor& t) {
    const Shape& s = t.shape();
    if (s.size() == 3) return {s[0], s[1], s[2]};
    if (s.size() == 2) return {1, s[0], s[1]};
    throw ShapeError(std::string(op) + ": expected [C,H,W] or [H,W], got " + shape_str(s));
}

}  // namespace detail

/// 2-D cross-correlation. input [Cin, H, W], kernel [Cout, Cin, k, k], bias
/// [Cout] or undefined. Output [Cout, Ho, Wo] with Ho = (H + 2p - k)/stride + 1.
inline Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias, std::size_t stride,
                     std::size_t padding) {
    const auto [cin, h, w] = detail::as_chw("conv2d", input);
    const Shape& ks = kernel.shape();
    if (ks.size() != 4 || ks[1] != cin || ks[2] != ks[3])
        throw ShapeError("conv2d: kernel " + shape_str(ks) + " incompatible with input " +
                         shape_str(input.shape()));
    const std::size_t cout = ks[0], k = ks[2];
    if (k % 2 == 0) throw ShapeError("conv2d: kernel size " + std::to_string(k) + " must be odd");
    if (stride == 0) throw ShapeError("conv2d: stride must be positive");
    if (bias.defined() && bias.numel() != cout)
        throw ShapeError("conv2d: bias " + shape_str(bias.shape()) + " does not match " +
                         std::to_string(cout) + " output channels");
    if (h + 2 * padding < k || w + 2 * padding < k)
        throw ShapeError("conv2d: kernel " + std::to_string(k) + " larger than padded input " +
                         shape_str(input.shape()));
    const std::size_t ho = (h + 2 * padding - k) / stride + 1;
    const std::size_t wo = (w + 2 * padding - k) / stride + 1;
    const std::size_t rows = cin * k * k, cols = ho * wo;

    // im2col: cols[(c*k + ky)*k + kx, oy*wo + ox]
    auto col = std::make_shared<std::vector<double>>(rows * cols, 0.0);
    const auto& x = input.values();
    for (std::size_t c = 0; c < cin; ++c)
        for (std::size_t ky = 0; ky < k; ++ky)
            for (std::size_t kx = 0; kx < k; ++kx) {
                double* dst = col->data() + ((c * k + ky) * k + kx) * cols;
                for (std::size_t oy = 0; oy < ho; ++oy) {
                    const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(padding);
                    if (iy < 0 || iy >= static_cast<long>(h)) continue;
                    for (std::size_t ox = 0; ox < wo; ++ox) {
                        const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(padding);
                        if (ix < 0 || ix >= static_cast<long>(w)) continue;
                        dst[oy * wo + ox] = x[(c * h + static_cast<std::size_t>(iy)) * w + static_cast<std::size_t>(ix)];
                    }
                }
            }
    std::vector<double> out(cout * cols);
    {
        detail::gemm(kernel.values().data(), false, col->data(), false, out.data(), cout, cols, rows, false);
        if (bias.defined()) {
            const auto& b = bias.values();
            for (std::size_t o = 0; o < cout; ++o)
                for (std::size_t j = 0; j < cols; ++j) out[o * cols + j] += b[o];
        }
    }
    std::vector<Tensor> inputs{input, kernel};
    if (bias.defined()) inputs.push_back(bias);
    return make_op(
        "conv2d", {cout, ho, wo}, std::move(out), std::move(inputs),
        [=](detail::Node& self) {
            auto& In = *self.inputs[0];
            auto& K = *self.inputs[1];
            const double* G = self.grad.data();
            if (K.requires_grad)
                detail::gemm(G, false, col->data(), true, K.grad_buffer().data(), cout, rows, cols, true);
            if (self.inputs.size() > 2 && self.inputs[2]->requires_grad) {
                auto& gb = self.inputs[2]->grad_buffer();
                for (std::size_t o = 0; o < cout; ++o) {
                    double acc = 0.0;
                    for (std::size_t j = 0; j < cols; ++j) acc += G[o * cols + j];
                    gb[o] += acc;
                }
            }
            if (In.requires_grad) {
                std::vector<double> dcol(rows * cols);
                detail::gemm(K.value.data(), true, G, false, dcol.data(), rows, cols, cout, false);
                auto& gx = In.grad_buffer();
                for (std::size_t c = 0; c < cin; ++c)
                    for (std::size_t ky = 0; ky < k; ++ky)
                        for (std::size_t kx = 0; kx < k; ++kx) {
                            const double* src = dcol.data() + ((c * k + ky) * k + kx) * cols;
                            for (std::size_t oy = 0; oy < ho; ++oy) {
                                const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(padding);
                                if (iy < 0 || iy >= static_cast<long>(h)) continue;
                                for (std::size_t ox = 0; ox < wo; ++ox) {
                                    const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(padding);
                                    if (ix < 0 || ix >= static_cast<long>(w)) continue;
                                    gx[(c * h + static_cast<std::size_t>(iy)) * w + static_cast<std::size_t>(ix)] +=
                                        src[oy * wo + ox];
                                }
                            }
                        }
            }
        });
}

/// Zero-padded, stride-1 convolution that keeps the spatial size.
inline Tensor conv2d_same(const Tensor& input, const Tensor& kernel, const Tensor& bias) {
    return conv2d(input, kernel, bias, 1, kernel.size(2) / 2);
}

/// Mean over non-overlapping k x k blocks of the last two axes.
inline Tensor avg_pool2d(const Tensor& input, std::size_t k) {
    const auto [c, h, w] = detail::as_chw("avg_pool2d", input);
    if (k == 0 || h % k != 0 || w % k != 0)
        throw ShapeError("avg_pool2d: spatial dims " + std::to_string(h) + "x" + std::to_string(w) +
                         " not divisible by " + std::to_string(k));
    const std::size_t ho = h / k, wo = w / k;
    const double inv = 1.0 / static_cast<double>(k * k);
    const auto& x = input.values();
    std::vector<double> out(c * ho * wo, 0.0);
    for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t y = 0; y < h; ++y)
            for (std::size_t xx = 0; xx < w; ++xx) out[(ch * ho + y / k) * wo + xx / k] += x[(ch * h + y) * w + xx];
    for (auto& v : out) v *= inv;
    Shape shape = input.dim() == 3 ? Shape{c, ho, wo} : Shape{ho, wo};
    return make_op("avg_pool2d", std::move(shape), std::move(out), {input}, [=](detail::Node& self) {
        auto& gx = self.inputs[0]->grad_buffer();
        for (std::size_t ch = 0; ch < c; ++ch)
            for (std::size_t y = 0; y < h; ++y)
                for (std::size_t xx = 0; xx < w; ++xx)
                    gx[(ch * h + y) * w + xx] += inv * self.grad[(ch * ho + y / k) * wo + xx / k];
    });
}

/// [C*r*r, H, W] -> [C, r*H, r*W] with out[c, y*r+i, x*r+j] = in[c*r*r + i*r + j, y, x].
inline Tensor pixel_shuffle(const Tensor& input, std::size_t r) {
    const Shape& s = input.shape();
    if (s.size() != 3) throw ShapeError("pixel_shuffle: expected [C,H,W], got " + shape_str(s));
    if (r == 0 || s[0] % (r * r) != 0)
        throw ShapeError("pixel_shuffle: channel count " + std::to_string(s[0]) + " not divisible by r^2 = " +
                         std::to_string(r * r));
    const std::size_t c = s[0] / (r * r), h = s[1], w = s[2];
    auto idx = std::make_shared<std::vector<std::size_t>>(input.numel());
    for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t y = 0; y < h * r; ++y)
            for (std::size_t x = 0; x < w * r; ++x) {
                const std::size_t src_c = ch * r * r + (y % r) * r + (x % r);
                (*idx)[(ch * h * r + y) * w * r + x] = (src_c * h + y / r) * w + x / r;
            }
    return gather(input, std::move(idx), {c, h * r, w * r}, "pixel_shuffle");
}

/// Nearest-neighbour (constant) upsampling by an integer factor.
inline Tensor upsample_const(const Tensor& input, std::size_t r) {
    const auto [c, h, w] = detail::as_chw("upsample_const", input);
    auto idx = std::make_shared<std::vector<std::size_t>>(c * h * r * w * r);
    for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t y = 0; y < h * r; ++y)
            for (std::size_t x = 0; x < w * r; ++x) (*idx)[(ch * h * r + y) * w * r + x] = (ch * h + y / r) * w + x / r;
    Shape shape = input.dim() == 3 ? Shape{c, h * r, w * r} : Shape{h * r, w * r};
    return gather(input, std::move(idx), std::move(shape), "upsample_const");
}

}  // namespace downscale
