#include "pcd/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>
#include <unordered_map>

namespace pcd {

std::size_t shape_numel(const Shape& shape) {
    std::size_t n = 1;
    for (auto d : shape) n *= d;
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
    os << ']';
    return os.str();
}

namespace {

thread_local bool g_grad_enabled = true;

template <typename T>
using NodePtr = std::shared_ptr<TensorNode<T>>;

template <typename T>
using BackwardFn = std::function<void(const TensorNode<T>&)>;

template <typename T>
void check_finite(const char* op, const std::vector<T>& data) {
    for (const T v : data) {
        if (!std::isfinite(v)) {
            throw NumericError(std::string("non-finite value produced by op '") + op + "'");
        }
    }
}

template <typename T>
Tensor<T> make_op(const char* op, Shape shape, std::vector<T> data, std::vector<NodePtr<T>> inputs,
                  BackwardFn<T> fn) {
    check_finite(op, data);
    auto node = std::make_shared<TensorNode<T>>();
    node->shape = std::move(shape);
    node->data = std::move(data);
    node->op = op;
    bool needs = false;
    if (g_grad_enabled) {
        for (const auto& in : inputs) needs = needs || in->requires_grad;
    }
    if (needs) {
        node->requires_grad = true;
        node->parents = std::move(inputs);
        node->backward_fn = std::move(fn);
    }
    return Tensor<T>(std::move(node));
}

void require(bool ok, const std::string& msg) {
    if (!ok) throw ShapeError(msg);
}

void require_rank2(const Shape& s, const char* op) {
    require(s.size() == 2, std::string(op) + ": expected a 2-D tensor, got " + shape_str(s));
}

}  // namespace

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool grad_enabled() { return g_grad_enabled; }

// ---------------------------------------------------------------------------
// Tensor members

template <typename T>
Tensor<T> Tensor<T>::from(Shape shape, std::vector<T> data, bool requires_grad) {
    require(shape_numel(shape) == data.size(),
            "Tensor::from: shape " + shape_str(shape) + " does not match " +
                std::to_string(data.size()) + " values");
    check_finite("from", data);
    auto node = std::make_shared<Node>();
    node->shape = std::move(shape);
    node->data = std::move(data);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
}

template <typename T>
Tensor<T> Tensor<T>::zeros(Shape shape, bool requires_grad) {
    return full(std::move(shape), T(0), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::full(Shape shape, T value, bool requires_grad) {
    const auto n = shape_numel(shape);
    return from(std::move(shape), std::vector<T>(n, value), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T value, bool requires_grad) {
    return from(Shape{}, std::vector<T>{value}, requires_grad);
}

template <typename T>
std::span<T> Tensor<T>::mutable_data() {
    if (!is_leaf()) throw std::logic_error("mutable_data() on a non-leaf tensor");
    return node_->data;
}

template <typename T>
T Tensor<T>::item() const {
    require(numel() == 1, "item(): tensor has " + std::to_string(numel()) + " elements");
    return node_->data[0];
}

template <typename T>
Tensor<T> Tensor<T>::detach() const {
    auto node = std::make_shared<Node>();
    node->shape = node_->shape;
    node->data = node_->data;
    node->op = "detach";
    return Tensor(std::move(node));
}

template <typename T>
Tensor<T> Tensor<T>::clone(bool requires_grad) const {
    return from(node_->shape, node_->data, requires_grad);
}

// ---------------------------------------------------------------------------
// backward

template <typename T>
void backward(const Tensor<T>& loss) {
    require(loss.numel() == 1, "backward: loss must be scalar, got shape " + shape_str(loss.shape()));
    if (!loss.requires_grad()) {
        throw std::invalid_argument("backward: loss does not depend on any tensor requiring grad");
    }
    using Node = TensorNode<T>;
    // Iterative post-order DFS; state 1 = on stack, 2 = done.
    std::unordered_map<const Node*, int> state;
    std::vector<Node*> order;
    std::vector<std::pair<Node*, std::size_t>> stack;
    stack.emplace_back(loss.node().get(), 0);
    state[loss.node().get()] = 1;
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            Node* parent = node->parents[next++].get();
            if (!parent->requires_grad) continue;
            auto it = state.find(parent);
            if (it == state.end()) {
                state[parent] = 1;
                stack.emplace_back(parent, 0);
            } else if (it->second == 1) {
                throw std::logic_error("backward: cycle detected in autodiff graph");
            }
        } else {
            state[node] = 2;
            order.push_back(node);
            stack.pop_back();
        }
    }
    loss.node()->grad_buffer()[0] += T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* node = *it;
        if (node->backward_fn && !node->grad.empty()) node->backward_fn(*node);
    }
    for (Node* node : order) {
        if (node->backward_fn) {
            node->backward_fn = nullptr;
            node->parents.clear();
            node->grad.clear();
            node->grad.shrink_to_fit();
        }
    }
}

// ---------------------------------------------------------------------------
// elementwise

namespace {

template <typename T, typename F, typename G>
Tensor<T> binary_op(const char* name, const Tensor<T>& a, const Tensor<T>& b, F fwd, G bwd) {
    require(a.shape() == b.shape(), std::string(name) + ": shape mismatch " + shape_str(a.shape()) +
                                        " vs " + shape_str(b.shape()));
    const auto n = a.numel();
    std::vector<T> out(n);
    const auto ad = a.data();
    const auto bd = b.data();
    for (std::size_t i = 0; i < n; ++i) out[i] = fwd(ad[i], bd[i]);
    auto an = a.node();
    auto bn = b.node();
    return make_op<T>(name, a.shape(), std::move(out), {an, bn}, [an, bn, bwd](const TensorNode<T>& self) {
        const auto n = self.data.size();
        const bool ga = an->requires_grad;
        const bool gb = bn->requires_grad;
        T* gad = ga ? an->grad_buffer().data() : nullptr;
        T* gbd = gb ? bn->grad_buffer().data() : nullptr;
        for (std::size_t i = 0; i < n; ++i) {
            T da, db;
            bwd(an->data[i], bn->data[i], self.grad[i], da, db);
            if (ga) gad[i] += da;
            if (gb) gbd[i] += db;
        }
    });
}

template <typename T, typename F, typename G>
Tensor<T> unary_op(const char* name, const Tensor<T>& a, F fwd, G bwd) {
    const auto n = a.numel();
    std::vector<T> out(n);
    const auto ad = a.data();
    for (std::size_t i = 0; i < n; ++i) out[i] = fwd(ad[i]);
    auto an = a.node();
    return make_op<T>(name, a.shape(), std::move(out), {an}, [an, bwd](const TensorNode<T>& self) {
        auto& g = an->grad_buffer();
        for (std::size_t i = 0; i < self.data.size(); ++i) {
            g[i] += bwd(an->data[i], self.data[i]) * self.grad[i];
        }
    });
}

}  // namespace

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    return binary_op<T>(
        "add", a, b, [](T x, T y) { return x + y; },
        [](T, T, T g, T& da, T& db) { da = g; db = g; });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    return binary_op<T>(
        "sub", a, b, [](T x, T y) { return x - y; },
        [](T, T, T g, T& da, T& db) { da = g; db = -g; });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    return binary_op<T>(
        "mul", a, b, [](T x, T y) { return x * y; },
        [](T x, T y, T g, T& da, T& db) { da = g * y; db = g * x; });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T s) {
    return unary_op<T>("add_scalar", a, [s](T x) { return x + s; }, [](T, T) { return T(1); });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T s) {
    return unary_op<T>("scale", a, [s](T x) { return x * s; }, [s](T, T) { return s; });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
    return unary_op<T>(
        "relu", a, [](T x) { return x > T(0) ? x : T(0); },
        [](T x, T) { return x > T(0) ? T(1) : T(0); });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& a) {
    return unary_op<T>(
        "sigmoid", a,
        [](T x) {
            if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
            const T e = std::exp(x);
            return e / (T(1) + e);
        },
        [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Tensor<T> acosh1p(const Tensor<T>& a) {
    for (const T x : a.data()) {
        if (x < T(0)) throw NumericError("acosh1p: negative argument");
    }
    return unary_op<T>(
        "acosh1p", a, [](T x) { return std::acosh(T(1) + x); },
        [](T x, T) { return T(1) / std::sqrt(std::max(x * (x + T(2)), T(1e-12))); });
}

// ---------------------------------------------------------------------------
// reductions

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
    double acc = 0.0;
    for (const T v : a.data()) acc += double(v);
    auto an = a.node();
    return make_op<T>("sum", Shape{}, {T(acc)}, {an}, [an](const TensorNode<T>& self) {
        auto& g = an->grad_buffer();
        for (auto& v : g) v += self.grad[0];
    });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
    require(a.numel() > 0, "mean: empty tensor");
    double acc = 0.0;
    for (const T v : a.data()) acc += double(v);
    const double n = double(a.numel());
    auto an = a.node();
    return make_op<T>("mean", Shape{}, {T(acc / n)}, {an}, [an, n](const TensorNode<T>& self) {
        auto& g = an->grad_buffer();
        const T share = T(double(self.grad[0]) / n);
        for (auto& v : g) v += share;
    });
}

namespace {

template <typename T>
Tensor<T> reduce_axis(const char* name, const Tensor<T>& a, std::size_t axis, bool average) {
    require_rank2(a.shape(), name);
    require(axis < 2, std::string(name) + ": axis out of range");
    const auto rows = a.dim(0);
    const auto cols = a.dim(1);
    const auto len = axis == 0 ? rows : cols;
    require(len > 0, std::string(name) + ": empty axis");
    const double div = average ? double(len) : 1.0;
    const auto ad = a.data();
    std::vector<T> out;
    Shape shape;
    if (axis == 0) {
        std::vector<double> acc(cols, 0.0);
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < cols; ++c) acc[c] += double(ad[r * cols + c]);
        out.resize(cols);
        for (std::size_t c = 0; c < cols; ++c) out[c] = T(acc[c] / div);
        shape = {1, cols};
    } else {
        out.resize(rows);
        for (std::size_t r = 0; r < rows; ++r) {
            double acc = 0.0;
            for (std::size_t c = 0; c < cols; ++c) acc += double(ad[r * cols + c]);
            out[r] = T(acc / div);
        }
        shape = {rows, 1};
    }
    auto an = a.node();
    return make_op<T>(name, std::move(shape), std::move(out), {an},
                      [an, rows, cols, axis, div](const TensorNode<T>& self) {
                          auto& g = an->grad_buffer();
                          for (std::size_t r = 0; r < rows; ++r)
                              for (std::size_t c = 0; c < cols; ++c)
                                  g[r * cols + c] += T(double(self.grad[axis == 0 ? c : r]) / div);
                      });
}

}  // namespace

template <typename T>
Tensor<T> sum(const Tensor<T>& a, std::size_t axis) {
    return reduce_axis<T>("sum_axis", a, axis, false);
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a, std::size_t axis) {
    return reduce_axis<T>("mean_axis", a, axis, true);
}

template <typename T>
Tensor<T> segment_max(const Tensor<T>& a, std::span<const std::size_t> starts) {
    require_rank2(a.shape(), "segment_max");
    const auto rows = a.dim(0);
    const auto cols = a.dim(1);
    require(!starts.empty() && starts[0] == 0, "segment_max: starts must begin at 0");
    const auto segs = starts.size();
    std::vector<T> out(segs * cols);
    std::vector<std::size_t> arg(segs * cols);
    const auto ad = a.data();
    for (std::size_t s = 0; s < segs; ++s) {
        const auto begin = starts[s];
        const auto end = s + 1 < segs ? starts[s + 1] : rows;
        require(begin < end && end <= rows, "segment_max: empty or out-of-range segment");
        for (std::size_t c = 0; c < cols; ++c) {
            std::size_t best = begin;
            for (std::size_t r = begin + 1; r < end; ++r)
                if (ad[r * cols + c] > ad[best * cols + c]) best = r;
            out[s * cols + c] = ad[best * cols + c];
            arg[s * cols + c] = best;
        }
    }
    auto an = a.node();
    return make_op<T>("segment_max", Shape{segs, cols}, std::move(out), {an},
                      [an, arg = std::move(arg), cols](const TensorNode<T>& self) {
                          auto& g = an->grad_buffer();
                          for (std::size_t i = 0; i < arg.size(); ++i) g[arg[i] * cols + i % cols] += self.grad[i];
                      });
}

// ---------------------------------------------------------------------------
// linear algebra / layout

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    require_rank2(a.shape(), "matmul");
    require_rank2(b.shape(), "matmul");
    const auto m = a.dim(0), k = a.dim(1), n = b.dim(1);
    require(k == b.dim(0), "matmul: inner dimensions differ " + shape_str(a.shape()) + " x " +
                               shape_str(b.shape()));
    std::vector<T> out(m * n, T(0));
    const T* ad = a.data().data();
    const T* bd = b.data().data();
    for (std::size_t i = 0; i < m; ++i) {
        T* row = out.data() + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const T av = ad[i * k + p];
            if (av == T(0)) continue;
            const T* brow = bd + p * n;
            for (std::size_t j = 0; j < n; ++j) row[j] += av * brow[j];
        }
    }
    auto an = a.node();
    auto bn = b.node();
    return make_op<T>("matmul", Shape{m, n}, std::move(out), {an, bn}, [an, bn, m, k, n](const TensorNode<T>& self) {
        const T* g = self.grad.data();
        if (an->requires_grad) {
            auto& ga = an->grad_buffer();
            const T* bd = bn->data.data();
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t p = 0; p < k; ++p) {
                    T acc = T(0);
                    const T* grow = g + i * n;
                    const T* brow = bd + p * n;
                    for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
                    ga[i * k + p] += acc;
                }
        }
        if (bn->requires_grad) {
            auto& gb = bn->grad_buffer();
            const T* ad = an->data.data();
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t p = 0; p < k; ++p) {
                    const T av = ad[i * k + p];
                    if (av == T(0)) continue;
                    T* gbrow = gb.data() + p * n;
                    const T* grow = g + i * n;
                    for (std::size_t j = 0; j < n; ++j) gbrow[j] += av * grow[j];
                }
        }
    });
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& a) {
    require_rank2(a.shape(), "transpose");
    const auto r = a.dim(0), c = a.dim(1);
    std::vector<T> out(r * c);
    const auto ad = a.data();
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) out[j * r + i] = ad[i * c + j];
    auto an = a.node();
    return make_op<T>("transpose", Shape{c, r}, std::move(out), {an}, [an, r, c](const TensorNode<T>& self) {
        auto& g = an->grad_buffer();
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) g[i * c + j] += self.grad[j * r + i];
    });
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
    require(shape_numel(shape) == a.numel(),
            "reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
    std::vector<T> out(a.data().begin(), a.data().end());
    auto an = a.node();
    return make_op<T>("reshape", std::move(shape), std::move(out), {an}, [an](const TensorNode<T>& self) {
        auto& g = an->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    });
}

template <typename T>
Tensor<T> concat(std::span<const Tensor<T>> parts, std::size_t axis) {
    require(!parts.empty(), "concat: no inputs");
    require(axis < 2, "concat: axis out of range");
    for (const auto& p : parts) require_rank2(p.shape(), "concat");
    std::vector<NodePtr<T>> inputs;
    std::size_t rows = 0, cols = 0;
    if (axis == 0) {
        cols = parts[0].dim(1);
        for (const auto& p : parts) {
            require(p.dim(1) == cols, "concat: column mismatch along axis 0");
            rows += p.dim(0);
        }
    } else {
        rows = parts[0].dim(0);
        for (const auto& p : parts) {
            require(p.dim(0) == rows, "concat: row mismatch along axis 1");
            cols += p.dim(1);
        }
    }
    std::vector<T> out(rows * cols);
    std::vector<std::size_t> offsets;
    std::size_t off = 0;
    for (const auto& p : parts) {
        inputs.push_back(p.node());
        offsets.push_back(off);
        const auto pr = p.dim(0), pc = p.dim(1);
        const auto pd = p.data();
        for (std::size_t r = 0; r < pr; ++r)
            for (std::size_t c = 0; c < pc; ++c) {
                const auto dst = axis == 0 ? (off + r) * cols + c : r * cols + off + c;
                out[dst] = pd[r * pc + c];
            }
        off += axis == 0 ? pr : pc;
    }
    auto nodes = inputs;
    return make_op<T>("concat", Shape{rows, cols}, std::move(out), std::move(inputs),
                      [nodes, offsets, axis, cols](const TensorNode<T>& self) {
                          for (std::size_t i = 0; i < nodes.size(); ++i) {
                              const auto& in = nodes[i];
                              if (!in->requires_grad) continue;
                              auto& g = in->grad_buffer();
                              const auto pr = in->shape[0], pc = in->shape[1];
                              for (std::size_t r = 0; r < pr; ++r)
                                  for (std::size_t c = 0; c < pc; ++c) {
                                      const auto src = axis == 0 ? (offsets[i] + r) * cols + c
                                                                 : r * cols + offsets[i] + c;
                                      g[r * pc + c] += self.grad[src];
                                  }
                          }
                      });
}

template <typename T>
Tensor<T> concat(std::initializer_list<Tensor<T>> parts, std::size_t axis) {
    return concat<T>(std::span<const Tensor<T>>(parts.begin(), parts.size()), axis);
}

template <typename T>
Tensor<T> slice_cols(const Tensor<T>& a, std::size_t start, std::size_t len) {
    require_rank2(a.shape(), "slice_cols");
    const auto rows = a.dim(0), cols = a.dim(1);
    require(start + len <= cols && len > 0, "slice_cols: range out of bounds");
    std::vector<T> out(rows * len);
    const auto ad = a.data();
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < len; ++c) out[r * len + c] = ad[r * cols + start + c];
    auto an = a.node();
    return make_op<T>("slice_cols", Shape{rows, len}, std::move(out), {an},
                      [an, rows, cols, start, len](const TensorNode<T>& self) {
                          auto& g = an->grad_buffer();
                          for (std::size_t r = 0; r < rows; ++r)
                              for (std::size_t c = 0; c < len; ++c) g[r * cols + start + c] += self.grad[r * len + c];
                      });
}

template <typename T>
Tensor<T> expand_rows(const Tensor<T>& a, std::size_t n) {
    require(a.rank() == 2 && a.dim(0) == 1, "expand_rows: expected [1 x d], got " + shape_str(a.shape()));
    const auto d = a.dim(1);
    std::vector<T> out(n * d);
    const auto ad = a.data();
    for (std::size_t r = 0; r < n; ++r) std::copy(ad.begin(), ad.end(), out.begin() + std::ptrdiff_t(r * d));
    auto an = a.node();
    return make_op<T>("expand_rows", Shape{n, d}, std::move(out), {an}, [an, n, d](const TensorNode<T>& self) {
        auto& g = an->grad_buffer();
        for (std::size_t r = 0; r < n; ++r)
            for (std::size_t c = 0; c < d; ++c) g[c] += self.grad[r * d + c];
    });
}

template <typename T>
Tensor<T> gather_rows(const Tensor<T>& a, std::span<const std::size_t> index) {
    require_rank2(a.shape(), "gather_rows");
    const auto rows = a.dim(0), cols = a.dim(1);
    std::vector<T> out(index.size() * cols);
    const auto ad = a.data();
    for (std::size_t i = 0; i < index.size(); ++i) {
        require(index[i] < rows, "gather_rows: index out of range");
        std::copy_n(ad.begin() + std::ptrdiff_t(index[i] * cols), cols, out.begin() + std::ptrdiff_t(i * cols));
    }
    auto an = a.node();
    std::vector<std::size_t> idx(index.begin(), index.end());
    return make_op<T>("gather_rows", Shape{index.size(), cols}, std::move(out), {an},
                      [an, idx = std::move(idx), cols](const TensorNode<T>& self) {
                          auto& g = an->grad_buffer();
                          for (std::size_t i = 0; i < idx.size(); ++i)
                              for (std::size_t c = 0; c < cols; ++c) g[idx[i] * cols + c] += self.grad[i * cols + c];
                      });
}

// ---------------------------------------------------------------------------
// attention helpers

template <typename T>
Tensor<T> softmax(const Tensor<T>& a, std::size_t axis) {
    Shape shape = a.shape();
    if (shape.size() == 1) shape = {1, shape[0]};
    require(shape.size() == 2, "softmax: expected a 1-D or 2-D tensor");
    require(axis < 2, "softmax: axis out of range");
    const auto rows = shape[0], cols = shape[1];
    const auto len = axis == 0 ? rows : cols;
    const auto lanes = axis == 0 ? cols : rows;
    require(len > 0, "softmax: empty axis");
    // element (lane, t) lives at offset lane*lane_stride + t*step
    const auto step = axis == 0 ? cols : std::size_t(1);
    const auto lane_stride = axis == 0 ? std::size_t(1) : cols;
    std::vector<T> out(rows * cols);
    const auto ad = a.data();
    for (std::size_t l = 0; l < lanes; ++l) {
        T mx = -std::numeric_limits<T>::infinity();
        for (std::size_t t = 0; t < len; ++t) mx = std::max(mx, ad[l * lane_stride + t * step]);
        double z = 0.0;
        for (std::size_t t = 0; t < len; ++t) {
            const auto o = l * lane_stride + t * step;
            out[o] = std::exp(ad[o] - mx);
            z += double(out[o]);
        }
        for (std::size_t t = 0; t < len; ++t) out[l * lane_stride + t * step] = T(double(out[l * lane_stride + t * step]) / z);
    }
    auto an = a.node();
    return make_op<T>("softmax", a.shape(), std::move(out), {an},
                      [an, lanes, len, step, lane_stride](const TensorNode<T>& self) {
                          auto& g = an->grad_buffer();
                          for (std::size_t l = 0; l < lanes; ++l) {
                              double dotp = 0.0;
                              for (std::size_t t = 0; t < len; ++t) {
                                  const auto o = l * lane_stride + t * step;
                                  dotp += double(self.grad[o]) * double(self.data[o]);
                              }
                              for (std::size_t t = 0; t < len; ++t) {
                                  const auto o = l * lane_stride + t * step;
                                  g[o] += self.data[o] * (self.grad[o] - T(dotp));
                              }
                          }
                      });
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& a, T eps) {
    require_rank2(a.shape(), "layer_norm");
    const auto rows = a.dim(0), cols = a.dim(1);
    require(cols > 0, "layer_norm: empty rows");
    std::vector<T> out(rows * cols);
    std::vector<T> inv_std(rows);
    const auto ad = a.data();
    for (std::size_t r = 0; r < rows; ++r) {
        double mu = 0.0;
        for (std::size_t c = 0; c < cols; ++c) mu += double(ad[r * cols + c]);
        mu /= double(cols);
        double var = 0.0;
        for (std::size_t c = 0; c < cols; ++c) {
            const double d = double(ad[r * cols + c]) - mu;
            var += d * d;
        }
        var /= double(cols);
        const double is = 1.0 / std::sqrt(var + double(eps));
        inv_std[r] = T(is);
        for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = T((double(ad[r * cols + c]) - mu) * is);
    }
    auto an = a.node();
    return make_op<T>("layer_norm", a.shape(), std::move(out), {an},
                      [an, rows, cols, inv_std = std::move(inv_std)](const TensorNode<T>& self) {
                          auto& g = an->grad_buffer();
                          for (std::size_t r = 0; r < rows; ++r) {
                              double mg = 0.0, mgy = 0.0;
                              for (std::size_t c = 0; c < cols; ++c) {
                                  const auto o = r * cols + c;
                                  mg += double(self.grad[o]);
                                  mgy += double(self.grad[o]) * double(self.data[o]);
                              }
                              mg /= double(cols);
                              mgy /= double(cols);
                              for (std::size_t c = 0; c < cols; ++c) {
                                  const auto o = r * cols + c;
                                  g[o] += T(double(inv_std[r]) * (double(self.grad[o]) - mg - double(self.data[o]) * mgy));
                              }
                          }
                      });
}

template <typename T>
Tensor<T> bce_with_logits(const Tensor<T>& logits, std::span<const T> targets) {
    require(logits.numel() == targets.size() && !targets.empty(), "bce_with_logits: size mismatch");
    const auto n = targets.size();
    const auto zd = logits.data();
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double z = zd[i];
        acc += std::max(z, 0.0) - z * double(targets[i]) + std::log1p(std::exp(-std::abs(z)));
    }
    auto zn = logits.node();
    std::vector<T> t(targets.begin(), targets.end());
    return make_op<T>("bce_with_logits", Shape{}, {T(acc / double(n))}, {zn},
                      [zn, t = std::move(t)](const TensorNode<T>& self) {
                          auto& g = zn->grad_buffer();
                          const double n = double(t.size());
                          for (std::size_t i = 0; i < t.size(); ++i) {
                              const double z = zn->data[i];
                              const double s = z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
                              g[i] += T((s - double(t[i])) / n * double(self.grad[0]));
                          }
                      });
}

// ---------------------------------------------------------------------------
// image ops

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias, std::size_t stride,
                 std::size_t pad) {
    require(x.rank() == 3, "conv2d: input must be [C x H x W]");
    require(weight.rank() == 4, "conv2d: weight must be [O x C x k x k]");
    const auto C = x.dim(0), H = x.dim(1), W = x.dim(2);
    const auto O = weight.dim(0), k = weight.dim(2);
    require(weight.dim(1) == C && weight.dim(3) == k, "conv2d: weight/input channel mismatch");
    require(bias.numel() == O, "conv2d: bias size mismatch");
    require(stride > 0 && H + 2 * pad >= k && W + 2 * pad >= k, "conv2d: kernel larger than padded input");
    const auto Ho = (H + 2 * pad - k) / stride + 1;
    const auto Wo = (W + 2 * pad - k) / stride + 1;
    std::vector<T> out(O * Ho * Wo);
    const T* xd = x.data().data();
    const T* wd = weight.data().data();
    const T* bd = bias.data().data();
    for (std::size_t o = 0; o < O; ++o) {
        T* plane = out.data() + o * Ho * Wo;
        std::fill(plane, plane + Ho * Wo, bd[o]);
        for (std::size_t c = 0; c < C; ++c) {
            const T* xin = xd + c * H * W;
            const T* wk = wd + (o * C + c) * k * k;
            for (std::size_t oy = 0; oy < Ho; ++oy)
                for (std::size_t ky = 0; ky < k; ++ky) {
                    const auto iy = std::ptrdiff_t(oy * stride + ky) - std::ptrdiff_t(pad);
                    if (iy < 0 || iy >= std::ptrdiff_t(H)) continue;
                    for (std::size_t ox = 0; ox < Wo; ++ox) {
                        T acc = T(0);
                        for (std::size_t kx = 0; kx < k; ++kx) {
                            const auto ix = std::ptrdiff_t(ox * stride + kx) - std::ptrdiff_t(pad);
                            if (ix < 0 || ix >= std::ptrdiff_t(W)) continue;
                            acc += wk[ky * k + kx] * xin[std::size_t(iy) * W + std::size_t(ix)];
                        }
                        plane[oy * Wo + ox] += acc;
                    }
                }
        }
    }
    auto xn = x.node(), wn = weight.node(), bn = bias.node();
    return make_op<T>(
        "conv2d", Shape{O, Ho, Wo}, std::move(out), {xn, wn, bn},
        [xn, wn, bn, C, H, W, O, k, Ho, Wo, stride, pad](const TensorNode<T>& self) {
            const T* g = self.grad.data();
            T* gx = xn->requires_grad ? xn->grad_buffer().data() : nullptr;
            T* gw = wn->requires_grad ? wn->grad_buffer().data() : nullptr;
            if (bn->requires_grad) {
                auto& gb = bn->grad_buffer();
                for (std::size_t o = 0; o < O; ++o) {
                    double acc = 0.0;
                    for (std::size_t i = 0; i < Ho * Wo; ++i) acc += double(g[o * Ho * Wo + i]);
                    gb[o] += T(acc);
                }
            }
            const T* xd = xn->data.data();
            const T* wd = wn->data.data();
            for (std::size_t o = 0; o < O; ++o)
                for (std::size_t c = 0; c < C; ++c) {
                    const T* xin = xd + c * H * W;
                    const T* wk = wd + (o * C + c) * k * k;
                    for (std::size_t oy = 0; oy < Ho; ++oy)
                        for (std::size_t ky = 0; ky < k; ++ky) {
                            const auto iy = std::ptrdiff_t(oy * stride + ky) - std::ptrdiff_t(pad);
                            if (iy < 0 || iy >= std::ptrdiff_t(H)) continue;
                            for (std::size_t ox = 0; ox < Wo; ++ox) {
                                const T go = g[(o * Ho + oy) * Wo + ox];
                                if (go == T(0)) continue;
                                for (std::size_t kx = 0; kx < k; ++kx) {
                                    const auto ix = std::ptrdiff_t(ox * stride + kx) - std::ptrdiff_t(pad);
                                    if (ix < 0 || ix >= std::ptrdiff_t(W)) continue;
                                    const auto xi = std::size_t(iy) * W + std::size_t(ix);
                                    if (gw) gw[(o * C + c) * k * k + ky * k + kx] += go * xin[xi];
                                    if (gx) gx[c * H * W + xi] += go * wk[ky * k + kx];
                                }
                            }
                        }
                }
        });
}

template <typename T>
Tensor<T> avg_pool2d(const Tensor<T>& x, std::size_t k) {
    require(x.rank() == 3, "avg_pool2d: input must be [C x H x W]");
    const auto C = x.dim(0), H = x.dim(1), W = x.dim(2);
    require(k > 0 && H % k == 0 && W % k == 0, "avg_pool2d: size not divisible by kernel");
    const auto Ho = H / k, Wo = W / k;
    const T inv = T(1) / T(k * k);
    std::vector<T> out(C * Ho * Wo, T(0));
    const auto xd = x.data();
    for (std::size_t c = 0; c < C; ++c)
        for (std::size_t y = 0; y < H; ++y)
            for (std::size_t xx = 0; xx < W; ++xx) out[(c * Ho + y / k) * Wo + xx / k] += xd[(c * H + y) * W + xx] * inv;
    auto xn = x.node();
    return make_op<T>("avg_pool2d", Shape{C, Ho, Wo}, std::move(out), {xn},
                      [xn, C, H, W, Ho, Wo, k, inv](const TensorNode<T>& self) {
                          auto& g = xn->grad_buffer();
                          for (std::size_t c = 0; c < C; ++c)
                              for (std::size_t y = 0; y < H; ++y)
                                  for (std::size_t xx = 0; xx < W; ++xx)
                                      g[(c * H + y) * W + xx] += self.grad[(c * Ho + y / k) * Wo + xx / k] * inv;
                      });
}

template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
    require(x.rank() == 3, "global_avg_pool: input must be [C x H x W]");
    const auto C = x.dim(0), HW = x.dim(1) * x.dim(2);
    require(HW > 0, "global_avg_pool: empty plane");
    std::vector<T> out(C);
    const auto xd = x.data();
    for (std::size_t c = 0; c < C; ++c) {
        double acc = 0.0;
        for (std::size_t i = 0; i < HW; ++i) acc += double(xd[c * HW + i]);
        out[c] = T(acc / double(HW));
    }
    auto xn = x.node();
    return make_op<T>("global_avg_pool", Shape{1, C}, std::move(out), {xn}, [xn, C, HW](const TensorNode<T>& self) {
        auto& g = xn->grad_buffer();
        for (std::size_t c = 0; c < C; ++c) {
            const T share = T(double(self.grad[c]) / double(HW));
            for (std::size_t i = 0; i < HW; ++i) g[c * HW + i] += share;
        }
    });
}

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
    auto y = matmul(x, w);
    return add(y, expand_rows(b, y.dim(0)));
}

// ---------------------------------------------------------------------------
// explicit instantiation

#define PCD_INSTANTIATE(T)                                                                                   \
    template class Tensor<T>;                                                                                \
    template void backward<T>(const Tensor<T>&);                                                             \
    template Tensor<T> add<T>(const Tensor<T>&, const Tensor<T>&);                                           \
    template Tensor<T> sub<T>(const Tensor<T>&, const Tensor<T>&);                                           \
    template Tensor<T> mul<T>(const Tensor<T>&, const Tensor<T>&);                                           \
    template Tensor<T> add_scalar<T>(const Tensor<T>&, T);                                                   \
    template Tensor<T> scale<T>(const Tensor<T>&, T);                                                        \
    template Tensor<T> relu<T>(const Tensor<T>&);                                                            \
    template Tensor<T> sigmoid<T>(const Tensor<T>&);                                                         \
    template Tensor<T> acosh1p<T>(const Tensor<T>&);                                                         \
    template Tensor<T> sum<T>(const Tensor<T>&);                                                             \
    template Tensor<T> mean<T>(const Tensor<T>&);                                                            \
    template Tensor<T> sum<T>(const Tensor<T>&, std::size_t);                                                \
    template Tensor<T> mean<T>(const Tensor<T>&, std::size_t);                                               \
    template Tensor<T> segment_max<T>(const Tensor<T>&, std::span<const std::size_t>);                       \
    template Tensor<T> matmul<T>(const Tensor<T>&, const Tensor<T>&);                                        \
    template Tensor<T> transpose<T>(const Tensor<T>&);                                                       \
    template Tensor<T> reshape<T>(const Tensor<T>&, Shape);                                                  \
    template Tensor<T> concat<T>(std::span<const Tensor<T>>, std::size_t);                                   \
    template Tensor<T> concat<T>(std::initializer_list<Tensor<T>>, std::size_t);                             \
    template Tensor<T> slice_cols<T>(const Tensor<T>&, std::size_t, std::size_t);                            \
    template Tensor<T> expand_rows<T>(const Tensor<T>&, std::size_t);                                        \
    template Tensor<T> gather_rows<T>(const Tensor<T>&, std::span<const std::size_t>);                       \
    template Tensor<T> softmax<T>(const Tensor<T>&, std::size_t);                                            \
    template Tensor<T> layer_norm<T>(const Tensor<T>&, T);                                                   \
    template Tensor<T> bce_with_logits<T>(const Tensor<T>&, std::span<const T>);                             \
    template Tensor<T> conv2d<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, std::size_t,          \
                                 std::size_t);                                                               \
    template Tensor<T> avg_pool2d<T>(const Tensor<T>&, std::size_t);                                         \
    template Tensor<T> global_avg_pool<T>(const Tensor<T>&);                                                 \
    template Tensor<T> linear<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);

PCD_INSTANTIATE(float)
PCD_INSTANTIATE(double)

#undef PCD_INSTANTIATE

}  // namespace pcd
