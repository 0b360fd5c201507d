#pragma once

// Dense row-major tensors with a tape-free reverse-mode autodiff: every op
// records its inputs and a backward closure on the result node, and
// backward() walks the resulting DAG in reverse topological order. The graph
// of interior nodes is released once backward() has run.
//
// Broadcasting is deliberately absent apart from scalar-with-tensor ops; use
// expand_rows() to tile a row vector explicitly.

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "pcd/common.hpp"

namespace pcd {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

template <typename T>
struct TensorNode {
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad;  // empty until first accumulation
    bool requires_grad = false;
    const char* op = "leaf";
    std::vector<std::shared_ptr<TensorNode>> parents;
    std::function<void(const TensorNode&)> backward_fn;

    void accumulate_grad(std::size_t i, T g) {
        if (grad.empty()) grad.assign(data.size(), T(0));
        grad[i] += g;
    }
    std::vector<T>& grad_buffer() {
        if (grad.empty()) grad.assign(data.size(), T(0));
        return grad;
    }
};

template <typename T>
class Tensor {
public:
    using Node = TensorNode<T>;

    Tensor() = default;
    explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

    static Tensor from(Shape shape, std::vector<T> data, bool requires_grad = false);
    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, T value, bool requires_grad = false);
    static Tensor scalar(T value, bool requires_grad = false);

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
    std::size_t numel() const { return node_->data.size(); }
    std::span<const T> data() const { return node_->data; }
    // Mutable access is for leaves only (parameter init, optimizer updates).
    std::span<T> mutable_data();
    T item() const;
    T at(std::size_t r, std::size_t c) const { return node_->data[r * dim(1) + c]; }

    bool requires_grad() const { return node_->requires_grad; }
    bool has_grad() const { return !node_->grad.empty(); }
    std::span<const T> grad() const { return node_->grad; }
    std::span<T> mutable_grad() { return node_->grad_buffer(); }
    void zero_grad() { node_->grad.clear(); }
    bool is_leaf() const { return node_->parents.empty() && !node_->backward_fn; }
    const char* op() const { return node_->op; }

    /// Same data, cut from the graph.
    Tensor detach() const;
    /// Deep copy of data into a fresh leaf.
    Tensor clone(bool requires_grad = false) const;

    const std::shared_ptr<Node>& node() const { return node_; }

private:
    std::shared_ptr<Node> node_;
};

/// While alive, ops on this thread do not record the graph.
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};
bool grad_enabled();

/// Accumulates d(loss)/d(leaf) into every reachable leaf that requires grad.
/// Throws ShapeError on a non-scalar loss and std::logic_error on a cycle.
template <typename T>
void backward(const Tensor<T>& loss);

// ---- elementwise ----------------------------------------------------------
template <typename T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> add_scalar(const Tensor<T>& a, T s);
template <typename T> Tensor<T> scale(const Tensor<T>& a, T s);
template <typename T> Tensor<T> relu(const Tensor<T>& a);
template <typename T> Tensor<T> sigmoid(const Tensor<T>& a);
/// arcosh(1 + x) for x >= 0; the derivative is capped near x = 0.
template <typename T> Tensor<T> acosh1p(const Tensor<T>& a);

// ---- reductions -----------------------------------------------------------
template <typename T> Tensor<T> sum(const Tensor<T>& a);
template <typename T> Tensor<T> mean(const Tensor<T>& a);
/// 2-D reduction keeping the reduced axis: axis 0 -> [1 x d], axis 1 -> [n x 1].
template <typename T> Tensor<T> sum(const Tensor<T>& a, std::size_t axis);
template <typename T> Tensor<T> mean(const Tensor<T>& a, std::size_t axis);
/// Row-wise max over consecutive row segments; starts[0] must be 0 and
/// segments must be nonempty. Output has one row per segment.
template <typename T>
Tensor<T> segment_max(const Tensor<T>& a, std::span<const std::size_t> starts);

// ---- linear algebra / layout ---------------------------------------------
template <typename T> Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> transpose(const Tensor<T>& a);
template <typename T> Tensor<T> reshape(const Tensor<T>& a, Shape shape);
/// 2-D concatenation along axis 0 (rows) or 1 (columns).
template <typename T>
Tensor<T> concat(std::span<const Tensor<T>> parts, std::size_t axis);
template <typename T>
Tensor<T> concat(std::initializer_list<Tensor<T>> parts, std::size_t axis);
template <typename T> Tensor<T> slice_cols(const Tensor<T>& a, std::size_t start, std::size_t len);
/// [1 x d] -> [n x d]
template <typename T> Tensor<T> expand_rows(const Tensor<T>& a, std::size_t n);
template <typename T>
Tensor<T> gather_rows(const Tensor<T>& a, std::span<const std::size_t> index);

// ---- attention helpers ----------------------------------------------------
template <typename T> Tensor<T> softmax(const Tensor<T>& a, std::size_t axis);
/// Per-row standardisation (no affine part).
template <typename T> Tensor<T> layer_norm(const Tensor<T>& a, T eps = T(1e-5));
/// Mean binary cross-entropy computed from logits.
template <typename T>
Tensor<T> bce_with_logits(const Tensor<T>& logits, std::span<const T> targets);

// ---- image ops ([C x H x W]) ----------------------------------------------
/// weight [O x C x k x k], bias [O]; zero padding.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias,
                 std::size_t stride, std::size_t pad);
/// Non-overlapping k x k average pooling; H and W must be multiples of k.
template <typename T> Tensor<T> avg_pool2d(const Tensor<T>& x, std::size_t k);
/// [C x H x W] -> [1 x C]
template <typename T> Tensor<T> global_avg_pool(const Tensor<T>& x);

// ---- composites -----------------------------------------------------------
/// x [n x in] * w [in x out] + b [1 x out]
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b);

}  // namespace pcd
