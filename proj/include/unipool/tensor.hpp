#pragma once

// Dense 64-bit tensors with reverse-mode autodiff.
//
// A Tensor is a handle to an immutable-by-default node in a computation
// graph. Ops (ops.hpp) build fresh nodes; nothing aliases another tensor's
// storage through the public interface — slicing/reshape copy. Gradients
// accumulate into leaf nodes on backward(); parameters never reached by a
// graph keep exact-zero gradients. One backward pass per forward pass:
// running backward through an already-consumed interior node throws.

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "unipool/common.hpp"

namespace unipool {

using Shape = std::vector<int>;

int64_t numel_of(const Shape& s);
std::string shape_str(const Shape& s);

namespace detail {

struct Node {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;  // allocated lazily; leaves keep it across steps
    bool tracked = false;      // participates in a graph
    bool leaf = true;
    bool consumed = false;     // interior node already swept by backward
    const char* op = "leaf";
    std::vector<std::shared_ptr<Node>> parents;
    // Reads this->grad, accumulates into parents' grad buffers.
    std::function<void()> backprop;

    void ensure_grad() {
        if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
    }
};

}  // namespace detail

// Thread-local switch: while a NoGradGuard is alive, ops skip graph edges
// entirely (pure evaluation, cheap). Probe threads each carry their own.
bool grad_mode();

class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool saved_;
};

class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape);
    static Tensor full(Shape shape, double value);
    static Tensor scalar(double value);
    static Tensor from_data(Shape shape, std::vector<double> values);
    // Leaf with requires_grad set: a trainable parameter.
    static Tensor param(Shape shape, std::vector<double> values);

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const;
    int dim(int i) const;
    int64_t numel() const;
    const std::vector<double>& data() const;
    double item() const;  // single-element tensors only

    bool requires_grad() const;
    bool is_leaf() const;
    const char* op() const;
    const std::vector<double>& grad() const;  // zeros if never reached
    void zero_grad();

    // Independent deep copy, detached from any graph.
    Tensor clone() const;
    // Same values, no graph edges (stops gradient).
    Tensor detach() const;

    // Mutable access for initialization and optimizer updates only; throws
    // on interior graph nodes so forward results stay immutable.
    std::vector<double>& mutable_data();

    // Identity of the underlying storage; lets registries assert that a
    // shared expert appears exactly once.
    const void* id() const { return node_.get(); }

    friend void backward(const Tensor& loss);
    friend class OpCtx;

private:
    explicit Tensor(std::shared_ptr<detail::Node> n) : node_(std::move(n)) {}
    std::shared_ptr<detail::Node> node_;
};

// Reverse-mode sweep from a scalar loss. Accumulates into leaf grads.
void backward(const Tensor& loss);

// Helper for defining ops: wires shapes, tracking flags and the backprop
// closure in one place. Used by ops.cpp only, public for testability.
class OpCtx {
public:
    OpCtx(const char* name, std::initializer_list<Tensor> inputs);

    bool tracked() const { return tracked_; }
    // Build the output node. `backprop` sees raw node pointers: out first,
    // then parents in input order. Only installed when tracking.
    Tensor make(Shape shape, std::vector<double> data,
                std::function<void(detail::Node* out,
                                   const std::vector<detail::Node*>& parents)>
                    backprop = nullptr);

    static void check_finite(const char* op, const Tensor& t);

private:
    const char* name_;
    std::vector<std::shared_ptr<detail::Node>> parents_;
    bool tracked_ = false;
};

}  // namespace unipool
