#include "unipool/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <unordered_set>

namespace unipool {

int64_t numel_of(const Shape& s) {
    int64_t n = 1;
    for (int d : s) n *= d;
    return n;
}

std::string shape_str(const Shape& s) {
    std::string out = "(";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) out += "x";
        out += std::to_string(s[i]);
    }
    out += ")";
    return out;
}

namespace {
thread_local bool t_grad_mode = true;

std::shared_ptr<detail::Node> make_node(Shape shape, std::vector<double> data) {
    if (numel_of(shape) != static_cast<int64_t>(data.size()))
        throw ShapeError("tensor: shape " + shape_str(shape) + " wants " +
                         std::to_string(numel_of(shape)) + " values, got " +
                         std::to_string(data.size()));
    for (int d : shape)
        if (d <= 0) throw ShapeError("tensor: non-positive dim in " + shape_str(shape));
    auto n = std::make_shared<detail::Node>();
    n->shape = std::move(shape);
    n->data = std::move(data);
    return n;
}
}  // namespace

bool grad_mode() { return t_grad_mode; }

NoGradGuard::NoGradGuard() : saved_(t_grad_mode) { t_grad_mode = false; }
NoGradGuard::~NoGradGuard() { t_grad_mode = saved_; }

Tensor Tensor::zeros(Shape shape) {
    auto n = numel_of(shape);
    return Tensor(make_node(std::move(shape), std::vector<double>(n, 0.0)));
}

Tensor Tensor::full(Shape shape, double value) {
    auto n = numel_of(shape);
    return Tensor(make_node(std::move(shape), std::vector<double>(n, value)));
}

Tensor Tensor::scalar(double value) { return full({1}, value); }

Tensor Tensor::from_data(Shape shape, std::vector<double> values) {
    return Tensor(make_node(std::move(shape), std::move(values)));
}

Tensor Tensor::param(Shape shape, std::vector<double> values) {
    Tensor t = from_data(std::move(shape), std::move(values));
    t.node_->tracked = true;
    t.node_->ensure_grad();
    return t;
}

const Shape& Tensor::shape() const {
    if (!node_) throw Error("tensor: undefined handle");
    return node_->shape;
}

int Tensor::dim(int i) const { return shape().at(static_cast<size_t>(i)); }

int64_t Tensor::numel() const { return numel_of(shape()); }

const std::vector<double>& Tensor::data() const {
    if (!node_) throw Error("tensor: undefined handle");
    return node_->data;
}

double Tensor::item() const {
    if (numel() != 1) throw ShapeError("tensor: item() on shape " + shape_str(shape()));
    return node_->data[0];
}

bool Tensor::requires_grad() const { return node_ && node_->tracked; }
bool Tensor::is_leaf() const { return node_ && node_->leaf; }
const char* Tensor::op() const { return node_ ? node_->op : "undefined"; }

const std::vector<double>& Tensor::grad() const {
    if (!node_) throw Error("tensor: undefined handle");
    node_->ensure_grad();
    return node_->grad;
}

void Tensor::zero_grad() {
    if (!node_) return;
    node_->grad.assign(node_->data.size(), 0.0);
}

Tensor Tensor::clone() const {
    if (!node_) return Tensor();
    Tensor t = from_data(node_->shape, node_->data);
    return t;
}

Tensor Tensor::detach() const {
    if (!node_) return Tensor();
    return from_data(node_->shape, node_->data);
}

std::vector<double>& Tensor::mutable_data() {
    if (!node_) throw Error("tensor: undefined handle");
    if (!node_->leaf)
        throw Error(std::string("tensor: mutable_data on interior node of op '") +
                    node_->op + "'");
    return node_->data;
}

// ---------------------------------------------------------------------------
// backward

void backward(const Tensor& loss) {
    if (!loss.node_) throw Error("backward: undefined tensor");
    detail::Node* root = loss.node_.get();
    if (root->data.size() != 1)
        throw ShapeError("backward: loss must be scalar, got shape " +
                         shape_str(root->shape));
    if (root->consumed)
        throw Error("backward: graph already consumed; run a new forward pass");

    // Iterative post-order DFS for a topological order over the DAG.
    std::vector<detail::Node*> order;
    std::unordered_set<detail::Node*> seen;
    struct Frame {
        detail::Node* n;
        size_t next;
    };
    std::vector<Frame> stack{{root, 0}};
    seen.insert(root);
    while (!stack.empty()) {
        Frame& f = stack.back();
        if (f.next < f.n->parents.size()) {
            detail::Node* p = f.n->parents[f.next++].get();
            if (seen.insert(p).second) stack.push_back({p, 0});
        } else {
            order.push_back(f.n);
            stack.pop_back();
        }
    }

    for (detail::Node* n : order) {
        if (!n->leaf && n->consumed)
            throw Error(std::string("backward: node of op '") + n->op +
                        "' already consumed; run a new forward pass");
        n->ensure_grad();
        if (!n->leaf) {
            // Interior grads must start clean even if this node was produced
            // by a forward whose sibling loss was already swept.
            std::fill(n->grad.begin(), n->grad.end(), 0.0);
        }
    }
    root->grad[0] = 1.0;

    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        detail::Node* n = *it;
        if (n->backprop) n->backprop();
        if (!n->leaf) n->consumed = true;
    }
}

// ---------------------------------------------------------------------------
// OpCtx

OpCtx::OpCtx(const char* name, std::initializer_list<Tensor> inputs) : name_(name) {
    parents_.reserve(inputs.size());
    for (const Tensor& t : inputs) {
        if (!t.defined())
            throw Error(std::string(name) + ": undefined input tensor");
        if (checked_mode()) check_finite(name, t);
        parents_.push_back(t.node_);
        if (t.node_->tracked) tracked_ = true;
    }
    tracked_ = tracked_ && grad_mode();
}

Tensor OpCtx::make(Shape shape, std::vector<double> data,
                   std::function<void(detail::Node*,
                                      const std::vector<detail::Node*>&)>
                       backprop) {
    auto out = make_node(std::move(shape), std::move(data));
    out->op = name_;
    if (tracked_) {
        out->tracked = true;
        out->leaf = false;
        out->parents = parents_;
        if (backprop) {
            std::vector<detail::Node*> raw;
            raw.reserve(parents_.size());
            for (auto& p : parents_) raw.push_back(p.get());
            detail::Node* out_raw = out.get();
            out->backprop = [fn = std::move(backprop), out_raw,
                             raw = std::move(raw)]() { fn(out_raw, raw); };
        }
    }
    return Tensor(std::move(out));
}

void OpCtx::check_finite(const char* op, const Tensor& t) {
    for (double v : t.data())
        if (!std::isfinite(v))
            throw NumericError(std::string(op) + ": non-finite input value");
}

int thread_cap() {
    const char* env = std::getenv("UNIPOOL_LAB_THREADS");
    if (!env || !*env) return 1;
    char* end = nullptr;
    long v = std::strtol(env, &end, 10);
    if (end == env || *end != '\0' || v < 1)
        throw ConfigError("UNIPOOL_LAB_THREADS: expected a positive integer, got '" +
                          std::string(env) + "'");
    return static_cast<int>(v);
}

}  // namespace unipool
