#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "rged/errors.hpp"
#include "rged/rng.hpp"

namespace rged {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '(';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << ')';
    return os.str();
}

namespace detail {

struct Node {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;
    bool requires_grad = false;
    bool leaf = true;
    bool consumed = false;
    std::uint64_t seq = 0;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward;

    std::span<double> grad_buffer() {
        if (grad.empty()) grad.assign(data.size(), 0.0);
        return grad;
    }
};

using NodePtr = std::shared_ptr<Node>;

inline std::uint64_t next_sequence() {
    static std::atomic<std::uint64_t> counter{0};
    return ++counter;
}

} // namespace detail

/// Dense row-major tensor of doubles. Copies share storage; use clone()
/// or detach() for an independent value. Operations on tensors that
/// require gradients record themselves into a graph that backward() replays
/// in exact reverse execution order.
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(Shape shape, double fill = 0.0) : node_(std::make_shared<detail::Node>()) {
        node_->data.assign(shape_numel(shape), fill);
        node_->shape = std::move(shape);
        node_->seq = detail::next_sequence();
    }

    Tensor(Shape shape, std::vector<double> data) : node_(std::make_shared<detail::Node>()) {
        if (data.size() != shape_numel(shape)) {
            throw DimensionError("tensor data length " + std::to_string(data.size()) +
                                 " does not match shape " + shape_str(shape));
        }
        node_->shape = std::move(shape);
        node_->data = std::move(data);
        node_->seq = detail::next_sequence();
    }

    static Tensor scalar(double v) { return Tensor(Shape{}, std::vector<double>{v}); }

    static Tensor vector(std::vector<double> v) {
        const std::size_t n = v.size();
        return Tensor(Shape{n}, std::move(v));
    }

    static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows) {
        const std::size_t r = rows.size();
        const std::size_t c = r ? rows.begin()->size() : 0;
        std::vector<double> data;
        data.reserve(r * c);
        for (const auto& row : rows) {
            if (row.size() != c) throw DimensionError("ragged matrix literal");
            data.insert(data.end(), row.begin(), row.end());
        }
        return Tensor(Shape{r, c}, std::move(data));
    }

    static Tensor randn(Shape shape, Rng& rng, double stddev = 1.0) {
        Tensor t(std::move(shape));
        for (double& v : t.node_->data) v = stddev * rng.normal();
        return t;
    }

    static Tensor uniform(Shape shape, Rng& rng, double lo, double hi) {
        Tensor t(std::move(shape));
        for (double& v : t.node_->data) v = rng.uniform(lo, hi);
        return t;
    }

    bool defined() const noexcept { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
    std::size_t numel() const { return node_->data.size(); }

    std::span<const double> data() const { return node_->data; }

    /// Writable storage; only leaves may be written, graph nodes are values.
    std::span<double> mutable_data() {
        if (!node_->leaf) throw ContractError("cannot mutate a tensor produced by a recorded operation");
        return node_->data;
    }

    double operator[](std::size_t i) const { return node_->data[i]; }
    double at(std::size_t r, std::size_t c) const { return node_->data[r * node_->shape.at(1) + c]; }

    double item() const {
        if (numel() != 1) throw DimensionError("item() on tensor of shape " + shape_str(shape()));
        return node_->data[0];
    }

    bool requires_grad() const { return node_ && node_->requires_grad; }

    Tensor& set_requires_grad(bool on) {
        if (!node_->leaf) throw ContractError("requires_grad can only be set on leaf tensors");
        node_->requires_grad = on;
        if (on) {
            node_->grad.assign(node_->data.size(), 0.0);
        } else {
            node_->grad.clear();
        }
        return *this;
    }

    bool has_grad() const { return node_ && !node_->grad.empty(); }
    std::span<const double> grad() const { return node_->grad; }
    std::span<double> mutable_grad() { return node_->grad; }

    void zero_grad() {
        if (node_->requires_grad) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
    }

    /// Independent leaf holding a copy of the values.
    Tensor detach() const { return Tensor(shape(), node_->data); }

    Tensor clone() const {
        Tensor t = detach();
        if (requires_grad() && node_->leaf) t.set_requires_grad(true);
        return t;
    }

    const detail::NodePtr& node() const { return node_; }

private:
    detail::NodePtr node_;
};

namespace detail {

inline void check_finite(const std::vector<double>& data, const char* op) {
    for (double v : data) {
        if (!std::isfinite(v)) throw NumericError(std::string("non-finite value produced by ") + op);
    }
}

/// Wraps freshly computed values as an operation result. When any input
/// requires gradients the result joins the graph with `backward` as its
/// local vector-Jacobian product.
inline Tensor make_result(const char* op, Shape shape, std::vector<double> data,
                          const std::vector<const Tensor*>& inputs, std::function<void(Node&)> backward) {
    check_finite(data, op);
    Tensor out(std::move(shape), std::move(data));
    bool needs = false;
    for (const Tensor* in : inputs) needs = needs || in->requires_grad();
    if (needs) {
        Node& n = *out.node();
        n.requires_grad = true;
        n.leaf = false;
        for (const Tensor* in : inputs) {
            if (in->requires_grad()) n.parents.push_back(in->node());
        }
        n.backward = std::move(backward);
    }
    return out;
}

inline Tensor make_result(const char* op, Shape shape, std::vector<double> data,
                          std::initializer_list<const Tensor*> inputs, std::function<void(Node&)> backward) {
    return make_result(op, std::move(shape), std::move(data), std::vector<const Tensor*>(inputs), std::move(backward));
}

/// Gradient accumulator for an input, or an empty span when that input
/// does not participate in differentiation.
inline std::span<double> grad_of(const NodePtr& node) {
    if (!node->requires_grad) return {};
    return node->grad_buffer();
}

} // namespace detail

/// Reverse-mode sweep from a scalar loss. Accumulates into every reachable
/// leaf that requires gradients and consumes the graph: a second call on the
/// same graph is a contract error.
inline void backward(const Tensor& loss) {
    using detail::Node;
    if (!loss.defined() || loss.numel() != 1) {
        throw ContractError("backward requires a scalar loss");
    }
    Node* root = loss.node().get();
    if (root->consumed) throw ContractError("backward called twice on the same graph");
    if (!root->requires_grad) throw ContractError("loss is not connected to any tensor requiring gradients");

    // Owning handles: releasing a closure below may drop the last other
    // reference to a node that is still in this list.
    std::vector<detail::NodePtr> order;
    std::unordered_set<Node*> seen;
    std::vector<detail::NodePtr> stack{loss.node()};
    seen.insert(root);
    while (!stack.empty()) {
        detail::NodePtr n = std::move(stack.back());
        stack.pop_back();
        if (n->consumed) throw ContractError("graph shares nodes with an already consumed graph");
        for (const auto& p : n->parents) {
            if (seen.insert(p.get()).second) stack.push_back(p);
        }
        order.push_back(std::move(n));
    }
    std::sort(order.begin(), order.end(), [](const auto& a, const auto& b) { return a->seq > b->seq; });

    root->grad_buffer()[0] += 1.0;
    for (const auto& n : order) {
        if (n->leaf || !n->backward || n->grad.empty()) continue;
        n->backward(*n);
    }
    for (const auto& n : order) {
        if (n->leaf) continue;
        n->backward = nullptr;
        n->parents.clear();
        n->grad.clear();
        n->grad.shrink_to_fit();
        n->consumed = true;
    }
}

} // namespace rged
