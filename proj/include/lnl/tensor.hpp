#ifndef LNL_TENSOR_HPP
#define LNL_TENSOR_HPP

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

namespace lnl {

class ShapeError : public std::invalid_argument {
  public:
    using std::invalid_argument::invalid_argument;
};

class DomainError : public std::domain_error {
  public:
    using std::domain_error::domain_error;
};

class AutogradError : public std::logic_error {
  public:
    using std::logic_error::logic_error;
};

class FormatError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ", ";
        os << shape[i];
    }
    os << ']';
    return os.str();
}

namespace detail {

struct Node;

struct TensorImpl {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;  // empty when absent
    bool requires_grad = false;
    std::shared_ptr<Node> grad_fn;
};

// grad_in[i] is null when input i does not need a gradient; otherwise the
// backward rule accumulates (+=) into it.
using GradBuffers = std::span<std::vector<double>* const>;
using BackwardFn = std::function<void(std::span<const double> out, std::span<const double> grad_out,
                                      GradBuffers grad_in)>;

struct Node {
    const char* op = "";
    std::vector<std::shared_ptr<TensorImpl>> inputs;
    BackwardFn backward;
};

inline bool& grad_mode() {
    thread_local bool enabled = true;
    return enabled;
}

}  // namespace detail

/// Disables tape recording on the current thread for its lifetime.
class NoGradGuard {
  public:
    NoGradGuard() : previous_(detail::grad_mode()) { detail::grad_mode() = false; }
    ~NoGradGuard() { detail::grad_mode() = previous_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

  private:
    bool previous_;
};

/**
 * Dense row-major tensor of doubles.
 *
 * A Tensor is a cheap handle; copies share the same storage. Values are
 * immutable once produced by an op. Leaves (parameters, inputs) may be
 * written through mutable_data(), which is how optimizers update weights.
 */
class Tensor {
  public:
    Tensor() = default;

    Tensor(Shape shape, std::vector<double> data, bool requires_grad = false)
        : impl_(std::make_shared<detail::TensorImpl>()) {
        if (shape_numel(shape) != data.size()) {
            throw ShapeError("tensor data length " + std::to_string(data.size()) +
                             " does not match shape " + shape_str(shape));
        }
        for (auto extent : shape) {
            if (extent == 0) throw ShapeError("tensor extents must be positive, got " + shape_str(shape));
        }
        for (double v : data) {
            if (!std::isfinite(v)) throw DomainError("tensor data must be finite");
        }
        impl_->shape = std::move(shape);
        impl_->data = std::move(data);
        impl_->requires_grad = requires_grad;
    }

    static Tensor full(Shape shape, double value, bool requires_grad = false) {
        auto n = shape_numel(shape);
        return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
    }
    static Tensor zeros(Shape shape, bool requires_grad = false) { return full(std::move(shape), 0.0, requires_grad); }
    static Tensor ones(Shape shape, bool requires_grad = false) { return full(std::move(shape), 1.0, requires_grad); }
    static Tensor scalar(double value, bool requires_grad = false) { return Tensor({}, {value}, requires_grad); }

    static Tensor from_impl(std::shared_ptr<detail::TensorImpl> impl) {
        Tensor t;
        t.impl_ = std::move(impl);
        return t;
    }

    bool defined() const { return static_cast<bool>(impl_); }
    explicit operator bool() const { return defined(); }

    const Shape& shape() const { return impl_->shape; }
    std::size_t rank() const { return impl_->shape.size(); }
    std::size_t numel() const { return impl_->data.size(); }

    std::size_t dim(int axis) const {
        auto r = static_cast<int>(rank());
        if (axis < 0) axis += r;
        if (axis < 0 || axis >= r) {
            throw ShapeError("axis " + std::to_string(axis) + " out of range for shape " + shape_str(shape()));
        }
        return impl_->shape[static_cast<std::size_t>(axis)];
    }

    std::span<const double> data() const { return impl_->data; }

    std::span<double> mutable_data() {
        if (impl_->grad_fn) throw AutogradError("mutable_data() is only available on leaf tensors");
        return impl_->data;
    }

    double item() const {
        if (numel() != 1) throw ShapeError("item() needs a single-element tensor, got " + shape_str(shape()));
        return impl_->data[0];
    }

    double operator[](std::size_t flat) const { return impl_->data.at(flat); }

    double at(std::initializer_list<std::size_t> index) const {
        if (index.size() != rank()) throw ShapeError("index rank mismatch for shape " + shape_str(shape()));
        std::size_t flat = 0;
        std::size_t axis = 0;
        for (auto i : index) {
            if (i >= impl_->shape[axis]) throw ShapeError("index out of range for shape " + shape_str(shape()));
            flat = flat * impl_->shape[axis] + i;
            ++axis;
        }
        return impl_->data[flat];
    }

    bool requires_grad() const { return impl_->requires_grad; }
    Tensor& set_requires_grad(bool on) {
        if (impl_->grad_fn && !on) throw AutogradError("cannot clear requires_grad on a non-leaf tensor");
        impl_->requires_grad = on;
        return *this;
    }
    bool is_leaf() const { return !impl_->grad_fn; }

    bool has_grad() const { return !impl_->grad.empty(); }
    std::span<const double> grad() const {
        if (!has_grad()) throw AutogradError("tensor has no gradient");
        return impl_->grad;
    }
    std::span<double> mutable_grad() {
        if (!has_grad()) throw AutogradError("tensor has no gradient");
        return impl_->grad;
    }
    void zero_grad() { impl_->grad.clear(); }

    /// Copy of the values with no tape history.
    Tensor detach() const { return Tensor(impl_->shape, impl_->data, false); }

    const std::shared_ptr<detail::TensorImpl>& impl() const { return impl_; }
    const detail::TensorImpl* id() const { return impl_.get(); }

  private:
    std::shared_ptr<detail::TensorImpl> impl_;
};

namespace detail {

inline void check_finite(std::span<const double> values, const char* op) {
    for (double v : values) {
        if (!std::isfinite(v)) throw DomainError(std::string(op) + ": produced a non-finite value");
    }
}

/// Wraps an op's output and records it on the tape when any input needs a gradient.
inline Tensor make_result(Shape shape, std::vector<double> data, const char* op, std::vector<Tensor> inputs,
                          BackwardFn backward) {
    check_finite(data, op);
    Tensor out(std::move(shape), std::move(data));
    bool needs = grad_mode() && std::any_of(inputs.begin(), inputs.end(), [](const Tensor& t) {
                     return t.defined() && t.requires_grad();
                 });
    if (needs) {
        auto node = std::make_shared<Node>();
        node->op = op;
        node->inputs.reserve(inputs.size());
        for (auto& t : inputs) node->inputs.push_back(t.impl());
        node->backward = std::move(backward);
        out.impl()->requires_grad = true;
        out.impl()->grad_fn = std::move(node);
    }
    return out;
}

}  // namespace detail

/**
 * Topologically ordered list of the recorded op nodes reachable from a root.
 * Every node appears after all of its inputs and exactly once.
 */
class Tape {
  public:
    static Tape record(const Tensor& root) {
        Tape tape;
        if (!root.defined() || !root.impl()->grad_fn) return tape;
        std::unordered_set<const detail::TensorImpl*> visited;
        // iterative post-order DFS
        std::vector<std::pair<detail::TensorImpl*, std::size_t>> stack;
        stack.emplace_back(root.impl().get(), 0);
        visited.insert(root.impl().get());
        while (!stack.empty()) {
            auto& [impl, next] = stack.back();
            const auto& inputs = impl->grad_fn->inputs;
            if (next < inputs.size()) {
                auto* child = inputs[next++].get();
                if (child && child->grad_fn && visited.insert(child).second) stack.emplace_back(child, 0);
            } else {
                tape.nodes_.push_back(impl);
                stack.pop_back();
            }
        }
        return tape;
    }

    const std::vector<detail::TensorImpl*>& nodes() const { return nodes_; }
    std::size_t size() const { return nodes_.size(); }

    /**
     * Reverse sweep seeded with d(root)/d(root) = 1. `wanted` decides which
     * leaves receive a gradient; the returned map holds their buffers.
     */
    std::unordered_map<const detail::TensorImpl*, std::vector<double>> sweep(
        const Tensor& root, const std::function<bool(const detail::TensorImpl*)>& wanted) const {
        std::unordered_map<const detail::TensorImpl*, std::vector<double>> grads;
        std::unordered_map<const detail::TensorImpl*, std::vector<double>> leaf_grads;

        // A node input needs a gradient only when it leads to a wanted leaf.
        std::unordered_set<const detail::TensorImpl*> reaches;
        for (auto* impl : nodes_) {
            for (const auto& in : impl->grad_fn->inputs) {
                if (!in || !in->requires_grad) continue;
                if (in->grad_fn ? reaches.count(in.get()) > 0 : wanted(in.get())) {
                    reaches.insert(impl);
                    break;
                }
            }
        }

        grads[root.id()] = std::vector<double>(root.numel(), 1.0);
        std::vector<std::vector<double>*> buffers;
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
            auto* impl = *it;
            auto found = grads.find(impl);
            if (found == grads.end()) continue;
            std::vector<double> grad_out = std::move(found->second);
            grads.erase(found);
            if (!reaches.count(impl)) continue;

            const auto& inputs = impl->grad_fn->inputs;
            buffers.assign(inputs.size(), nullptr);
            for (std::size_t i = 0; i < inputs.size(); ++i) {
                const auto& in = inputs[i];
                if (!in || !in->requires_grad) continue;
                bool need = in->grad_fn ? reaches.count(in.get()) > 0 : wanted(in.get());
                if (!need) continue;
                auto& store = in->grad_fn ? grads : leaf_grads;
                auto& buf = store[in.get()];
                if (buf.empty()) buf.assign(in->data.size(), 0.0);
                buffers[i] = &buf;
            }
            impl->grad_fn->backward(impl->data, grad_out, buffers);
        }
        return leaf_grads;
    }

  private:
    std::vector<detail::TensorImpl*> nodes_;
};

namespace detail {
inline void check_loss(const Tensor& loss) {
    if (!loss.defined()) throw AutogradError("backward on an undefined tensor");
    if (loss.numel() != 1) throw AutogradError("backward needs a scalar loss, got shape " + shape_str(loss.shape()));
    if (!loss.requires_grad()) throw AutogradError("backward on a loss that is not on the tape");
}
}  // namespace detail

/// Accumulates d(loss)/d(leaf) into every requires_grad leaf reachable from loss.
inline void backward(const Tensor& loss) {
    detail::check_loss(loss);
    if (loss.is_leaf()) {
        auto& g = loss.impl()->grad;
        if (g.empty()) g.assign(1, 0.0);
        g[0] += 1.0;
        return;
    }
    auto tape = Tape::record(loss);
    auto leaf_grads = tape.sweep(loss, [](const detail::TensorImpl*) { return true; });
    for (auto* impl : tape.nodes()) {
        for (const auto& in : impl->grad_fn->inputs) {
            if (!in || in->grad_fn || !in->requires_grad) continue;
            auto found = leaf_grads.find(in.get());
            if (found == leaf_grads.end()) continue;
            auto& g = in->grad;
            if (g.empty()) {
                g = std::move(found->second);
            } else {
                for (std::size_t k = 0; k < g.size(); ++k) g[k] += found->second[k];
            }
            leaf_grads.erase(found);
        }
    }
}

/// d(loss)/d(wrt) for a single leaf, leaving every stored .grad untouched.
inline Tensor grad(const Tensor& loss, const Tensor& wrt) {
    detail::check_loss(loss);
    if (!wrt.is_leaf() || !wrt.requires_grad()) throw AutogradError("grad() target must be a requires_grad leaf");
    if (loss.id() == wrt.id()) return Tensor::ones(wrt.shape());
    auto tape = Tape::record(loss);
    const auto* target = wrt.id();
    auto leaf_grads = tape.sweep(loss, [target](const detail::TensorImpl* t) { return t == target; });
    auto found = leaf_grads.find(target);
    if (found == leaf_grads.end()) return Tensor::zeros(wrt.shape());
    return Tensor(wrt.shape(), std::move(found->second));
}

}  // namespace lnl

#endif
