#include "medmamba/tensor.hpp"

#include "medmamba/errors.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_set>

namespace medmamba {

namespace {

thread_local bool t_grad_enabled = true;
std::atomic<bool> g_finite_checks{false};

std::string& fault_op() {
    static std::string op;
    return op;
}

} // namespace

std::int64_t shape_numel(const Shape& shape) {
    std::int64_t n = 1;
    for (auto e : shape) {
        if (e <= 0) {
            throw DimensionError("non-positive extent in shape " + shape_str(shape));
        }
        n *= e;
    }
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        os << (i ? "," : "") << shape[i];
    }
    os << ']';
    return os.str();
}

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }

bool grad_enabled() { return t_grad_enabled; }

void set_finite_checks(bool on) { g_finite_checks = on; }
bool finite_checks() { return g_finite_checks; }

void set_gradient_fault(std::string op) { fault_op() = std::move(op); }

template <typename T>
Tensor<T> Tensor<T>::zeros(Shape shape) {
    return full(std::move(shape), T(0));
}

template <typename T>
Tensor<T> Tensor<T>::full(Shape shape, T value) {
    auto impl = std::make_shared<TensorImpl<T>>();
    impl->data.assign(static_cast<std::size_t>(shape_numel(shape)), value);
    impl->shape = std::move(shape);
    return Tensor(std::move(impl));
}

template <typename T>
Tensor<T> Tensor<T>::from(Shape shape, std::vector<T> values) {
    if (shape_numel(shape) != static_cast<std::int64_t>(values.size())) {
        throw DimensionError("shape " + shape_str(shape) + " does not match " + std::to_string(values.size()) +
                             " values");
    }
    auto impl = std::make_shared<TensorImpl<T>>();
    impl->shape = std::move(shape);
    impl->data = std::move(values);
    return Tensor(std::move(impl));
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T value) {
    return from({1}, {value});
}

template <typename T>
const Shape& Tensor<T>::shape() const {
    if (!impl_) {
        throw StateError("use of an undefined tensor");
    }
    return impl_->shape;
}

template <typename T>
std::int64_t Tensor<T>::dim(int axis) const {
    const auto& s = shape();
    const int r = static_cast<int>(s.size());
    if (axis < 0) {
        axis += r;
    }
    if (axis < 0 || axis >= r) {
        throw DimensionError("axis " + std::to_string(axis) + " out of range for " + shape_str(s));
    }
    return s[static_cast<std::size_t>(axis)];
}

template <typename T>
T Tensor<T>::item() const {
    if (numel() != 1) {
        throw DimensionError("item() on tensor of shape " + shape_str(shape()));
    }
    return impl_->data[0];
}

template <typename T>
T Tensor<T>::at(std::initializer_list<std::int64_t> index) const {
    const auto& s = shape();
    if (index.size() != s.size()) {
        throw DimensionError("index rank mismatch for " + shape_str(s));
    }
    std::int64_t flat = 0;
    std::size_t i = 0;
    for (auto v : index) {
        if (v < 0 || v >= s[i]) {
            throw DimensionError("index out of range for " + shape_str(s));
        }
        flat = flat * s[i] + v;
        ++i;
    }
    return impl_->data[static_cast<std::size_t>(flat)];
}

template <typename T>
Tensor<T>& Tensor<T>::set_requires_grad(bool on) {
    impl_->requires_grad = on;
    if (on) {
        impl_->grad_span();
    } else {
        impl_->grad.clear();
    }
    return *this;
}

template <typename T>
void Tensor<T>::zero_grad() {
    if (impl_ && !impl_->grad.empty()) {
        std::fill(impl_->grad.begin(), impl_->grad.end(), T(0));
    }
}

template <typename T>
std::string Tensor<T>::op_name() const {
    return impl_ && impl_->node ? impl_->node->op : std::string();
}

template <typename T>
Tensor<T> Tensor<T>::clone() const {
    return from(shape(), impl_->data);
}

template <typename T>
void Tensor<T>::backward() const {
    if (!impl_ || !impl_->requires_grad) {
        throw StateError("backward() called on a tensor that does not track gradients");
    }
    if (impl_->data.size() != 1) {
        throw StateError("backward() requires a scalar, got shape " + shape_str(impl_->shape));
    }

    // Iterative post-order DFS gives a topological order of the tape.
    std::vector<TensorImpl<T>*> order;
    std::unordered_set<TensorImpl<T>*> visited;
    std::vector<std::pair<TensorImpl<T>*, std::size_t>> stack;
    stack.emplace_back(impl_.get(), 0);
    visited.insert(impl_.get());
    while (!stack.empty()) {
        auto& [t, next] = stack.back();
        if (t->node && next < t->node->inputs.size()) {
            TensorImpl<T>* child = t->node->inputs[next++].get();
            if (child->requires_grad && visited.insert(child).second) {
                stack.emplace_back(child, 0);
            }
            continue;
        }
        order.push_back(t);
        stack.pop_back();
    }

    for (auto* t : order) {
        if (t->node) {
            t->grad.assign(t->data.size(), T(0));
        }
    }
    impl_->grad_span()[0] += T(1);

    const std::string& fault = fault_op();
    std::vector<T> faulty;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        TensorImpl<T>* t = *it;
        if (!t->node) {
            continue;
        }
        std::span<const T> g = t->grad;
        if (!fault.empty() && t->node->op == fault) {
            faulty.assign(g.begin(), g.end());
            for (auto& v : faulty) {
                v *= T(1.5);
            }
            g = faulty;
        }
        t->node->backward(g, t->node->inputs);
    }
}

namespace detail {

template <typename T>
bool needs_tape(std::initializer_list<const Tensor<T>*> inputs) {
    if (!t_grad_enabled) {
        return false;
    }
    return std::any_of(inputs.begin(), inputs.end(), [](const Tensor<T>* t) { return t && t->requires_grad(); });
}

template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> data, const char* op, std::vector<Tensor<T>> inputs,
                      typename TapeNode<T>::BackwardFn backward) {
    if (g_finite_checks) {
        for (const T v : data) {
            if (!std::isfinite(v)) {
                throw DomainError(std::string("non-finite value produced by ") + op);
            }
        }
    }
    auto out = Tensor<T>::from(std::move(shape), std::move(data));
    if (!t_grad_enabled || !backward) {
        return out;
    }
    const bool tracked =
        std::any_of(inputs.begin(), inputs.end(), [](const Tensor<T>& t) { return t.requires_grad(); });
    if (!tracked) {
        return out;
    }
    auto node = std::make_shared<TapeNode<T>>();
    node->op = op;
    node->inputs.reserve(inputs.size());
    for (auto& in : inputs) {
        node->inputs.push_back(in.impl());
    }
    node->backward = std::move(backward);
    out.impl()->node = std::move(node);
    out.impl()->requires_grad = true;
    return out;
}

template Tensor<float> make_result(Shape, std::vector<float>, const char*, std::vector<Tensor<float>>,
                                   TapeNode<float>::BackwardFn);
template Tensor<double> make_result(Shape, std::vector<double>, const char*, std::vector<Tensor<double>>,
                                    TapeNode<double>::BackwardFn);
template bool needs_tape(std::initializer_list<const Tensor<float>*>);
template bool needs_tape(std::initializer_list<const Tensor<double>*>);

} // namespace detail

template class Tensor<float>;
template class Tensor<double>;

} // namespace medmamba
