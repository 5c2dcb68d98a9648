#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace medmamba {

using Shape = std::vector<std::int64_t>;

std::int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

template <typename T>
struct TensorImpl;

/// One recorded operation on the gradient tape.
template <typename T>
struct TapeNode {
    using ImplPtr = std::shared_ptr<TensorImpl<T>>;
    // Receives the gradient of the node output and the node inputs; adds the
    // input contributions into each input's grad (see TensorImpl::grad_span).
    using BackwardFn = std::function<void(std::span<const T> grad_out, std::vector<ImplPtr>& inputs)>;

    std::string op;
    std::vector<ImplPtr> inputs;
    BackwardFn backward;
};

template <typename T>
struct TensorImpl {
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad;
    bool requires_grad = false;
    std::shared_ptr<TapeNode<T>> node;

    // Grad accumulator, allocated zero-filled on first use.
    std::span<T> grad_span() {
        if (grad.size() != data.size()) {
            grad.assign(data.size(), T(0));
        }
        return grad;
    }
};

/// Dense row-major tensor with optional reverse-mode gradient tracking.
///
/// Copies share storage. Values are treated as immutable once an operation
/// has consumed them; the only sanctioned in-place writes are gradient
/// accumulation and optimizer/initializer updates through mutable_data().
template <typename T>
class Tensor {
public:
    using value_type = T;
    using ImplPtr = std::shared_ptr<TensorImpl<T>>;

    Tensor() = default;
    explicit Tensor(ImplPtr impl) : impl_(std::move(impl)) {}

    static Tensor zeros(Shape shape);
    static Tensor full(Shape shape, T value);
    static Tensor from(Shape shape, std::vector<T> values);
    static Tensor scalar(T value);

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const;
    std::int64_t dim(int axis) const;
    int rank() const { return static_cast<int>(shape().size()); }
    std::size_t numel() const { return impl_->data.size(); }

    std::span<const T> data() const { return impl_->data; }
    std::span<T> mutable_data() { return impl_->data; }
    T item() const;
    T at(std::initializer_list<std::int64_t> index) const;

    bool requires_grad() const { return impl_ && impl_->requires_grad; }
    Tensor& set_requires_grad(bool on);
    bool has_grad() const { return impl_ && impl_->grad.size() == impl_->data.size(); }
    std::span<const T> grad() const { return impl_->grad; }
    std::span<T> mutable_grad() { return impl_->grad_span(); }
    void zero_grad();

    // Operation that produced this tensor, empty for leaves.
    std::string op_name() const;

    /// Runs reverse-mode differentiation from this scalar.
    ///
    /// Leaf gradients accumulate across calls until zero_grad(); gradients of
    /// intermediate tensors are recomputed from scratch on every call.
    void backward() const;

    // Same values, no history, independent storage.
    Tensor clone() const;
    Tensor detach() const { return clone(); }

    const ImplPtr& impl() const { return impl_; }

private:
    ImplPtr impl_;
};

/// Disables tape recording on the current thread for its lifetime.
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

// Debug switch: every forward operation validates its output is finite.
void set_finite_checks(bool on);
bool finite_checks();

// Test hook: backward of the named op sees its incoming gradient scaled by
// 1.5, simulating a broken derivative rule. Empty string disables.
void set_gradient_fault(std::string op);

namespace detail {

/// Wraps freshly computed values into a tensor, recording a tape node when
/// any input is tracked and recording is enabled.
template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> data, const char* op,
                      std::vector<Tensor<T>> inputs, typename TapeNode<T>::BackwardFn backward);

// True when any input is tracked and recording is on.
template <typename T>
bool needs_tape(std::initializer_list<const Tensor<T>*> inputs);

} // namespace detail

} // namespace medmamba
