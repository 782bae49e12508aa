#pragma once

// Dense row-major tensors with a reverse-mode autodiff tape.
//
// A Tensor is a shared handle onto a TensorImpl. Ops build a DAG of Nodes;
// backward() walks it in reverse creation order, which is a valid reverse
// topological order because an op's inputs always exist before its output.

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace sgseg {

using Shape = std::vector<std::int64_t>;

class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

std::int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

template <typename T>
struct TensorImpl;

template <typename T>
struct Node {
    const char* op = "";
    std::vector<std::shared_ptr<TensorImpl<T>>> inputs;
    // Reads out.grad and accumulates into the grads of `inputs`.
    std::function<void(const TensorImpl<T>& out)> backward;
};

template <typename T>
struct TensorImpl {
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad;  // empty until first written
    bool requires_grad = false;
    std::shared_ptr<Node<T>> node;
    std::uint64_t seq = 0;

    // Zero-filled grad buffer of the data's size, allocated on demand.
    std::vector<T>& grad_buffer() {
        if (grad.size() != data.size()) grad.assign(data.size(), T(0));
        return grad;
    }
};

std::uint64_t next_tensor_seq();

// Graph recording is on by default; NoGradGuard disables it for the current
// thread (inference, finite differences).
bool grad_enabled();

class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

template <typename T>
class Tensor {
public:
    using value_type = T;

    Tensor() = default;
    Tensor(Shape shape, std::vector<T> data, bool requires_grad = false);

    static Tensor zeros(const Shape& shape, bool requires_grad = false);
    static Tensor full(const Shape& shape, T value, bool requires_grad = false);
    static Tensor scalar(T value, bool requires_grad = false);

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const { return impl_->shape; }
    std::int64_t dim(int axis) const;
    int ndim() const { return static_cast<int>(impl_->shape.size()); }
    std::int64_t numel() const { return static_cast<std::int64_t>(impl_->data.size()); }

    std::span<T> data() { return impl_->data; }
    std::span<const T> data() const { return impl_->data; }
    std::span<const T> grad() const { return impl_->grad; }
    std::span<T> mutable_grad() { return impl_->grad_buffer(); }
    bool has_grad() const { return !impl_->grad.empty(); }
    void zero_grad() { impl_->grad.clear(); }

    bool requires_grad() const { return impl_->requires_grad; }
    void set_requires_grad(bool on) { impl_->requires_grad = on; }
    bool is_leaf() const { return impl_->node == nullptr; }

    T item() const;
    T& operator[](std::int64_t i) { return impl_->data[static_cast<std::size_t>(i)]; }
    const T& operator[](std::int64_t i) const { return impl_->data[static_cast<std::size_t>(i)]; }

    // Deep copy with no graph link and requires_grad off.
    Tensor clone() const;

    const std::shared_ptr<TensorImpl<T>>& impl() const { return impl_; }
    static Tensor from_impl(std::shared_ptr<TensorImpl<T>> impl);

private:
    std::shared_ptr<TensorImpl<T>> impl_;
};

// Creates an op result. When recording is enabled and any input requires a
// gradient, attaches a node whose backward is `backward_fn`.
template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> data, const char* op,
                      std::vector<Tensor<T>> inputs,
                      std::function<void(const TensorImpl<T>&)> backward_fn);

// Reverse-mode sweep from a scalar. Leaf grads accumulate (+=); intermediate
// grads are recomputed on every call.
template <typename T>
void backward(const Tensor<T>& loss);

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

extern template class Tensor<float>;
extern template class Tensor<double>;

}  // namespace sgseg
