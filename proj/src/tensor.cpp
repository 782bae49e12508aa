#include "sgseg/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <sstream>
#include <unordered_set>

namespace sgseg {

namespace {
std::atomic<std::uint64_t> g_seq{1};
thread_local bool t_grad_enabled = true;
}  // namespace

std::int64_t shape_numel(const Shape& shape) {
    std::int64_t n = 1;
    for (auto d : shape) {
        if (d < 0) throw ShapeError("negative dimension in shape " + shape_str(shape));
        n *= d;
    }
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << 'x';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

std::uint64_t next_tensor_seq() { return g_seq.fetch_add(1, std::memory_order_relaxed); }

bool grad_enabled() { return t_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> data, bool requires_grad) {
    if (shape_numel(shape) != static_cast<std::int64_t>(data.size()))
        throw ShapeError("data length " + std::to_string(data.size()) + " does not match shape " +
                         shape_str(shape));
    impl_ = std::make_shared<TensorImpl<T>>();
    impl_->shape = std::move(shape);
    impl_->data = std::move(data);
    impl_->requires_grad = requires_grad;
    impl_->seq = next_tensor_seq();
}

template <typename T>
Tensor<T> Tensor<T>::zeros(const Shape& shape, bool requires_grad) {
    return full(shape, T(0), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::full(const Shape& shape, T value, bool requires_grad) {
    return Tensor(shape, std::vector<T>(static_cast<std::size_t>(shape_numel(shape)), value),
                  requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T value, bool requires_grad) {
    return Tensor(Shape{}, std::vector<T>{value}, requires_grad);
}

template <typename T>
std::int64_t Tensor<T>::dim(int axis) const {
    const int n = ndim();
    if (axis < 0) axis += n;
    if (axis < 0 || axis >= n)
        throw ShapeError("axis " + std::to_string(axis) + " out of range for " + shape_str(shape()));
    return impl_->shape[static_cast<std::size_t>(axis)];
}

template <typename T>
T Tensor<T>::item() const {
    if (impl_->data.size() != 1)
        throw ShapeError("item() on tensor of shape " + shape_str(shape()));
    return impl_->data[0];
}

template <typename T>
Tensor<T> Tensor<T>::clone() const {
    return Tensor(impl_->shape, impl_->data, false);
}

template <typename T>
Tensor<T> Tensor<T>::from_impl(std::shared_ptr<TensorImpl<T>> impl) {
    Tensor t;
    t.impl_ = std::move(impl);
    return t;
}

template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> data, const char* op,
                      std::vector<Tensor<T>> inputs,
                      std::function<void(const TensorImpl<T>&)> backward_fn) {
    Tensor<T> out(std::move(shape), std::move(data), false);
    if (!grad_enabled()) return out;
    bool any = std::any_of(inputs.begin(), inputs.end(),
                           [](const Tensor<T>& t) { return t.defined() && t.requires_grad(); });
    if (!any) return out;
    auto node = std::make_shared<Node<T>>();
    node->op = op;
    node->inputs.reserve(inputs.size());
    for (auto& t : inputs) node->inputs.push_back(t.impl());
    node->backward = std::move(backward_fn);
    out.impl()->requires_grad = true;
    out.impl()->node = std::move(node);
    return out;
}

template <typename T>
void backward(const Tensor<T>& loss) {
    if (loss.numel() != 1)
        throw ShapeError("backward() needs a scalar loss, got " + shape_str(loss.shape()));
    if (!loss.requires_grad()) return;

    std::vector<TensorImpl<T>*> order;
    std::unordered_set<TensorImpl<T>*> seen;
    std::vector<TensorImpl<T>*> stack{loss.impl().get()};
    while (!stack.empty()) {
        auto* cur = stack.back();
        stack.pop_back();
        if (!seen.insert(cur).second) continue;
        order.push_back(cur);
        if (cur->node)
            for (auto& in : cur->node->inputs)
                if (in && in->requires_grad) stack.push_back(in.get());
    }
    std::sort(order.begin(), order.end(),
              [](const TensorImpl<T>* a, const TensorImpl<T>* b) { return a->seq > b->seq; });

    for (auto* t : order)
        if (t->node) t->grad.clear();
    auto& g = loss.impl()->grad_buffer();
    g[0] += T(1);

    for (auto* t : order) {
        if (!t->node || t->grad.empty()) continue;
        t->node->backward(*t);
    }
}

template class Tensor<float>;
template class Tensor<double>;

template Tensor<float> make_result(Shape, std::vector<float>, const char*, std::vector<Tensor<float>>,
                                   std::function<void(const TensorImpl<float>&)>);
template Tensor<double> make_result(Shape, std::vector<double>, const char*,
                                    std::vector<Tensor<double>>,
                                    std::function<void(const TensorImpl<double>&)>);
template void backward(const Tensor<float>&);
template void backward(const Tensor<double>&);

}  // namespace sgseg
