#pragma once

// Dense row-major tensors with tape-free reverse-mode differentiation.
//
// Every op output keeps shared references to the inputs it was computed from
// together with a backward rule, so the graph is the set of nodes reachable
// from the loss. A graph and its tensors belong to one thread while it is
// being built or differentiated; parameter tensors may be read concurrently
// by forward passes that run under NoGradGuard.

#include <cstdint>
#include <functional>
#include <memory>
#include <new>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

namespace pymx {

using Shape = std::vector<std::int64_t>;

std::int64_t numel(const Shape& shape);
std::string shape_string(const Shape& shape);

namespace detail {

/// Cache-line aligned storage whose elements are default-initialised on
/// resize, so op outputs that are overwritten in full skip a zero fill.
/// Vectorized reductions split at alignment boundaries, so a fixed alignment
/// also keeps their rounding independent of where a buffer lands.
template <typename T>
struct DefaultInitAllocator {
    using value_type = T;
    static constexpr std::align_val_t alignment{64};

    DefaultInitAllocator() noexcept = default;
    template <typename U>
    DefaultInitAllocator(const DefaultInitAllocator<U>&) noexcept {}

    T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), alignment)); }
    void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, alignment); }

    template <typename U>
    bool operator==(const DefaultInitAllocator<U>&) const noexcept {
        return true;
    }

    template <typename U>
    void construct(U* p) noexcept(std::is_nothrow_default_constructible_v<U>) {
        ::new (static_cast<void*>(p)) U;
    }
    template <typename U, typename... Args>
    void construct(U* p, Args&&... args) {
        ::new (static_cast<void*>(p)) U(std::forward<Args>(args)...);
    }
};

}  // namespace detail

/// Storage for tensor values and gradients.
template <typename T>
using Buffer = std::vector<T, detail::DefaultInitAllocator<T>>;

namespace detail {

template <typename T>
struct Node {
    Shape shape;
    Buffer<T> data;
    Buffer<T> grad;
    bool requires_grad = false;
    bool consumed = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward;

    void ensure_grad() {
        if (grad.size() != data.size()) grad.assign(data.size(), T(0));
    }
};

}  // namespace detail

/// Whether ops executed on this thread record graph edges.
bool grad_enabled() noexcept;

class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

/// Running count of multiply-accumulates executed by contraction ops
/// (matmul, linear, token_linear, conv1d) on this thread.
std::uint64_t mac_tally() noexcept;
void reset_mac_tally() noexcept;
void add_macs(std::uint64_t n) noexcept;

template <typename T>
class Tensor {
public:
    using value_type = T;
    using NodePtr = std::shared_ptr<detail::Node<T>>;

    Tensor() = default;
    explicit Tensor(NodePtr node) : node_(std::move(node)) {}

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, T value, bool requires_grad = false);
    static Tensor from(Shape shape, Buffer<T> values, bool requires_grad = false);
    static Tensor from(Shape shape, std::span<const T> values, bool requires_grad = false);
    static Tensor from(Shape shape, std::initializer_list<T> values, bool requires_grad = false) {
        return from(std::move(shape), std::span<const T>(values.begin(), values.size()), requires_grad);
    }
    static Tensor from(Shape shape, const std::vector<T>& values, bool requires_grad = false) {
        return from(std::move(shape), std::span<const T>(values), requires_grad);
    }
    static Tensor scalar(T value, bool requires_grad = false);

    bool defined() const noexcept { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    std::int64_t rank() const { return static_cast<std::int64_t>(node_->shape.size()); }
    /// Size of one dimension; negative indices count from the back.
    std::int64_t dim(std::int64_t i) const;
    std::int64_t numel() const { return static_cast<std::int64_t>(node_->data.size()); }

    std::span<T> data() { return node_->data; }
    std::span<const T> data() const { return node_->data; }
    Buffer<T>& values() { return node_->data; }
    const Buffer<T>& values() const { return node_->data; }

    bool requires_grad() const { return node_->requires_grad; }
    bool has_grad() const { return !node_->grad.empty(); }
    std::span<T> grad() { return node_->grad; }
    std::span<const T> grad() const { return node_->grad; }
    void zero_grad();

    T item() const;
    T at(std::initializer_list<std::int64_t> index) const;

    /// Copy of the values with no graph history.
    Tensor detach(bool requires_grad = false) const;

    NodePtr node() const { return node_; }

private:
    NodePtr node_;
};

/// Reverse pass from a scalar loss. Populates grads of every requires_grad
/// leaf reachable from `loss`; a graph can be differentiated only once.
template <typename T>
void backward(Tensor<T>& loss);

/// Converts values between precisions (no graph history).
template <typename To, typename From>
Tensor<To> cast(const Tensor<From>& t, bool requires_grad) {
    Buffer<To> out(t.values().begin(), t.values().end());
    return Tensor<To>::from(t.shape(), std::move(out), requires_grad);
}

}  // namespace pymx
