#include "pymx/tensor.hpp"

#include <unordered_set>

#include <fmt/format.h>
#include <fmt/ranges.h>

#include "pymx/error.hpp"

namespace pymx {

namespace {
thread_local bool t_grad_enabled = true;
thread_local std::uint64_t t_mac_tally = 0;
}  // namespace

std::int64_t numel(const Shape& shape) {
    std::int64_t n = 1;
    for (auto d : shape) n *= d;
    return n;
}

std::string shape_string(const Shape& shape) { return fmt::format("[{}]", fmt::join(shape, "x")); }

bool grad_enabled() noexcept { return t_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }

std::uint64_t mac_tally() noexcept { return t_mac_tally; }
void reset_mac_tally() noexcept { t_mac_tally = 0; }
void add_macs(std::uint64_t n) noexcept { t_mac_tally += n; }

template <typename T>
Tensor<T> Tensor<T>::zeros(Shape shape, bool requires_grad) {
    return full(std::move(shape), T(0), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::full(Shape shape, T value, bool requires_grad) {
    auto n = pymx::numel(shape);
    return from(std::move(shape), Buffer<T>(static_cast<std::size_t>(n), value), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::from(Shape shape, std::span<const T> values, bool requires_grad) {
    return from(std::move(shape), Buffer<T>(values.begin(), values.end()), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::from(Shape shape, Buffer<T> values, bool requires_grad) {
    for (auto d : shape) {
        if (d <= 0) throw DimensionError("tensor dimensions must be positive, got " + shape_string(shape));
    }
    if (pymx::numel(shape) != static_cast<std::int64_t>(values.size())) {
        throw DimensionError(fmt::format("shape {} holds {} values, got {}", shape_string(shape),
                                         pymx::numel(shape), values.size()));
    }
    auto node = std::make_shared<detail::Node<T>>();
    node->shape = std::move(shape);
    node->data = std::move(values);
    node->requires_grad = requires_grad;
    if (requires_grad) node->ensure_grad();
    return Tensor(std::move(node));
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T value, bool requires_grad) {
    return from({1}, {value}, requires_grad);
}

template <typename T>
std::int64_t Tensor<T>::dim(std::int64_t i) const {
    auto r = rank();
    if (i < 0) i += r;
    if (i < 0 || i >= r) throw DimensionError(fmt::format("axis {} out of range for {}", i, shape_string(shape())));
    return node_->shape[static_cast<std::size_t>(i)];
}

template <typename T>
void Tensor<T>::zero_grad() {
    if (node_->requires_grad) node_->grad.assign(node_->data.size(), T(0));
}

template <typename T>
T Tensor<T>::item() const {
    if (numel() != 1) throw ContractError("item() needs a single-element tensor, got " + shape_string(shape()));
    return node_->data[0];
}

template <typename T>
T Tensor<T>::at(std::initializer_list<std::int64_t> index) const {
    if (static_cast<std::int64_t>(index.size()) != rank()) throw DimensionError("index rank mismatch");
    std::int64_t flat = 0;
    std::size_t axis = 0;
    for (auto i : index) {
        auto d = node_->shape[axis++];
        if (i < 0 || i >= d) throw DimensionError("index out of range");
        flat = flat * d + i;
    }
    return node_->data[static_cast<std::size_t>(flat)];
}

template <typename T>
Tensor<T> Tensor<T>::detach(bool requires_grad) const {
    return from(shape(), values(), requires_grad);
}

template <typename T>
void backward(Tensor<T>& loss) {
    auto root = loss.node();
    if (!root) throw ContractError("backward on an undefined tensor");
    if (root->data.size() != 1) {
        throw ContractError("backward needs a scalar loss, got shape " + shape_string(root->shape));
    }
    if (root->consumed) throw StateError("backward already ran on this graph");
    if (!root->requires_grad) throw ContractError("loss does not depend on any tensor that requires grad");

    // Iterative post-order DFS gives a topological order (inputs first). The
    // order owns its nodes because releasing history below drops parent links.
    using NodeT = detail::Node<T>;
    std::vector<std::shared_ptr<NodeT>> order;
    std::unordered_set<NodeT*> visited;
    std::vector<std::pair<std::shared_ptr<NodeT>, std::size_t>> stack;
    stack.emplace_back(root, 0);
    visited.insert(root.get());
    while (!stack.empty()) {
        auto& top = stack.back();
        if (top.second < top.first->parents.size()) {
            auto parent = top.first->parents[top.second++];
            if (parent->requires_grad && visited.insert(parent.get()).second) stack.emplace_back(std::move(parent), 0);
        } else {
            order.push_back(std::move(top.first));
            stack.pop_back();
        }
    }

    for (const auto& n : order) {
        if (n->consumed) throw StateError("backward already ran through part of this graph");
        if (n->backward) n->grad.assign(n->data.size(), T(0));
    }
    root->grad.assign(1, T(1));

    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        NodeT* n = it->get();
        if (!n->backward) continue;
        for (auto& p : n->parents) {
            if (p->requires_grad) p->ensure_grad();
        }
        n->backward(*n);
        // Interior nodes release their history; leaves keep accumulated grads.
        n->backward = nullptr;
        n->parents.clear();
        n->consumed = true;
        if (n != root.get()) Buffer<T>().swap(n->grad);
    }
    root->consumed = true;
}

template class Tensor<float>;
template class Tensor<double>;
template void backward<float>(Tensor<float>&);
template void backward<double>(Tensor<double>&);

}  // namespace pymx
