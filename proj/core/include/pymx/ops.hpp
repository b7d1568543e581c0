#pragma once

#include <cstdint>
#include <span>
#include <string_view>
#include <vector>

#include "pymx/tensor.hpp"

namespace pymx {

enum class Activation { gelu, swish };

/// Parses "gelu" / "swish"; anything else is a ConfigError.
Activation parse_activation(std::string_view name);
std::string_view to_string(Activation a) noexcept;

// Scalar reference forms, shared by the op and its tests.
//   gelu(x)  = 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))
//   swish(x) = x sigmoid(x)
double gelu_reference(double x) noexcept;
double swish_reference(double x) noexcept;

template <typename T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> scale(const Tensor<T>& a, T factor);
/// Sum of all elements as a [1] tensor.
template <typename T> Tensor<T> sum(const Tensor<T>& a);

/// a[m x k] * b[k x n]
template <typename T> Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);
/// a[m x k] * b[n x k]^T
template <typename T> Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b);

/// Affine map over the last axis: x[..., in] w[in, out] + bias[out].
/// `bias` may be undefined.
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias);

/// Affine map over the second-to-last (sequence) axis of x[B, Lin, D] or
/// x[Lin, D]: out[b, j, d] = sum_i w[i, j] x[b, i, d] + bias[j].
template <typename T>
Tensor<T> token_linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias);

/// Normalizes each vector along the last axis, then applies gamma/beta.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps);

template <typename T> Tensor<T> activation(const Tensor<T>& x, Activation kind);
template <typename T> Tensor<T> sigmoid(const Tensor<T>& x);

/// alpha[..., 1] * a + (1 - alpha) * b, broadcasting alpha over the last axis.
template <typename T>
Tensor<T> convex_mix(const Tensor<T>& alpha, const Tensor<T>& a, const Tensor<T>& b);

/// Output length of a strided, zero-padded 1-D convolution.
std::int64_t conv1d_output_length(std::int64_t length, std::int64_t kernel, std::int64_t stride,
                                  std::int64_t padding) noexcept;

/// Dense 1-D convolution along the sequence axis of x[B, L, Din] (or [L, Din]).
/// kernels[K, Din, Dout]; out[b, j] = sum_k x[b, j*stride - padding + k] kernels[k] + bias.
template <typename T>
Tensor<T> conv1d(const Tensor<T>& x, const Tensor<T>& kernels, const Tensor<T>& bias,
                 std::int64_t stride, std::int64_t padding);

/// Row lookup: result shape is index_shape + [d]. Rows equal to
/// `padding_index` receive no gradient.
template <typename T>
Tensor<T> embedding(const Tensor<T>& table, std::span<const std::int32_t> indices, const Shape& index_shape,
                    std::int32_t padding_index = -1);

/// Concatenates along the last axis; leading dimensions must agree.
template <typename T> Tensor<T> concat_last(const std::vector<Tensor<T>>& parts);

/// Mean over the sequence axis of x[B, L, D] restricted to mask[b, l] != 0.
/// Rows with no unmasked positions pool to zeros.
template <typename T>
Tensor<T> masked_mean_pool(const Tensor<T>& x, std::span<const std::uint8_t> mask);

/// Mean softmax cross-entropy of logits[B, V] over rows with row_mask != 0.
/// Classes below `first_class` are excluded from the softmax.
template <typename T>
Tensor<T> softmax_cross_entropy(const Tensor<T>& logits, std::span<const std::int32_t> targets,
                                std::span<const std::uint8_t> row_mask, std::int32_t first_class = 0);

}  // namespace pymx
