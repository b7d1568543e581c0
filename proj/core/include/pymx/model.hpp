#pragma once

// Pyramid mixer encoder and item-scoring head.

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "pymx/data.hpp"
#include "pymx/ops.hpp"
#include "pymx/tensor.hpp"

namespace pymx {

struct ModelConfig {
    std::int64_t max_len = 50;    // L
    std::int64_t field_dim = 32;  // d, per-field embedding width
    std::int64_t D = 0;           // behavior width F*d; 0 derives it from field_dim
    std::int64_t D_prime = 0;     // feature-mixer latent width; 0 means D/4
    std::int64_t L_prime = 0;     // behavior-mixer latent count at full length; 0 means L/4
    std::int64_t num_layers = 3;  // S
    std::int64_t kernel = 3;
    std::int64_t stride = 2;
    std::int64_t padding = 1;
    Activation activation = Activation::gelu;
    bool low_rank = true;
    bool cross_behavior = true;
    bool cross_feature = true;
    bool fusion = true;
    bool pyramid = true;
    double ln_eps = 1e-5;
    /// One entry per field, field 0 being items. Sizes include the two
    /// reserved indices. Empty until bound to a dataset.
    std::vector<std::int64_t> vocab_sizes;

    std::int64_t num_fields() const noexcept { return static_cast<std::int64_t>(vocab_sizes.size()); }
    std::int64_t num_items() const { return vocab_sizes.at(0); }

    /// Fills derived widths for the given vocabularies and validates.
    /// A nonzero D takes precedence over field_dim.
    ModelConfig resolved(std::vector<std::int64_t> vocabs) const;
    /// Throws ConfigError naming the offending field. Expects a resolved config.
    void validate() const;

    /// Sequence length entering each of the S layers.
    std::vector<std::int64_t> layer_lengths() const;
    /// Latent width of the behavior mixer in layer `s`.
    std::int64_t behavior_latent(std::size_t s) const;
    /// Latent width of the feature mixer.
    std::int64_t feature_latent() const;

    nlohmann::json to_json() const;
    /// Rejects unknown keys; missing keys keep their defaults.
    static ModelConfig from_json(const nlohmann::json& j);

    bool operator==(const ModelConfig&) const = default;
};

/// Name of the first field whose value differs, or nullopt.
std::optional<std::string> first_difference(const ModelConfig& a, const ModelConfig& b);

enum class MixAxis { behavior, feature };

/// Y = X + W2 act(W1 LayerNorm(X) + b1) + b2. LayerNorm runs over channels.
/// Behavior blocks apply W1 [L x L'] and W2 [L' x L] across positions;
/// feature blocks apply W1 [D x D'] and W2 [D' x D] across channels.
template <typename T>
struct MixerBlock {
    MixAxis axis = MixAxis::feature;
    Tensor<T> w1, b1, w2, b2, gamma, beta;
};

template <typename T>
Tensor<T> mixer_block_forward(const Tensor<T>& x, const MixerBlock<T>& block, Activation act, T eps);

/// alpha = sigmoid(x gate_w + gate_b) per position; alpha*y_behavior + (1-alpha)*y_feature.
template <typename T>
Tensor<T> adaptive_fusion(const Tensor<T>& x, const Tensor<T>& y_behavior, const Tensor<T>& y_feature,
                          const Tensor<T>& gate_w, const Tensor<T>& gate_b);

template <typename T>
Tensor<T> period_scale(const Tensor<T>& z, const Tensor<T>& kernels, const Tensor<T>& bias, std::int64_t stride,
                       std::int64_t padding);

/// A downsampled position is real if any real position falls in its window.
std::vector<std::uint8_t> downsample_mask(std::span<const std::uint8_t> mask, std::int64_t batch,
                                          std::int64_t length, std::int64_t kernel, std::int64_t stride,
                                          std::int64_t padding);

template <typename T>
struct PyramidOutput {
    /// scales[s] is [B x L_s x D], taken before the layer's period scaling.
    std::vector<Tensor<T>> scales;
    std::vector<std::vector<std::uint8_t>> masks;
};

template <typename T>
using NamedTensor = std::pair<std::string, Tensor<T>>;

template <typename T>
class PyramidMixer {
public:
    /// `config` must be resolved. Parameters are drawn from `seed`.
    PyramidMixer(const ModelConfig& config, std::uint64_t seed);

    const ModelConfig& config() const noexcept { return config_; }

    /// Handles alias the model's tensors; order is stable.
    std::vector<NamedTensor<T>> parameters() const;
    std::int64_t parameter_count() const;
    /// Copies values into matching parameters. Names and shapes must match exactly.
    void load_parameters(const std::vector<NamedTensor<T>>& values);

    /// [B x L x D], concatenating per-field embeddings.
    Tensor<T> embed(const Batch& batch) const;
    PyramidOutput<T> encode(const Batch& batch) const;
    PyramidOutput<T> encode(const Tensor<T>& x, std::span<const std::uint8_t> mask) const;
    /// Pool each scale, concatenate, project to the item embedding width.
    Tensor<T> user_representation(const PyramidOutput<T>& pyr) const;
    /// [B x V] dot products against the item table.
    Tensor<T> score_items(const PyramidOutput<T>& pyr) const;
    Tensor<T> score(const Batch& batch) const { return score_items(encode(batch)); }

    const Tensor<T>& item_table() const { return embeddings_.at(0); }

    template <typename U>
    PyramidMixer<U> cast() const {
        PyramidMixer<U> out(config_, 0);
        std::vector<NamedTensor<U>> values;
        for (const auto& [name, t] : parameters()) values.emplace_back(name, pymx::cast<U>(t, false));
        out.load_parameters(values);
        return out;
    }

private:
    struct Layer {
        std::optional<MixerBlock<T>> behavior;
        std::optional<MixerBlock<T>> feature;
        Tensor<T> gate_w, gate_b;
        Tensor<T> conv_k, conv_b;
    };

    ModelConfig config_;
    std::vector<Tensor<T>> embeddings_;
    std::vector<Layer> layers_;
    Tensor<T> head_w_, head_b_;
};

extern template class PyramidMixer<float>;
extern template class PyramidMixer<double>;

}  // namespace pymx
