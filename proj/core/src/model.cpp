#include "pymx/model.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <set>

#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include "pymx/error.hpp"

namespace pymx {

namespace {

const std::set<std::string>& known_keys() {
    static const std::set<std::string> keys = {
        "max_len", "field_dim", "D",          "D_prime",       "L_prime",       "num_layers",
        "kernel",  "stride",    "padding",    "activation",    "low_rank",      "cross_behavior",
        "cross_feature", "fusion", "pyramid", "ln_eps",        "vocab_sizes"};
    return keys;
}

template <typename V>
void read_key(const nlohmann::json& j, const char* key, V& out) {
    if (!j.contains(key)) return;
    try {
        out = j.at(key).get<V>();
    } catch (const nlohmann::json::exception&) {
        throw ConfigError(fmt::format("model.{}: wrong type ({})", key, j.at(key).dump()));
    }
}

void require(bool ok, const std::string& message) {
    if (!ok) throw ConfigError(message);
}

template <typename T>
Tensor<T> uniform(Shape shape, T bound, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> dist(-static_cast<double>(bound), static_cast<double>(bound));
    std::vector<T> v(static_cast<std::size_t>(numel(shape)));
    for (auto& e : v) e = static_cast<T>(dist(rng));
    return Tensor<T>::from(std::move(shape), std::move(v), true);
}

template <typename T>
Tensor<T> normal(Shape shape, T stddev, std::mt19937_64& rng) {
    std::normal_distribution<double> dist(0.0, static_cast<double>(stddev));
    std::vector<T> v(static_cast<std::size_t>(numel(shape)));
    for (auto& e : v) e = static_cast<T>(dist(rng));
    return Tensor<T>::from(std::move(shape), std::move(v), true);
}

template <typename T>
Tensor<T> lecun(std::int64_t in, std::int64_t out, std::mt19937_64& rng) {
    return uniform<T>({in, out}, static_cast<T>(1.0 / std::sqrt(static_cast<double>(in))), rng);
}

template <typename T>
MixerBlock<T> make_block(MixAxis axis, std::int64_t width, std::int64_t latent, std::int64_t channels,
                         std::mt19937_64& rng) {
    MixerBlock<T> b;
    b.axis = axis;
    b.w1 = lecun<T>(width, latent, rng);
    b.b1 = Tensor<T>::zeros({latent}, true);
    b.w2 = lecun<T>(latent, width, rng);
    b.b2 = Tensor<T>::zeros({width}, true);
    b.gamma = Tensor<T>::full({channels}, T(1), true);
    b.beta = Tensor<T>::zeros({channels}, true);
    return b;
}

}  // namespace

ModelConfig ModelConfig::resolved(std::vector<std::int64_t> vocabs) const {
    ModelConfig c = *this;
    c.vocab_sizes = std::move(vocabs);
    require(!c.vocab_sizes.empty(), "model.vocab_sizes: at least the item field is required");
    const auto f = c.num_fields();
    if (c.D > 0) {
        require(c.D % f == 0, fmt::format("model.D: {} is not a multiple of the field count {}", c.D, f));
        c.field_dim = c.D / f;
    } else {
        c.D = f * c.field_dim;
    }
    if (c.D_prime == 0) c.D_prime = std::max<std::int64_t>(1, c.D / 4);
    if (c.L_prime == 0) c.L_prime = std::max<std::int64_t>(1, c.max_len / 4);
    c.validate();
    return c;
}

void ModelConfig::validate() const {
    require(max_len >= 1, fmt::format("model.max_len: must be positive, got {}", max_len));
    require(field_dim >= 1, fmt::format("model.field_dim: must be positive, got {}", field_dim));
    require(num_layers >= 1, fmt::format("model.num_layers: must be at least 1, got {}", num_layers));
    require(kernel >= 1 && kernel % 2 == 1, fmt::format("model.kernel: must be a positive odd size, got {}", kernel));
    require(stride >= 1, fmt::format("model.stride: must be positive, got {}", stride));
    require(padding >= 0, fmt::format("model.padding: must be non-negative, got {}", padding));
    require(ln_eps > 0.0, fmt::format("model.ln_eps: must be positive, got {}", ln_eps));
    require(!vocab_sizes.empty(), "model.vocab_sizes: not bound to a dataset");
    for (std::size_t f = 0; f < vocab_sizes.size(); ++f) {
        require(vocab_sizes[f] >= 3,
                fmt::format("model.vocab_sizes: field {} has {} entries, need at least one real value", f,
                            vocab_sizes[f]));
    }
    require(D == num_fields() * field_dim,
            fmt::format("model.D: {} does not equal fields ({}) x field_dim ({})", D, num_fields(), field_dim));
    require(D >= 2, fmt::format("model.D: layer norm needs at least 2 channels, got {}", D));
    if (low_rank) {
        require(D_prime >= 1 && D_prime < D,
                fmt::format("model.D_prime: must satisfy 1 <= D_prime < D ({}) with low_rank on, got {}", D, D_prime));
        require(L_prime >= 1 && L_prime < max_len,
                fmt::format("model.L_prime: must satisfy 1 <= L_prime < max_len ({}) with low_rank on, got {}",
                            max_len, L_prime));
    }
    if (pyramid) {
        std::int64_t len = max_len;
        for (std::int64_t s = 0; s < num_layers; ++s) {
            require(len >= kernel, fmt::format("model.num_layers: layer {} would see length {} < kernel {}", s + 1,
                                               len, kernel));
            if (s + 1 == num_layers) break;
            auto next = conv1d_output_length(len, kernel, stride, padding);
            require(next >= 1 && next < len,
                    fmt::format("model.stride: period scaling maps length {} to {}, which must be in [1, {})", len,
                                next, len));
            len = next;
        }
    }
}

std::vector<std::int64_t> ModelConfig::layer_lengths() const {
    std::vector<std::int64_t> out{max_len};
    for (std::int64_t s = 1; s < num_layers; ++s) {
        out.push_back(pyramid ? conv1d_output_length(out.back(), kernel, stride, padding) : max_len);
    }
    return out;
}

std::int64_t ModelConfig::behavior_latent(std::size_t s) const {
    const auto len = layer_lengths().at(s);
    if (!low_rank) return len;
    return std::max<std::int64_t>(1, len * L_prime / max_len);
}

std::int64_t ModelConfig::feature_latent() const { return low_rank ? D_prime : D; }

nlohmann::json ModelConfig::to_json() const {
    return {{"max_len", max_len},
            {"field_dim", field_dim},
            {"D", D},
            {"D_prime", D_prime},
            {"L_prime", L_prime},
            {"num_layers", num_layers},
            {"kernel", kernel},
            {"stride", stride},
            {"padding", padding},
            {"activation", std::string(to_string(activation))},
            {"low_rank", low_rank},
            {"cross_behavior", cross_behavior},
            {"cross_feature", cross_feature},
            {"fusion", fusion},
            {"pyramid", pyramid},
            {"ln_eps", ln_eps},
            {"vocab_sizes", vocab_sizes}};
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
    if (!j.is_object()) throw ConfigError("model: expected a JSON object");
    for (const auto& [key, value] : j.items()) {
        if (!known_keys().count(key)) throw ConfigError(fmt::format("model.{}: unknown key", key));
    }
    ModelConfig c;
    read_key(j, "max_len", c.max_len);
    read_key(j, "field_dim", c.field_dim);
    read_key(j, "D", c.D);
    read_key(j, "D_prime", c.D_prime);
    read_key(j, "L_prime", c.L_prime);
    read_key(j, "num_layers", c.num_layers);
    read_key(j, "kernel", c.kernel);
    read_key(j, "stride", c.stride);
    read_key(j, "padding", c.padding);
    std::string act = std::string(to_string(c.activation));
    read_key(j, "activation", act);
    try {
        c.activation = parse_activation(act);
    } catch (const ConfigError& e) {
        throw ConfigError(std::string("model.activation: ") + e.what());
    }
    read_key(j, "low_rank", c.low_rank);
    read_key(j, "cross_behavior", c.cross_behavior);
    read_key(j, "cross_feature", c.cross_feature);
    read_key(j, "fusion", c.fusion);
    read_key(j, "pyramid", c.pyramid);
    read_key(j, "ln_eps", c.ln_eps);
    read_key(j, "vocab_sizes", c.vocab_sizes);
    return c;
}

std::optional<std::string> first_difference(const ModelConfig& a, const ModelConfig& b) {
    auto ja = a.to_json(), jb = b.to_json();
    for (const auto& [key, value] : ja.items()) {
        if (jb.at(key) != value) return key;
    }
    return std::nullopt;
}

template <typename T>
Tensor<T> mixer_block_forward(const Tensor<T>& x, const MixerBlock<T>& block, Activation act, T eps) {
    if (x.rank() != 3 && x.rank() != 2) {
        throw DimensionError("mixer block: input must be [B x L x D] or [L x D], got " + shape_string(x.shape()));
    }
    auto h = layer_norm(x, block.gamma, block.beta, eps);
    if (block.axis == MixAxis::feature) {
        h = linear(activation(linear(h, block.w1, block.b1), act), block.w2, block.b2);
    } else {
        h = token_linear(activation(token_linear(h, block.w1, block.b1), act), block.w2, block.b2);
    }
    return add(x, h);
}

template <typename T>
Tensor<T> adaptive_fusion(const Tensor<T>& x, const Tensor<T>& y_behavior, const Tensor<T>& y_feature,
                          const Tensor<T>& gate_w, const Tensor<T>& gate_b) {
    if (x.shape() != y_behavior.shape() || x.shape() != y_feature.shape()) {
        throw DimensionError(fmt::format("fusion: inputs {}, {}, {} must share a shape", shape_string(x.shape()),
                                         shape_string(y_behavior.shape()), shape_string(y_feature.shape())));
    }
    auto alpha = sigmoid(linear(x, gate_w, gate_b));
    return convex_mix(alpha, y_behavior, y_feature);
}

template <typename T>
Tensor<T> period_scale(const Tensor<T>& z, const Tensor<T>& kernels, const Tensor<T>& bias, std::int64_t stride,
                       std::int64_t padding) {
    return conv1d(z, kernels, bias, stride, padding);
}

std::vector<std::uint8_t> downsample_mask(std::span<const std::uint8_t> mask, std::int64_t batch,
                                          std::int64_t length, std::int64_t kernel, std::int64_t stride,
                                          std::int64_t padding) {
    if (static_cast<std::int64_t>(mask.size()) != batch * length) {
        throw DimensionError(fmt::format("mask holds {} entries, expected {}x{}", mask.size(), batch, length));
    }
    const auto out_len = conv1d_output_length(length, kernel, stride, padding);
    if (out_len < 1) throw SequenceTooShortError(fmt::format("mask of length {} is shorter than the kernel", length));
    std::vector<std::uint8_t> out(static_cast<std::size_t>(batch * out_len), 0);
    for (std::int64_t b = 0; b < batch; ++b) {
        for (std::int64_t j = 0; j < out_len; ++j) {
            for (std::int64_t k = 0; k < kernel; ++k) {
                const auto i = j * stride - padding + k;
                if (i >= 0 && i < length && mask[static_cast<std::size_t>(b * length + i)]) {
                    out[static_cast<std::size_t>(b * out_len + j)] = 1;
                    break;
                }
            }
        }
    }
    return out;
}

template <typename T>
PyramidMixer<T>::PyramidMixer(const ModelConfig& config, std::uint64_t seed) : config_(config) {
    config_.validate();
    std::mt19937_64 rng(seed);
    const auto D = config_.D, d = config_.field_dim;
    for (auto v : config_.vocab_sizes) {
        auto table = normal<T>({v, d}, static_cast<T>(1.0 / std::sqrt(static_cast<double>(d))), rng);
        std::fill_n(table.values().begin(), d, T(0));
        embeddings_.push_back(std::move(table));
    }
    const auto lengths = config_.layer_lengths();
    for (std::size_t s = 0; s < lengths.size(); ++s) {
        Layer layer;
        if (config_.cross_behavior) {
            layer.behavior = make_block<T>(MixAxis::behavior, lengths[s], config_.behavior_latent(s), D, rng);
        }
        if (config_.cross_feature) {
            layer.feature = make_block<T>(MixAxis::feature, D, config_.feature_latent(), D, rng);
        }
        if (config_.cross_behavior && config_.cross_feature && config_.fusion) {
            layer.gate_w = lecun<T>(D, 1, rng);
            layer.gate_b = Tensor<T>::zeros({1}, true);
        }
        if (config_.pyramid && s + 1 < lengths.size()) {
            layer.conv_k = uniform<T>({config_.kernel, D, D},
                                      static_cast<T>(1.0 / std::sqrt(static_cast<double>(config_.kernel * D))), rng);
            layer.conv_b = Tensor<T>::zeros({D}, true);
        }
        layers_.push_back(std::move(layer));
    }
    const auto S = static_cast<std::int64_t>(lengths.size());
    head_w_ = lecun<T>(S * D, d, rng);
    head_b_ = Tensor<T>::zeros({d}, true);
}

template <typename T>
std::vector<NamedTensor<T>> PyramidMixer<T>::parameters() const {
    std::vector<NamedTensor<T>> out;
    for (std::size_t f = 0; f < embeddings_.size(); ++f) out.emplace_back(fmt::format("embed.{}", f), embeddings_[f]);
    auto add_block = [&](const std::string& prefix, const MixerBlock<T>& b) {
        out.emplace_back(prefix + ".ln.gamma", b.gamma);
        out.emplace_back(prefix + ".ln.beta", b.beta);
        out.emplace_back(prefix + ".w1", b.w1);
        out.emplace_back(prefix + ".b1", b.b1);
        out.emplace_back(prefix + ".w2", b.w2);
        out.emplace_back(prefix + ".b2", b.b2);
    };
    for (std::size_t s = 0; s < layers_.size(); ++s) {
        const auto& l = layers_[s];
        const auto prefix = fmt::format("layer{}", s);
        if (l.behavior) add_block(prefix + ".behavior", *l.behavior);
        if (l.feature) add_block(prefix + ".feature", *l.feature);
        if (l.gate_w.defined()) {
            out.emplace_back(prefix + ".gate.w", l.gate_w);
            out.emplace_back(prefix + ".gate.b", l.gate_b);
        }
        if (l.conv_k.defined()) {
            out.emplace_back(prefix + ".scale.kernel", l.conv_k);
            out.emplace_back(prefix + ".scale.bias", l.conv_b);
        }
    }
    out.emplace_back("head.w", head_w_);
    out.emplace_back("head.b", head_b_);
    return out;
}

template <typename T>
std::int64_t PyramidMixer<T>::parameter_count() const {
    std::int64_t n = 0;
    for (const auto& [name, t] : parameters()) n += t.numel();
    return n;
}

template <typename T>
void PyramidMixer<T>::load_parameters(const std::vector<NamedTensor<T>>& values) {
    auto params = parameters();
    if (params.size() != values.size()) {
        throw FormatError(fmt::format("expected {} parameter tensors, got {}", params.size(), values.size()));
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto& [name, dst] = params[i];
        const auto& [src_name, src] = values[i];
        if (name != src_name) throw FormatError(fmt::format("parameter {} is '{}', expected '{}'", i, src_name, name));
        if (dst.shape() != src.shape()) {
            throw FormatError(fmt::format("parameter '{}' has shape {}, expected {}", name, shape_string(src.shape()),
                                          shape_string(dst.shape())));
        }
        std::copy(src.values().begin(), src.values().end(), dst.values().begin());
    }
}

template <typename T>
Tensor<T> PyramidMixer<T>::embed(const Batch& batch) const {
    if (batch.num_fields != config_.num_fields()) {
        throw DataError(fmt::format("batch has {} fields, model expects {}", batch.num_fields, config_.num_fields()));
    }
    if (batch.max_len != config_.max_len) {
        throw DimensionError(fmt::format("batch length {} differs from model max_len {}", batch.max_len,
                                         config_.max_len));
    }
    std::vector<Tensor<T>> parts;
    for (std::size_t f = 0; f < embeddings_.size(); ++f) {
        const auto& idx = batch.fields[f];
        const auto rows = embeddings_[f].dim(0);
        for (std::size_t i = 0; i < idx.size(); ++i) {
            if (idx[i] < 0 || idx[i] >= rows) {
                const auto L = static_cast<std::size_t>(batch.max_len);
                throw DataError(fmt::format("field {} index {} at row {} position {} is outside its vocabulary of {}",
                                            f, idx[i], i / L, i % L, rows));
            }
        }
        parts.push_back(embedding(embeddings_[f], std::span<const std::int32_t>(idx), {batch.size, batch.max_len},
                                  Vocab::kPad));
    }
    return parts.size() == 1 ? parts.front() : concat_last(parts);
}

template <typename T>
PyramidOutput<T> PyramidMixer<T>::encode(const Batch& batch) const {
    return encode(embed(batch), batch.mask);
}

template <typename T>
PyramidOutput<T> PyramidMixer<T>::encode(const Tensor<T>& x_in, std::span<const std::uint8_t> mask_in) const {
    const auto B = x_in.dim(0);
    const auto eps = static_cast<T>(config_.ln_eps);
    PyramidOutput<T> out;
    Tensor<T> x = x_in;
    std::vector<std::uint8_t> mask(mask_in.begin(), mask_in.end());
    for (const auto& layer : layers_) {
        Tensor<T> z;
        if (layer.behavior && layer.feature) {
            auto yb = mixer_block_forward(x, *layer.behavior, config_.activation, eps);
            auto yf = mixer_block_forward(x, *layer.feature, config_.activation, eps);
            z = layer.gate_w.defined() ? adaptive_fusion(x, yb, yf, layer.gate_w, layer.gate_b)
                                       : scale(add(yb, yf), T(0.5));
        } else if (layer.behavior) {
            z = mixer_block_forward(x, *layer.behavior, config_.activation, eps);
        } else if (layer.feature) {
            z = mixer_block_forward(x, *layer.feature, config_.activation, eps);
        } else {
            z = x;
        }
        out.scales.push_back(z);
        out.masks.push_back(mask);
        if (layer.conv_k.defined()) {
            const auto len = z.dim(1);
            x = period_scale(z, layer.conv_k, layer.conv_b, config_.stride, config_.padding);
            mask = downsample_mask(mask, B, len, config_.kernel, config_.stride, config_.padding);
        } else {
            x = z;
        }
    }
    return out;
}

template <typename T>
Tensor<T> PyramidMixer<T>::user_representation(const PyramidOutput<T>& pyr) const {
    std::vector<Tensor<T>> pooled;
    for (std::size_t s = 0; s < pyr.scales.size(); ++s) pooled.push_back(masked_mean_pool(pyr.scales[s], pyr.masks[s]));
    auto cat = pooled.size() == 1 ? pooled.front() : concat_last(pooled);
    return linear(cat, head_w_, head_b_);
}

template <typename T>
Tensor<T> PyramidMixer<T>::score_items(const PyramidOutput<T>& pyr) const {
    return matmul_nt(user_representation(pyr), embeddings_.at(0));
}

#define PYMX_INSTANTIATE_MODEL(T)                                                                              \
    template Tensor<T> mixer_block_forward(const Tensor<T>&, const MixerBlock<T>&, Activation, T);            \
    template Tensor<T> adaptive_fusion(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, \
                                       const Tensor<T>&);                                                      \
    template Tensor<T> period_scale(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, std::int64_t,       \
                                    std::int64_t);                                                             \
    template class PyramidMixer<T>;

PYMX_INSTANTIATE_MODEL(float)
PYMX_INSTANTIATE_MODEL(double)

}  // namespace pymx
