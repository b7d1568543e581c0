#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <span>

#include <gtest/gtest.h>
#include <nlohmann/json.hpp>

#include "finite_difference.hpp"
#include "oracles.hpp"
#include "pymx/error.hpp"
#include "pymx/model.hpp"

using namespace pymx;
using pymx::testing::random_tensor;

namespace {

oracle::Vec vals(const Tensor<double>& t) { return {t.values().begin(), t.values().end()}; }

oracle::Block to_oracle(const MixerBlock<double>& b) {
    return {b.axis == MixAxis::behavior, vals(b.w1), vals(b.b1), vals(b.w2), vals(b.b2), vals(b.gamma), vals(b.beta),
            b.w1.dim(1)};
}

MixerBlock<double> random_block(MixAxis axis, std::int64_t width, std::int64_t latent, std::int64_t channels,
                                std::mt19937_64& rng) {
    MixerBlock<double> b;
    b.axis = axis;
    b.w1 = random_tensor<double>({width, latent}, rng, false, 0.5);
    b.b1 = random_tensor<double>({latent}, rng, false, 0.1);
    b.w2 = random_tensor<double>({latent, width}, rng, false, 0.5);
    b.b2 = random_tensor<double>({width}, rng, false, 0.1);
    b.gamma = random_tensor<double>({channels}, rng, false, 1.0);
    b.beta = random_tensor<double>({channels}, rng, false, 0.1);
    return b;
}

double max_abs_diff(std::span<const double> a, std::span<const double> b) {
    EXPECT_EQ(a.size(), b.size());
    double m = 0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

ModelConfig tiny_config() {
    ModelConfig c;
    c.max_len = 6;
    c.D = 8;
    c.D_prime = 4;
    c.L_prime = 3;
    c.num_layers = 2;
    return c.resolved({20, 5});
}

Batch random_batch(const ModelConfig& c, std::int64_t B, std::mt19937_64& rng) {
    Batch batch;
    batch.size = B;
    batch.max_len = c.max_len;
    batch.num_fields = c.num_fields();
    batch.fields.assign(static_cast<std::size_t>(c.num_fields()),
                        std::vector<std::int32_t>(static_cast<std::size_t>(B * c.max_len), 0));
    batch.mask.assign(static_cast<std::size_t>(B * c.max_len), 0);
    for (std::int64_t b = 0; b < B; ++b) {
        const auto len = 1 + static_cast<std::int64_t>(rng() % static_cast<std::uint64_t>(c.max_len));
        for (std::int64_t t = c.max_len - len; t < c.max_len; ++t) {
            const auto cell = static_cast<std::size_t>(b * c.max_len + t);
            batch.mask[cell] = 1;
            for (std::size_t f = 0; f < batch.fields.size(); ++f) {
                batch.fields[f][cell] = 2 + static_cast<std::int32_t>(rng() % static_cast<std::uint64_t>(
                                                                          c.vocab_sizes[f] - 2));
            }
        }
        batch.targets.push_back(2 + static_cast<std::int32_t>(rng() % static_cast<std::uint64_t>(c.num_items() - 2)));
    }
    return batch;
}

}  // namespace

TEST(Config, DefaultsResolve) {
    auto c = ModelConfig{}.resolved({1000, 7, 20});
    EXPECT_EQ(c.D, 96);
    EXPECT_EQ(c.D_prime, 24);
    EXPECT_EQ(c.L_prime, 12);
    EXPECT_EQ(c.layer_lengths(), (std::vector<std::int64_t>{50, 25, 13}));
    EXPECT_EQ(c.behavior_latent(0), 12);
    EXPECT_LT(c.behavior_latent(2), 13);
}

TEST(Config, LengthChainFromFortyEight) {
    ModelConfig c;
    c.max_len = 48;
    EXPECT_EQ(c.resolved({10}).layer_lengths(), (std::vector<std::int64_t>{48, 24, 12}));
}

TEST(Config, ValidationErrorsNameTheField) {
    ModelConfig c;
    c.D = 64;
    c.D_prime = 64;
    try {
        c.resolved({10, 5});
        FAIL();
    } catch (const ConfigError& e) {
        EXPECT_NE(std::string(e.what()).find("D_prime"), std::string::npos);
    }
    c.low_rank = false;
    EXPECT_NO_THROW(c.resolved({10, 5}));

    ModelConfig deep;
    deep.max_len = 8;
    deep.num_layers = 4;
    EXPECT_THROW(deep.resolved({10}), ConfigError);
    ModelConfig odd;
    odd.D = 65;
    EXPECT_THROW(odd.resolved({10, 5}), ConfigError);
    ModelConfig even;
    even.kernel = 4;
    EXPECT_THROW(even.resolved({10}), ConfigError);
}

TEST(Config, JsonRoundTripAndUnknownKeys) {
    auto c = tiny_config();
    c.activation = Activation::swish;
    c.fusion = false;
    auto back = ModelConfig::from_json(nlohmann::json::parse(c.to_json().dump()));
    EXPECT_EQ(back, c);
    EXPECT_THROW(ModelConfig::from_json(nlohmann::json{{"depth", 3}}), ConfigError);
    EXPECT_THROW(ModelConfig::from_json(nlohmann::json{{"max_len", "long"}}), ConfigError);
    EXPECT_THROW(ModelConfig::from_json(nlohmann::json{{"activation", "relu"}}), ConfigError);
    auto other = c;
    other.stride = 3;
    EXPECT_EQ(first_difference(c, other), std::optional<std::string>("stride"));
    EXPECT_EQ(first_difference(c, c), std::nullopt);
}

TEST(MixerBlock, ZeroSecondMatrixIsIdentity) {
    std::mt19937_64 rng(1);
    for (auto axis : {MixAxis::feature, MixAxis::behavior}) {
        auto x = random_tensor<double>({2, 8, 4}, rng, false);
        auto b = axis == MixAxis::feature ? random_block(axis, 4, 2, 4, rng) : random_block(axis, 8, 3, 4, rng);
        std::fill(b.w2.values().begin(), b.w2.values().end(), 0.0);
        std::fill(b.b2.values().begin(), b.b2.values().end(), 0.0);
        EXPECT_EQ(mixer_block_forward(x, b, Activation::gelu, 1e-5).values(), x.values());
    }
}

TEST(MixerBlock, ZeroFirstMatrixWithSwishIsIdentity) {
    std::mt19937_64 rng(2);
    auto x = random_tensor<double>({8, 4}, rng, false);
    auto b = random_block(MixAxis::feature, 4, 2, 4, rng);
    std::fill(b.w1.values().begin(), b.w1.values().end(), 0.0);
    std::fill(b.b1.values().begin(), b.b1.values().end(), 0.0);
    std::fill(b.b2.values().begin(), b.b2.values().end(), 0.0);
    EXPECT_EQ(mixer_block_forward(x, b, Activation::swish, 1e-5).values(), x.values());
}

TEST(MixerBlock, MatchesScalarOracle) {
    std::mt19937_64 rng(3);
    for (int trial = 0; trial < 40; ++trial) {
        const auto axis = trial % 2 ? MixAxis::behavior : MixAxis::feature;
        const bool gelu = trial % 4 < 2;
        const std::int64_t B = 1 + trial % 3, L = 8, D = 4;
        auto x = random_tensor<double>({B, L, D}, rng, false);
        auto blk = axis == MixAxis::feature ? random_block(axis, D, 2, D, rng) : random_block(axis, L, 3, D, rng);
        auto y = mixer_block_forward(x, blk, gelu ? Activation::gelu : Activation::swish, 1e-5);
        auto ref = oracle::mixer_block(vals(x), B, L, D, to_oracle(blk), gelu, 1e-5);
        EXPECT_LT(max_abs_diff(y.values(), ref), 1e-10);
    }
}

TEST(MixerBlock, ShapeMismatchIsDimensionError) {
    std::mt19937_64 rng(4);
    auto x = random_tensor<double>({2, 8, 4}, rng, false);
    auto blk = random_block(MixAxis::behavior, 7, 3, 4, rng);
    EXPECT_THROW(mixer_block_forward(x, blk, Activation::gelu, 1e-5), DimensionError);
}

TEST(Fusion, ZeroGateAveragesBranches) {
    std::mt19937_64 rng(5);
    auto x = random_tensor<double>({3, 4}, rng, false);
    auto yb = random_tensor<double>({3, 4}, rng, false);
    auto yf = random_tensor<double>({3, 4}, rng, false);
    auto z = adaptive_fusion(x, yb, yf, Tensor<double>::zeros({4, 1}), Tensor<double>::zeros({1}));
    for (std::size_t i = 0; i < z.values().size(); ++i) {
        EXPECT_DOUBLE_EQ(z.values()[i], 0.5 * (yb.values()[i] + yf.values()[i]));
    }
    auto sat = adaptive_fusion(x, yb, yf, Tensor<double>::zeros({4, 1}), Tensor<double>::full({1}, 100.0));
    EXPECT_LT(max_abs_diff(sat.values(), yb.values()), 1e-12);
}

TEST(Fusion, ConvexAndMatchesOracle) {
    std::mt19937_64 rng(6);
    for (int trial = 0; trial < 50; ++trial) {
        auto x = random_tensor<double>({2, 5, 6}, rng, false);
        auto yb = random_tensor<double>({2, 5, 6}, rng, false);
        auto yf = random_tensor<double>({2, 5, 6}, rng, false);
        auto w = random_tensor<double>({6, 1}, rng, false);
        auto b = random_tensor<double>({1}, rng, false);
        auto z = adaptive_fusion(x, yb, yf, w, b);
        oracle::Vec alphas;
        auto ref = oracle::fusion(vals(x), vals(yb), vals(yf), 6, vals(w), b.item(), &alphas);
        EXPECT_LT(max_abs_diff(z.values(), ref), 1e-12);
        for (double a : alphas) {
            EXPECT_GT(a, 0.0);
            EXPECT_LT(a, 1.0);
        }
        for (std::size_t i = 0; i < ref.size(); ++i) {
            EXPECT_GE(z.values()[i], std::min(yb.values()[i], yf.values()[i]) - 1e-12);
            EXPECT_LE(z.values()[i], std::max(yb.values()[i], yf.values()[i]) + 1e-12);
        }
    }
    auto x = random_tensor<double>({2, 4}, rng, false);
    auto y = random_tensor<double>({2, 3}, rng, false);
    EXPECT_THROW(adaptive_fusion(x, x, y, Tensor<double>::zeros({4, 1}), Tensor<double>::zeros({1})),
                 DimensionError);
}

TEST(PeriodScale, MatchesOracleAndLengths) {
    std::mt19937_64 rng(7);
    for (int trial = 0; trial < 30; ++trial) {
        const std::int64_t L = 5 + trial, D = 3, K = 1 + 2 * (trial % 3), s = 1 + trial % 3, p = trial % 2;
        auto z = random_tensor<double>({2, L, D}, rng, false);
        auto k = random_tensor<double>({K, D, D}, rng, false);
        auto b = random_tensor<double>({D}, rng, false);
        auto o = period_scale(z, k, b, s, p);
        EXPECT_EQ(o.dim(1), oracle::conv_length(L, K, s, p));
        EXPECT_LT(max_abs_diff(o.values(), oracle::conv(vals(z), 2, L, D, vals(k), vals(b), K, D, s, p)), 1e-12);
    }
    auto z = random_tensor<double>({1, 48, 2}, rng, false);
    auto k = random_tensor<double>({3, 2, 2}, rng, false);
    auto once = period_scale(z, k, Tensor<double>(), 2, 1);
    EXPECT_EQ(once.dim(1), 24);
    EXPECT_EQ(period_scale(once, k, Tensor<double>(), 2, 1).dim(1), 12);
}

TEST(PeriodScale, MaskDownsamplingIsWindowOr) {
    std::vector<std::uint8_t> m{0, 0, 0, 0, 1, 1};
    EXPECT_EQ(downsample_mask(m, 1, 6, 3, 2, 1), (std::vector<std::uint8_t>{0, 0, 1}));
    std::vector<std::uint8_t> m2{0, 0, 0, 1, 1, 1};
    EXPECT_EQ(downsample_mask(m2, 1, 6, 3, 2, 1), (std::vector<std::uint8_t>{0, 1, 1}));
}

TEST(Pyramid, ScaleLengthsAndCount) {
    std::mt19937_64 rng(8);
    ModelConfig c;
    c.max_len = 48;
    c.field_dim = 4;
    c = c.resolved({30, 6});
    PyramidMixer<float> m(c, 1);
    auto out = m.encode(random_batch(c, 3, rng));
    ASSERT_EQ(out.scales.size(), 3u);
    EXPECT_EQ(out.scales[0].dim(1), 48);
    EXPECT_EQ(out.scales[1].dim(1), 24);
    EXPECT_EQ(out.scales[2].dim(1), 12);

    c.pyramid = false;
    PyramidMixer<float> flat(c.resolved(c.vocab_sizes), 1);
    for (const auto& s : flat.encode(random_batch(c, 2, rng)).scales) EXPECT_EQ(s.dim(1), 48);
}

TEST(Pyramid, ZeroSecondMatricesMakeFlatStackIdentity) {
    std::mt19937_64 rng(9);
    auto c = tiny_config();
    c.pyramid = false;
    PyramidMixer<double> m(c, 3);
    for (auto& [name, t] : m.parameters()) {
        if (name.ends_with(".w2") || name.ends_with(".b2")) std::fill(t.values().begin(), t.values().end(), 0.0);
    }
    auto batch = random_batch(c, 4, rng);
    auto x = m.embed(batch);
    for (const auto& s : m.encode(batch).scales) EXPECT_EQ(s.values(), x.values());
}

TEST(Pyramid, BehaviorMixerIsOrderAwareFeatureMixerIsNot) {
    std::mt19937_64 rng(10);
    const std::int64_t L = 6, D = 4;
    auto x = random_tensor<double>({1, L, D}, rng, false);
    std::vector<double> perm(x.values().size());
    const std::vector<int> order{3, 0, 5, 1, 4, 2};
    for (std::int64_t i = 0; i < L; ++i) {
        std::copy_n(x.values().begin() + order[static_cast<std::size_t>(i)] * D, D, perm.begin() + i * D);
    }
    auto xp = Tensor<double>::from({1, L, D}, perm);
    auto fb = random_block(MixAxis::feature, D, 2, D, rng);
    auto yf = mixer_block_forward(x, fb, Activation::gelu, 1e-5);
    auto yfp = mixer_block_forward(xp, fb, Activation::gelu, 1e-5);
    for (std::int64_t i = 0; i < L; ++i) {
        for (std::int64_t c = 0; c < D; ++c) {
            EXPECT_NEAR(yfp.values()[static_cast<std::size_t>(i * D + c)],
                        yf.values()[static_cast<std::size_t>(order[static_cast<std::size_t>(i)] * D + c)], 1e-12);
        }
    }
    auto bb = random_block(MixAxis::behavior, L, 3, D, rng);
    auto yb = mixer_block_forward(x, bb, Activation::gelu, 1e-5);
    auto ybp = mixer_block_forward(xp, bb, Activation::gelu, 1e-5);
    double diff = 0;
    for (std::int64_t i = 0; i < L; ++i) {
        for (std::int64_t c = 0; c < D; ++c) {
            diff += std::abs(ybp.values()[static_cast<std::size_t>(i * D + c)] -
                             yb.values()[static_cast<std::size_t>(order[static_cast<std::size_t>(i)] * D + c)]);
        }
    }
    EXPECT_GT(diff, 1e-3);
}

TEST(Pyramid, FullModelHasMoreParametersThanEachAblation) {
    auto full = ModelConfig{}.resolved({500, 7, 20});
    const auto n_full = PyramidMixer<float>(full, 0).parameter_count();
    for (int v = 0; v < 3; ++v) {
        auto c = full;
        if (v == 0) c.cross_behavior = false;
        if (v == 1) c.cross_feature = false;
        if (v == 2) c.pyramid = false;
        EXPECT_GT(n_full, PyramidMixer<float>(c.resolved(c.vocab_sizes), 0).parameter_count()) << v;
    }
}

TEST(Embed, ConcatenatesFieldsAndPadsToZero) {
    auto c = tiny_config();
    PyramidMixer<double> m(c, 4);
    Batch b;
    b.size = 1;
    b.max_len = c.max_len;
    b.num_fields = 2;
    b.fields = {{0, 0, 0, 5, 7, 5}, {0, 0, 0, 3, 2, 3}};
    b.mask = {0, 0, 0, 1, 1, 1};
    b.targets = {4};
    auto x = m.embed(b);
    const auto& items = m.parameters()[0].second.values();
    const auto& side = m.parameters()[1].second.values();
    const auto d = c.field_dim;
    for (std::int64_t k = 0; k < d; ++k) {
        EXPECT_EQ(x.values()[static_cast<std::size_t>(3 * c.D + k)], items[static_cast<std::size_t>(5 * d + k)]);
        EXPECT_EQ(x.values()[static_cast<std::size_t>(3 * c.D + d + k)], side[static_cast<std::size_t>(3 * d + k)]);
        EXPECT_EQ(x.values()[static_cast<std::size_t>(k)], 0.0);
    }
    for (std::int64_t k = 0; k < c.D; ++k) {
        EXPECT_EQ(x.values()[static_cast<std::size_t>(3 * c.D + k)], x.values()[static_cast<std::size_t>(5 * c.D + k)]);
    }
    b.fields[1][4] = 5;
    EXPECT_THROW(m.embed(b), DataError);
}

TEST(Score, MatchesPoolProjectDotOracle) {
    std::mt19937_64 rng(11);
    ModelConfig c;
    c.max_len = 6;
    c.D = 4;
    c.D_prime = 2;
    c.L_prime = 2;
    c.num_layers = 2;
    c = c.resolved({10});
    PyramidMixer<double> m(c, 5);
    auto batch = random_batch(c, 2, rng);
    batch.mask[0] = 0;
    auto pyr = m.encode(batch);
    auto scores = m.score_items(pyr);
    ASSERT_EQ(scores.shape(), (Shape{2, 10}));
    std::vector<oracle::Vec> scales;
    for (const auto& s : pyr.scales) scales.push_back(vals(s));
    const auto params = m.parameters();
    const auto& head_w = params[params.size() - 2].second;
    const auto& head_b = params.back().second;
    auto ref = oracle::score(scales, pyr.masks, c.layer_lengths(), 2, c.D, vals(head_w), vals(head_b),
                             vals(m.item_table()), c.field_dim);
    EXPECT_LT(max_abs_diff(scores.values(), ref), 1e-12);
}

TEST(Score, IdenticalSequencesScoreIdentically) {
    std::mt19937_64 rng(12);
    auto c = tiny_config();
    PyramidMixer<float> m(c, 6);
    auto batch = random_batch(c, 2, rng);
    for (auto& f : batch.fields) std::copy_n(f.begin(), c.max_len, f.begin() + c.max_len);
    std::copy_n(batch.mask.begin(), c.max_len, batch.mask.begin() + c.max_len);
    // Rows sharing a GEMM may round differently in the last place, so rows are
    // compared to float precision and repeated calls bit for bit.
    auto s = m.score(batch).values();
    for (int v = 0; v < 20; ++v) {
        EXPECT_NEAR(s[static_cast<std::size_t>(v)], s[static_cast<std::size_t>(20 + v)], 1e-6) << v;
    }
    EXPECT_EQ(m.score(batch).values(), s);
}

TEST(Score, ArgmaxFollowsDotProductGeometry) {
    // Orthonormal item rows; a user vector equal to row j scores j highest.
    auto table = Tensor<double>::zeros({5, 5});
    for (int i = 0; i < 5; ++i) table.values()[static_cast<std::size_t>(i * 5 + i)] = 1.0;
    auto u = Tensor<double>::from({1, 5}, {0, 0, 0, 1, 0});
    auto s = matmul_nt(u, table).values();
    EXPECT_EQ(std::max_element(s.begin(), s.end()) - s.begin(), 3);
}

TEST(Pyramid, EndToEndGradientCheck) {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        std::mt19937_64 rng(seed);
        auto c = tiny_config();
        c.activation = seed % 2 ? Activation::swish : Activation::gelu;
        PyramidMixer<double> m(c, seed);
        auto batch = random_batch(c, 3, rng);
        std::vector<std::uint8_t> rows(3, 1);
        auto loss_of = [&] {
            NoGradGuard ng;
            return softmax_cross_entropy(m.score(batch), batch.targets, rows, 2).item();
        };
        for (auto& [name, p] : m.parameters()) p.zero_grad();
        auto loss = softmax_cross_entropy(m.score(batch), batch.targets, rows, 2);
        backward(loss);
        for (auto& [name, p] : m.parameters()) {
            // The padding row is a fixed zero vector, not a trained weight.
            const std::size_t first = name.starts_with("embed.") ? static_cast<std::size_t>(p.dim(1)) : 0;
            EXPECT_LT(pymx::testing::max_grad_error<double>(p, loss_of, 1e-6, 1e-6, first), 1e-3)
                << name << " seed " << seed;
        }
    }
}

TEST(Pyramid, CastToDoublePreservesScores) {
    std::mt19937_64 rng(13);
    auto c = tiny_config();
    PyramidMixer<float> m(c, 7);
    auto md = m.cast<double>();
    auto batch = random_batch(c, 2, rng);
    auto a = m.score(batch).values();
    auto b = md.score(batch).values();
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-5);
}
