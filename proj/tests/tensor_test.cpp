#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "finite_difference.hpp"
#include "pymx/error.hpp"
#include "pymx/ops.hpp"
#include "pymx/tensor.hpp"

namespace pymx {
namespace {

using testing::max_grad_error;
using testing::random_tensor;
using testing::weighted_sum;

constexpr int kSeeds = 20;
constexpr double kTol = 1e-3;

TEST(MatmulTest, IdentityRightFactor) {
    auto a = Tensor<float>::from({2, 2}, {1, 2, 3, 4});
    auto eye = Tensor<float>::from({2, 2}, {1, 0, 0, 1});
    auto y = matmul(a, eye);
    EXPECT_EQ(y.values(), (Buffer<float>{1, 2, 3, 4}));
}

TEST(MatmulTest, InnerProduct) {
    auto a = Tensor<float>::from({1, 2}, {1, 2});
    auto b = Tensor<float>::from({2, 1}, {3, 4});
    EXPECT_FLOAT_EQ(matmul(a, b).item(), 11.0f);
}

TEST(MatmulTest, ShapeMismatchNamesBothShapes) {
    auto a = Tensor<float>::zeros({2, 3});
    auto b = Tensor<float>::zeros({2, 3});
    try {
        matmul(a, b);
        FAIL() << "expected DimensionError";
    } catch (const DimensionError& e) {
        std::string msg = e.what();
        EXPECT_NE(msg.find("[2x3]"), std::string::npos) << msg;
        EXPECT_NE(msg.find("by [2x3]"), std::string::npos) << msg;
    }
}

TEST(MatmulTest, GradientMatchesFiniteDifferences) {
    for (int seed = 0; seed < kSeeds; ++seed) {
        std::mt19937_64 rng(seed);
        auto a = random_tensor<double>({3, 4}, rng);
        auto b = random_tensor<double>({4, 5}, rng);
        auto w = random_tensor<double>({3, 5}, rng, false);
        auto loss = weighted_sum(matmul(a, b), w);
        backward(loss);
        auto f = [&] { return weighted_sum(matmul(a, b), w).item(); };
        EXPECT_LT(max_grad_error<double>(a, f), kTol) << "seed " << seed;
        EXPECT_LT(max_grad_error<double>(b, f), kTol) << "seed " << seed;
    }
}

TEST(MatmulTest, SinglePrecisionGradientCheck) {
    std::mt19937_64 rng(7);
    auto a = random_tensor<float>({3, 4}, rng);
    auto b = random_tensor<float>({4, 5}, rng);
    auto w = random_tensor<float>({3, 5}, rng, false);
    auto loss = weighted_sum(matmul(a, b), w);
    backward(loss);
    auto f = [&] { return weighted_sum(matmul(a, b), w).item(); };
    // Bilinear in each factor, so a wide step is exact up to rounding.
    EXPECT_LT(max_grad_error<float>(a, f, 1e-2, 1e-2), kTol);
    EXPECT_LT(max_grad_error<float>(b, f, 1e-2, 1e-2), kTol);
}

TEST(MatmulTest, TransposedVariantAgreesWithExplicitTranspose) {
    std::mt19937_64 rng(3);
    auto a = random_tensor<double>({3, 4}, rng, false);
    auto b = random_tensor<double>({5, 4}, rng, false);
    std::vector<double> bt(20);
    for (int i = 0; i < 5; ++i)
        for (int j = 0; j < 4; ++j) bt[j * 5 + i] = b.values()[i * 4 + j];
    auto expect = matmul(a, Tensor<double>::from({4, 5}, bt));
    auto got = matmul_nt(a, b);
    for (int i = 0; i < 15; ++i) EXPECT_NEAR(got.values()[i], expect.values()[i], 1e-12);
}

TEST(MatmulTest, MacTallyCountsProducts) {
    reset_mac_tally();
    NoGradGuard guard;
    matmul(Tensor<float>::zeros({3, 4}), Tensor<float>::zeros({4, 5}));
    EXPECT_EQ(mac_tally(), 60u);
}

Tensor<double> ones(std::int64_t n) { return Tensor<double>::full({n}, 1.0); }
Tensor<double> zeros(std::int64_t n) { return Tensor<double>::zeros({n}); }

TEST(LayerNormTest, KnownVector) {
    auto x = Tensor<double>::from({3}, {1, 2, 3});
    auto y = layer_norm(x, ones(3), zeros(3), 0.0);
    EXPECT_NEAR(y.values()[0], -1.224744871391589, 1e-4);
    EXPECT_NEAR(y.values()[1], 0.0, 1e-12);
    EXPECT_NEAR(y.values()[2], 1.224744871391589, 1e-4);
}

TEST(LayerNormTest, ConstantVectorMapsToZero) {
    auto x = Tensor<float>::from({3}, {5, 5, 5});
    auto y = layer_norm(x, Tensor<float>::full({3}, 1.0f), Tensor<float>::zeros({3}), 1e-5f);
    for (auto v : y.values()) EXPECT_EQ(v, 0.0f);
}

TEST(LayerNormTest, OutputStatistics) {
    std::mt19937_64 rng(11);
    auto x = random_tensor<float>({16, 32}, rng, false, 3.0);
    auto y = layer_norm(x, Tensor<float>::full({32}, 1.0f), Tensor<float>::zeros({32}), 1e-5f);
    for (int r = 0; r < 16; ++r) {
        double mean = 0, var = 0;
        for (int d = 0; d < 32; ++d) mean += y.values()[r * 32 + d];
        mean /= 32;
        for (int d = 0; d < 32; ++d) var += std::pow(y.values()[r * 32 + d] - mean, 2);
        var /= 32;
        EXPECT_LT(std::abs(mean), 1e-6);
        EXPECT_LT(std::abs(var - 1.0), 1e-4);
    }
}

TEST(LayerNormTest, RejectsWidthOne) {
    EXPECT_THROW(layer_norm(Tensor<double>::zeros({4, 1}), ones(1), zeros(1), 1e-5), DimensionError);
}

TEST(LayerNormTest, GradientMatchesFiniteDifferences) {
    for (int seed = 0; seed < kSeeds; ++seed) {
        std::mt19937_64 rng(100 + seed);
        auto x = random_tensor<double>({4, 6}, rng);
        auto g = random_tensor<double>({6}, rng);
        auto b = random_tensor<double>({6}, rng);
        auto w = random_tensor<double>({4, 6}, rng, false);
        auto loss = weighted_sum(layer_norm(x, g, b, 1e-5), w);
        backward(loss);
        auto f = [&] { return weighted_sum(layer_norm(x, g, b, 1e-5), w).item(); };
        EXPECT_LT(max_grad_error<double>(x, f), kTol);
        EXPECT_LT(max_grad_error<double>(g, f), kTol);
        EXPECT_LT(max_grad_error<double>(b, f), kTol);
    }
}

TEST(ActivationTest, SwishAtZero) {
    auto y = activation(Tensor<float>::from({1}, {0.0f}), Activation::swish);
    EXPECT_EQ(y.item(), 0.0f);
}

TEST(ActivationTest, GeluMatchesReferenceFormula) {
    auto x = Tensor<double>::from({3}, {-3, 0, 3});
    auto y = activation(x, Activation::gelu);
    for (int i = 0; i < 3; ++i) {
        const double v = x.values()[i];
        const double ref = 0.5 * v * (1.0 + std::tanh(std::sqrt(2.0 / M_PI) * (v + 0.044715 * v * v * v)));
        EXPECT_NEAR(y.values()[i], ref, 1e-6);
        EXPECT_NEAR(gelu_reference(v), ref, 1e-12);
    }
}

TEST(ActivationTest, GradientAtOne) {
    for (auto kind : {Activation::gelu, Activation::swish}) {
        auto x = Tensor<double>::from({1}, {1.0}, true);
        auto loss = sum(activation(x, kind));
        backward(loss);
        auto f = [&] { return sum(activation(x, kind)).item(); };
        EXPECT_LT(max_grad_error<double>(x, f), kTol);
    }
    auto xf = Tensor<float>::from({1}, {1.0f}, true);
    auto lf = sum(activation(xf, Activation::gelu));
    backward(lf);
    auto ff = [&] { return sum(activation(xf, Activation::gelu)).item(); };
    EXPECT_LT(max_grad_error<float>(xf, ff, 1e-2, 1e-2), kTol);
}

TEST(ActivationTest, UnknownKindIsConfigError) {
    EXPECT_THROW(parse_activation("relu"), ConfigError);
    EXPECT_EQ(parse_activation("swish"), Activation::swish);
}

TEST(ActivationTest, RandomGradients) {
    for (int seed = 0; seed < kSeeds; ++seed) {
        std::mt19937_64 rng(200 + seed);
        auto x = random_tensor<double>({5, 3}, rng, true, 2.0);
        auto w = random_tensor<double>({5, 3}, rng, false);
        for (auto kind : {Activation::gelu, Activation::swish}) {
            x.zero_grad();
            auto loss = weighted_sum(activation(x, kind), w);
            backward(loss);
            auto f = [&] { return weighted_sum(activation(x, kind), w).item(); };
            EXPECT_LT(max_grad_error<double>(x, f), kTol);
        }
    }
}

TEST(Conv1dTest, DeltaKernelIsIdentity) {
    std::mt19937_64 rng(5);
    auto x = random_tensor<float>({7, 3}, rng, false);
    auto k = Tensor<float>::from({1, 3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
    auto y = conv1d(x, k, Tensor<float>(), 1, 0);
    EXPECT_EQ(y.shape(), x.shape());
    EXPECT_EQ(y.values(), x.values());
}

TEST(Conv1dTest, StridedLength) {
    EXPECT_EQ(conv1d_output_length(50, 3, 2, 1), 25);
    auto y = conv1d(Tensor<float>::zeros({50, 4}), Tensor<float>::zeros({3, 4, 4}), Tensor<float>(), 2, 1);
    EXPECT_EQ(y.shape(), (Shape{25, 4}));
}

TEST(Conv1dTest, LengthFormulaMatchesWindowEnumeration) {
    for (std::int64_t len = 1; len <= 64; ++len) {
        for (std::int64_t k : {1, 3, 5, 7}) {
            for (std::int64_t s : {1, 2, 3}) {
                for (std::int64_t p : {0, 1, 2, 3}) {
                    std::int64_t windows = 0;
                    for (std::int64_t start = -p; start + k - 1 <= len - 1 + p; start += s) ++windows;
                    ASSERT_EQ(conv1d_output_length(len, k, s, p), windows) << len << " " << k << " " << s << " " << p;
                    if (windows == 0) continue;
                    auto y = conv1d(Tensor<float>::zeros({len, 2}), Tensor<float>::zeros({k, 2, 2}), Tensor<float>(),
                                    s, p);
                    ASSERT_EQ(y.dim(0), windows);
                }
            }
        }
    }
}

TEST(Conv1dTest, TooShortAndEvenKernel) {
    EXPECT_THROW(conv1d(Tensor<float>::zeros({2, 2}), Tensor<float>::zeros({5, 2, 2}), Tensor<float>(), 1, 0),
                 SequenceTooShortError);
    EXPECT_THROW(conv1d(Tensor<float>::zeros({8, 2}), Tensor<float>::zeros({2, 2, 2}), Tensor<float>(), 1, 0),
                 DimensionError);
}

TEST(Conv1dTest, GradientMatchesFiniteDifferences) {
    for (int seed = 0; seed < kSeeds; ++seed) {
        std::mt19937_64 rng(300 + seed);
        auto x = random_tensor<double>({2, 9, 3}, rng);
        auto k = random_tensor<double>({3, 3, 4}, rng);
        auto b = random_tensor<double>({4}, rng);
        const std::int64_t stride = 1 + seed % 3;
        auto probe = conv1d(x.detach(), k.detach(), b.detach(), stride, 1);
        auto w = random_tensor<double>(probe.shape(), rng, false);
        auto loss = weighted_sum(conv1d(x, k, b, stride, 1), w);
        backward(loss);
        auto f = [&] { return weighted_sum(conv1d(x, k, b, stride, 1), w).item(); };
        EXPECT_LT(max_grad_error<double>(x, f), kTol);
        EXPECT_LT(max_grad_error<double>(k, f), kTol);
        EXPECT_LT(max_grad_error<double>(b, f), kTol);
    }
}

TEST(BackwardTest, SumGivesOnes) {
    auto x = Tensor<float>::full({2, 3, 2}, 0.5f, true);
    auto loss = sum(x);
    backward(loss);
    for (auto g : x.grad()) EXPECT_EQ(g, 1.0f);
}

TEST(BackwardTest, SquareGivesTwiceInput) {
    auto x = Tensor<float>::from({2}, {1, 2}, true);
    auto loss = sum(mul(x, x));
    backward(loss);
    EXPECT_FLOAT_EQ(x.grad()[0], 2.0f);
    EXPECT_FLOAT_EQ(x.grad()[1], 4.0f);
}

TEST(BackwardTest, NonScalarLossIsContractError) {
    auto x = Tensor<float>::full({2}, 1.0f, true);
    auto y = scale(x, 2.0f);
    EXPECT_THROW(backward(y), ContractError);
}

TEST(BackwardTest, SecondBackwardIsStateError) {
    auto x = Tensor<float>::full({2}, 1.0f, true);
    auto loss = sum(scale(x, 3.0f));
    backward(loss);
    EXPECT_THROW(backward(loss), StateError);
}

TEST(BackwardTest, SharedSubexpressionsAccumulate) {
    std::mt19937_64 rng(9);
    auto x = random_tensor<double>({3, 3}, rng);
    auto w = random_tensor<double>({3, 3}, rng);
    // Shared: h feeds two consumers.
    auto h = matmul(x, w);
    auto shared = sum(add(activation(h, Activation::gelu), mul(h, h)));
    backward(shared);
    std::vector<double> gx(x.grad().begin(), x.grad().end());
    std::vector<double> gw(w.grad().begin(), w.grad().end());

    // Unrolled: the product is recomputed for each consumer.
    x.zero_grad();
    w.zero_grad();
    auto h1 = matmul(x, w);
    auto h2 = matmul(x, w);
    auto h3 = matmul(x, w);
    auto unrolled = sum(add(activation(h1, Activation::gelu), mul(h2, h3)));
    backward(unrolled);
    for (int i = 0; i < 9; ++i) {
        EXPECT_NEAR(x.grad()[i], gx[i], 1e-12);
        EXPECT_NEAR(w.grad()[i], gw[i], 1e-12);
    }
}

TEST(BackwardTest, NoGradGuardRecordsNothing) {
    auto x = Tensor<float>::full({2}, 1.0f, true);
    NoGradGuard guard;
    auto y = sum(x);
    EXPECT_FALSE(y.requires_grad());
}

TEST(OpGradientTest, LinearTokenLinearMixPoolConcat) {
    for (int seed = 0; seed < kSeeds; ++seed) {
        std::mt19937_64 rng(400 + seed);
        auto x = random_tensor<double>({2, 5, 4}, rng);
        auto wf = random_tensor<double>({4, 3}, rng);
        auto bf = random_tensor<double>({3}, rng);
        auto wt = random_tensor<double>({5, 2}, rng);
        auto bt = random_tensor<double>({2}, rng);
        auto alpha_logit = random_tensor<double>({2, 2, 1}, rng);
        std::vector<std::uint8_t> mask{1, 0, 1, 1, 0, 1, 0, 0, 1, 1};
        auto wout = random_tensor<double>({2, 10}, rng, false);
        auto build = [&] {
            auto a = linear(x, wf, bf);
            auto t = token_linear(a, wt, bt);
            auto u = token_linear(linear(x, wf, bf), wt, Tensor<double>());
            auto mixed = convex_mix(sigmoid(alpha_logit), t, u);
            auto pooled = masked_mean_pool(a, mask);
            auto flat = masked_mean_pool(mixed, std::vector<std::uint8_t>(4, 1));
            auto raw = masked_mean_pool(x, mask);
            return weighted_sum(concat_last(std::vector<Tensor<double>>{pooled, flat, raw}), wout);
        };
        auto loss = build();
        backward(loss);
        auto f = [&] { return build().item(); };
        for (auto* p : {&x, &wf, &bf, &wt, &bt, &alpha_logit}) EXPECT_LT(max_grad_error<double>(*p, f), kTol);
    }
}

TEST(OpGradientTest, EmbeddingAndCrossEntropy) {
    for (int seed = 0; seed < kSeeds; ++seed) {
        std::mt19937_64 rng(500 + seed);
        auto table = random_tensor<double>({6, 3}, rng);
        std::vector<std::int32_t> idx{0, 2, 5, 2};
        auto proj = random_tensor<double>({3, 6}, rng);
        std::vector<std::int32_t> targets{1, 3, 4, 5};
        std::vector<std::uint8_t> mask{1, 1, 0, 1};
        auto build = [&] {
            auto e = embedding(table, idx, Shape{4}, 0);
            return softmax_cross_entropy(matmul(e, proj), targets, mask, 1);
        };
        auto loss = build();
        backward(loss);
        for (int d = 0; d < 3; ++d) EXPECT_EQ(table.grad()[d], 0.0) << "padding row receives gradient";
        auto f = [&] { return build().item(); };
        EXPECT_LT(max_grad_error<double>(proj, f), kTol);
        // Row 0 is the padding row and is frozen; check the others.
        std::vector<double> saved(table.grad().begin(), table.grad().end());
        for (std::size_t i = 3; i < 18; ++i) {
            const double keep = table.values()[i];
            table.values()[i] = keep + 1e-6;
            const double up = f();
            table.values()[i] = keep - 1e-6;
            const double down = f();
            table.values()[i] = keep;
            EXPECT_LT(testing::relative_error(saved[i], (up - down) / 2e-6), kTol);
        }
    }
}

TEST(OpErrorTest, CrossEntropyAllMaskedIsContractError) {
    auto logits = Tensor<float>::zeros({2, 3});
    std::vector<std::int32_t> t{0, 1};
    std::vector<std::uint8_t> m{0, 0};
    EXPECT_THROW(softmax_cross_entropy(logits, t, m), ContractError);
}

}  // namespace
}  // namespace pymx
