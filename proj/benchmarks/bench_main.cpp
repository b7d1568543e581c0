// Kernel, block and end-to-end timings at the default model size.

#include <random>

#include <benchmark/benchmark.h>

#include "pymx/evaluator.hpp"
#include "pymx/model.hpp"
#include "pymx/synthetic.hpp"
#include "pymx/trainer.hpp"

using namespace pymx;

namespace {

Tensor<float> random_tensor(Shape shape, std::mt19937_64& rng, bool grad = false) {
    std::normal_distribution<float> n(0.0f, 1.0f);
    Buffer<float> v(static_cast<std::size_t>(numel(shape)));
    for (auto& x : v) x = n(rng);
    return Tensor<float>::from(std::move(shape), std::move(v), grad);
}

// ML-100K-like vocabularies: items, ratings, genres.
ModelConfig default_config() { return ModelConfig{}.resolved({1351, 7, 20}); }

Batch full_batch(const ModelConfig& c, std::int64_t size, std::mt19937_64& rng) {
    Batch b;
    b.size = size;
    b.max_len = c.max_len;
    b.num_fields = c.num_fields();
    const auto cells = static_cast<std::size_t>(size * c.max_len);
    b.mask.assign(cells, 1);
    for (auto v : c.vocab_sizes) {
        std::uniform_int_distribution<std::int32_t> d(2, static_cast<std::int32_t>(v - 1));
        std::vector<std::int32_t> f(cells);
        for (auto& x : f) x = d(rng);
        b.fields.push_back(std::move(f));
    }
    std::uniform_int_distribution<std::int32_t> item(2, static_cast<std::int32_t>(c.num_items() - 1));
    for (std::int64_t i = 0; i < size; ++i) {
        b.targets.push_back(item(rng));
        b.users.push_back(static_cast<std::int32_t>(i));
    }
    return b;
}

void BM_Matmul(benchmark::State& state) {
    const auto n = state.range(0);
    std::mt19937_64 rng(1);
    auto a = random_tensor({n, n}, rng), b = random_tensor({n, n}, rng);
    NoGradGuard ng;
    for (auto _ : state) benchmark::DoNotOptimize(matmul(a, b));
    state.SetItemsProcessed(state.iterations() * n * n * n);
}
BENCHMARK(BM_Matmul)->Arg(64)->Arg(256);

void BM_MixerBlock(benchmark::State& state) {
    const bool behavior = state.range(0) != 0;
    const std::int64_t B = 32, L = 50, D = 96;
    std::mt19937_64 rng(2);
    const auto width = behavior ? L : D;
    const auto latent = width / 4;
    auto x = random_tensor({B, L, D}, rng, true);
    MixerBlock<float> blk{behavior ? MixAxis::behavior : MixAxis::feature,
                          random_tensor({width, latent}, rng, true),
                          random_tensor({latent}, rng, true),
                          random_tensor({latent, width}, rng, true),
                          random_tensor({width}, rng, true),
                          random_tensor({D}, rng, true),
                          random_tensor({D}, rng, true)};
    for (auto _ : state) {
        auto loss = sum(mixer_block_forward(x, blk, Activation::gelu, 1e-5f));
        backward(loss);
    }
    state.SetLabel(behavior ? "behavior" : "feature");
}
BENCHMARK(BM_MixerBlock)->Arg(0)->Arg(1);

void BM_Score(benchmark::State& state) {
    const auto c = default_config();
    std::mt19937_64 rng(3);
    PyramidMixer<float> m(c, 0);
    const auto batch = full_batch(c, state.range(0), rng);
    NoGradGuard ng;
    for (auto _ : state) benchmark::DoNotOptimize(m.score(batch));
    state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_Score)->Arg(1)->Arg(256);

void BM_TrainStep(benchmark::State& state) {
    const auto c = default_config();
    std::mt19937_64 rng(4);
    PyramidMixer<float> m(c, 0);
    Adam adam(m.parameters(), {});
    const auto batch = full_batch(c, state.range(0), rng);
    const std::vector<std::uint8_t> rows(static_cast<std::size_t>(batch.size), 1);
    for (auto _ : state) {
        adam.zero_grad();
        auto loss = compute_loss(m.score(batch), batch.targets, rows);
        backward(loss);
        adam.step();
    }
    state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_TrainStep)->Arg(32)->Arg(256)->Unit(benchmark::kMillisecond);

void BM_PlantedEpoch(benchmark::State& state) {
    auto ds = build_dataset(planted_rule_records({}));
    auto splits = split_leave_one_out(ds, 5);
    TrainConfig t;
    t.batch_size = 32;
    Trainer trainer(ds, splits, ModelConfig{}.resolved(ds.vocab_sizes()), t, 0);
    for (auto _ : state) benchmark::DoNotOptimize(trainer.train_epoch());
    state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(splits.train.size()));
}
BENCHMARK(BM_PlantedEpoch)->Unit(benchmark::kMillisecond);

void BM_CountCost(benchmark::State& state) {
    const auto c = default_config();
    for (auto _ : state) benchmark::DoNotOptimize(count_cost(c));
}
BENCHMARK(BM_CountCost);

}  // namespace

BENCHMARK_MAIN();
