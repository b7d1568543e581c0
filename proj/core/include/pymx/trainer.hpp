#pragma once

// Loss, Adam, and the epoch loop with early stopping and checkpoints.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "pymx/checkpoint.hpp"
#include "pymx/data.hpp"
#include "pymx/evaluator.hpp"
#include "pymx/model.hpp"

namespace pymx {

/// Mean softmax cross-entropy over rows with mask 1, against items >= 2.
template <typename T>
Tensor<T> compute_loss(const Tensor<T>& scores, std::span<const std::int32_t> targets,
                       std::span<const std::uint8_t> mask);

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
};

class Adam {
public:
    Adam(std::vector<NamedTensor<float>> params, AdamConfig config);

    /// DivergenceError naming the parameter if any gradient is not finite;
    /// parameters are left untouched in that case.
    void step();
    void zero_grad();

    const AdamConfig& config() const noexcept { return config_; }
    std::int64_t steps() const noexcept { return step_; }

    /// Moments as "adam.m/<name>" and "adam.v/<name>" tensors.
    std::vector<NamedTensor<float>> state() const;
    void load_state(const Checkpoint& ckpt, std::int64_t steps);

private:
    std::vector<NamedTensor<float>> params_;
    std::vector<Buffer<float>> m_, v_;
    AdamConfig config_;
    std::int64_t step_ = 0;
};

struct TrainConfig {
    std::int64_t max_epochs = 200;
    std::int64_t batch_size = 256;
    std::int64_t patience = 10;
    AdamConfig adam;
    EvalOptions eval;

    nlohmann::json to_json() const;
    /// Rejects unknown keys; missing keys keep their defaults.
    static TrainConfig from_json(const nlohmann::json& j);
    void validate() const;
};

struct EpochLog {
    std::int64_t epoch = 0;
    double train_loss = 0.0;
    double valid_hr10 = 0.0;
    double valid_ndcg10 = 0.0;
    double valid_mrr10 = 0.0;
    double wall_seconds = 0.0;

    nlohmann::json to_json() const;
};

struct TrainResult {
    std::vector<EpochLog> log;
    std::int64_t best_epoch = 0;
    double best_valid_mrr = -1.0;
    bool diverged = false;
    std::string divergence_message;
};

class Trainer {
public:
    /// Fresh run; model parameters and shuffles derive from `seed`.
    Trainer(const Dataset& ds, const Splits& splits, const ModelConfig& model, const TrainConfig& train,
            std::uint64_t seed);
    /// Continues the run captured in `ckpt` (a "last" checkpoint). `best`, if
    /// given, restores the best parameters seen so far.
    static Trainer resume(const Dataset& ds, const Splits& splits, const Checkpoint& ckpt,
                          const std::optional<Checkpoint>& best = std::nullopt);

    /// Checkpoints (checkpoint.pymx for best, last.pymx for latest) and the
    /// JSON-lines log are written under this directory when set.
    void set_output_dir(std::filesystem::path dir);
    void on_epoch(std::function<void(const EpochLog&)> callback) { callback_ = std::move(callback); }

    /// One pass over the training split; returns the mean loss.
    double train_epoch();
    /// Runs epochs until patience or max_epochs. Divergence stops training
    /// and is reported in the result; the best parameters are kept.
    TrainResult train();

    PyramidMixer<float>& model() noexcept { return model_; }
    const PyramidMixer<float>& model() const noexcept { return model_; }
    /// Model holding the best validation parameters so far.
    PyramidMixer<float> best_model() const;

    Checkpoint checkpoint() const;
    std::int64_t epoch() const noexcept { return epoch_; }
    const TrainConfig& config() const noexcept { return train_; }

private:
    const Dataset* ds_;
    const Splits* splits_;
    TrainConfig train_;
    std::uint64_t seed_;
    PyramidMixer<float> model_;
    Adam adam_;
    std::mt19937_64 rng_;
    std::int64_t epoch_ = 0;
    std::int64_t best_epoch_ = 0;
    double best_metric_ = -1.0;
    std::int64_t since_best_ = 0;
    std::vector<Buffer<float>> best_params_;
    std::optional<std::filesystem::path> out_dir_;
    std::function<void(const EpochLog&)> callback_;
};

}  // namespace pymx
