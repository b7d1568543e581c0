#include "pymx/trainer.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <mutex>
#include <set>
#include <sstream>

#ifdef __GLIBC__
#include <malloc.h>
#endif

#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include "pymx/error.hpp"

namespace pymx {

namespace {

constexpr std::int64_t kSliceRows = 32;

// Batch-sized buffers are released and requested again every step; keep them
// on the heap rather than returning them to the kernel.
void keep_freed_memory() {
#ifdef __GLIBC__
    static std::once_flag once;
    std::call_once(once, [] {
        mallopt(M_MMAP_THRESHOLD, 32 << 20);
        mallopt(M_TRIM_THRESHOLD, 1 << 30);
    });
#endif
}

}  // namespace

template <typename T>
Tensor<T> compute_loss(const Tensor<T>& scores, std::span<const std::int32_t> targets,
                       std::span<const std::uint8_t> mask) {
    return softmax_cross_entropy(scores, targets, mask, Vocab::kUnknown + 1);
}

template Tensor<float> compute_loss(const Tensor<float>&, std::span<const std::int32_t>,
                                    std::span<const std::uint8_t>);
template Tensor<double> compute_loss(const Tensor<double>&, std::span<const std::int32_t>,
                                     std::span<const std::uint8_t>);

Adam::Adam(std::vector<NamedTensor<float>> params, AdamConfig config)
    : params_(std::move(params)), config_(config) {
    for (const auto& [name, p] : params_) {
        m_.emplace_back(p.values().size(), 0.0f);
        v_.emplace_back(p.values().size(), 0.0f);
    }
}

void Adam::zero_grad() {
    for (auto& [name, p] : params_) p.zero_grad();
}

void Adam::step() {
    for (const auto& [name, p] : params_) {
        for (float g : p.grad()) {
            if (!std::isfinite(g)) {
                throw DivergenceError(fmt::format("non-finite gradient in parameter '{}' at step {}", name, step_ + 1));
            }
        }
    }
    ++step_;
    const double c1 = 1.0 - std::pow(config_.beta1, static_cast<double>(step_));
    const double c2 = 1.0 - std::pow(config_.beta2, static_cast<double>(step_));
    const auto b1 = static_cast<float>(config_.beta1), b2 = static_cast<float>(config_.beta2);
    const auto a1 = static_cast<float>(1.0 - config_.beta1), a2 = static_cast<float>(1.0 - config_.beta2);
    const auto lr_t = static_cast<float>(config_.lr / c1);
    const auto inv_sqrt_c2 = static_cast<float>(1.0 / std::sqrt(c2));
    const auto eps = static_cast<float>(config_.eps), wd = static_cast<float>(config_.weight_decay);
    for (std::size_t i = 0; i < params_.size(); ++i) {
        auto& p = params_[i].second;
        auto w = p.data();
        auto g = p.grad();
        auto& m = m_[i];
        auto& v = v_[i];
        for (std::size_t j = 0; j < w.size(); ++j) {
            const float gj = g[j] + wd * w[j];
            m[j] = b1 * m[j] + a1 * gj;
            v[j] = b2 * v[j] + a2 * gj * gj;
            w[j] -= lr_t * m[j] / (std::sqrt(v[j]) * inv_sqrt_c2 + eps);
        }
    }
}

std::vector<NamedTensor<float>> Adam::state() const {
    std::vector<NamedTensor<float>> out;
    for (std::size_t i = 0; i < params_.size(); ++i) {
        out.emplace_back("adam.m/" + params_[i].first, Tensor<float>::from(params_[i].second.shape(), m_[i]));
    }
    for (std::size_t i = 0; i < params_.size(); ++i) {
        out.emplace_back("adam.v/" + params_[i].first, Tensor<float>::from(params_[i].second.shape(), v_[i]));
    }
    return out;
}

void Adam::load_state(const Checkpoint& ckpt, std::int64_t steps) {
    for (std::size_t i = 0; i < params_.size(); ++i) {
        const auto& m = ckpt.tensor("adam.m/" + params_[i].first);
        const auto& v = ckpt.tensor("adam.v/" + params_[i].first);
        if (m.shape() != params_[i].second.shape() || v.shape() != params_[i].second.shape()) {
            throw FormatError("optimizer moments for '" + params_[i].first + "' do not match the parameter shape");
        }
        m_[i] = m.values();
        v_[i] = v.values();
    }
    step_ = steps;
}

namespace {

const std::set<std::string>& train_keys() {
    static const std::set<std::string> keys = {"max_epochs", "batch_size", "patience", "lr",
                                               "beta1",      "beta2",      "eps",      "weight_decay"};
    return keys;
}

template <typename V>
void read_key(const nlohmann::json& j, const char* key, V& out) {
    if (!j.contains(key)) return;
    try {
        out = j.at(key).get<V>();
    } catch (const nlohmann::json::exception&) {
        throw ConfigError(fmt::format("train.{}: wrong type ({})", key, j.at(key).dump()));
    }
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace

nlohmann::json TrainConfig::to_json() const {
    return {{"max_epochs", max_epochs}, {"batch_size", batch_size}, {"patience", patience},
            {"lr", adam.lr},            {"beta1", adam.beta1},      {"beta2", adam.beta2},
            {"eps", adam.eps},          {"weight_decay", adam.weight_decay}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
    if (!j.is_object()) throw ConfigError("train: expected a JSON object");
    for (const auto& [key, value] : j.items()) {
        if (!train_keys().count(key)) throw ConfigError(fmt::format("train.{}: unknown key", key));
    }
    TrainConfig c;
    read_key(j, "max_epochs", c.max_epochs);
    read_key(j, "batch_size", c.batch_size);
    read_key(j, "patience", c.patience);
    read_key(j, "lr", c.adam.lr);
    read_key(j, "beta1", c.adam.beta1);
    read_key(j, "beta2", c.adam.beta2);
    read_key(j, "eps", c.adam.eps);
    read_key(j, "weight_decay", c.adam.weight_decay);
    return c;
}

void TrainConfig::validate() const {
    auto require = [](bool ok, const std::string& m) {
        if (!ok) throw ConfigError(m);
    };
    require(max_epochs >= 1, fmt::format("train.max_epochs: must be at least 1, got {}", max_epochs));
    require(batch_size >= 1, fmt::format("train.batch_size: must be positive, got {}", batch_size));
    require(patience >= 0, fmt::format("train.patience: must be non-negative, got {}", patience));
    require(adam.lr > 0.0, fmt::format("train.lr: must be positive, got {}", adam.lr));
    require(adam.beta1 >= 0.0 && adam.beta1 < 1.0, fmt::format("train.beta1: must be in [0, 1), got {}", adam.beta1));
    require(adam.beta2 >= 0.0 && adam.beta2 < 1.0, fmt::format("train.beta2: must be in [0, 1), got {}", adam.beta2));
    require(adam.eps > 0.0, fmt::format("train.eps: must be positive, got {}", adam.eps));
    require(adam.weight_decay >= 0.0, fmt::format("train.weight_decay: must be non-negative, got {}",
                                                  adam.weight_decay));
}

nlohmann::json EpochLog::to_json() const {
    return {{"epoch", epoch},           {"train_loss", train_loss},     {"valid_hr10", valid_hr10},
            {"valid_ndcg10", valid_ndcg10}, {"valid_mrr10", valid_mrr10}, {"wall_seconds", wall_seconds}};
}

Trainer::Trainer(const Dataset& ds, const Splits& splits, const ModelConfig& model, const TrainConfig& train,
                 std::uint64_t seed)
    : ds_(&ds),
      splits_(&splits),
      train_(train),
      seed_(seed),
      model_(model, seed),
      adam_(model_.parameters(), train.adam),
      rng_(seed ^ 0x243F6A8885A308D3ULL) {
    train_.validate();
    if (splits.train.empty()) throw DataError("training split is empty");
    if (splits.valid.empty()) throw DataError("validation split is empty");
    if (model.num_items() != ds.num_items() || model.num_fields() != ds.num_fields()) {
        throw ConfigError(fmt::format("model.vocab_sizes: model expects {} fields / {} items, dataset has {} / {}",
                                      model.num_fields(), model.num_items(), ds.num_fields(), ds.num_items()));
    }
    for (const auto& [name, p] : model_.parameters()) best_params_.push_back(p.values());
}

Trainer Trainer::resume(const Dataset& ds, const Splits& splits, const Checkpoint& ckpt,
                        const std::optional<Checkpoint>& best) {
    const auto& meta = ckpt.meta;
    try {
        Trainer t(ds, splits, checkpoint_model_config(ckpt), TrainConfig::from_json(meta.at("train")),
                  meta.at("seed").get<std::uint64_t>());
        load_model_parameters(t.model_, ckpt);
        t.adam_.load_state(ckpt, meta.at("adam_step").get<std::int64_t>());
        std::istringstream rng_state(meta.at("rng").get<std::string>());
        rng_state >> t.rng_;
        if (!rng_state) throw FormatError("checkpoint RNG state is unreadable");
        t.epoch_ = meta.at("epoch").get<std::int64_t>();
        t.best_epoch_ = meta.at("best_epoch").get<std::int64_t>();
        t.best_metric_ = meta.at("best_metric").get<double>();
        t.since_best_ = meta.at("since_best").get<std::int64_t>();
        const auto& source = best ? *best : ckpt;
        t.best_params_.clear();
        for (const auto& [name, p] : t.model_.parameters()) t.best_params_.push_back(source.tensor(name).values());
        return t;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("checkpoint metadata incomplete: ") + e.what());
    }
}

void Trainer::set_output_dir(std::filesystem::path dir) {
    std::filesystem::create_directories(dir);
    out_dir_ = std::move(dir);
}

double Trainer::train_epoch() {
    keep_freed_memory();
    BatchStream stream(*ds_, splits_->train, model_.config().max_len, train_.batch_size, rng_());
    double total = 0.0;
    std::size_t count = 0, batch_index = 0;
    std::vector<std::uint8_t> rows;
    while (auto batch = stream.next()) {
        // The batch gradient is accumulated over slices; slice losses are
        // weighted by their share of the batch so the sum is the batch mean.
        adam_.zero_grad();
        for (std::int64_t first = 0; first < batch->size; first += kSliceRows) {
            const auto part = slice_batch(*batch, first, std::min(kSliceRows, batch->size - first));
            auto scores = model_.score(part);
            rows.assign(static_cast<std::size_t>(part.size), 1);
            auto loss = compute_loss(scores, part.targets, rows);
            const float value = loss.item();
            if (!std::isfinite(value)) {
                throw DivergenceError(fmt::format("training loss is {} at epoch {} batch {}", value, epoch_ + 1,
                                                  batch_index));
            }
            auto weighted = scale(loss, static_cast<float>(part.size) / static_cast<float>(batch->size));
            backward(weighted);
            total += static_cast<double>(value) * static_cast<double>(part.size);
        }
        adam_.step();
        count += static_cast<std::size_t>(batch->size);
        ++batch_index;
    }
    ++epoch_;
    return total / static_cast<double>(count);
}

TrainResult Trainer::train() {
    TrainResult result;
    std::ofstream log_file;
    if (out_dir_) log_file.open(*out_dir_ / "train.log.jsonl", std::ios::app);
    auto eval = train_.eval;
    eval.k = 10;
    while (epoch_ < train_.max_epochs) {
        const auto t0 = std::chrono::steady_clock::now();
        EpochLog log;
        try {
            log.train_loss = train_epoch();
        } catch (const DivergenceError& e) {
            result.diverged = true;
            result.divergence_message = e.what();
            break;
        }
        const auto m = evaluate_ranking(model_, *ds_, splits_->valid, eval);
        log.epoch = epoch_;
        log.valid_hr10 = m.hr;
        log.valid_ndcg10 = m.ndcg;
        log.valid_mrr10 = m.mrr;
        log.wall_seconds = seconds_since(t0);

        const bool improved = m.mrr > best_metric_;
        if (improved) {
            best_metric_ = m.mrr;
            best_epoch_ = epoch_;
            since_best_ = 0;
            best_params_.clear();
            for (const auto& [name, p] : model_.parameters()) best_params_.push_back(p.values());
        } else {
            ++since_best_;
        }
        if (out_dir_) {
            const auto ckpt = checkpoint();
            save_checkpoint(*out_dir_ / "last.pymx", ckpt);
            if (improved) save_checkpoint(*out_dir_ / "checkpoint.pymx", ckpt);
            log_file << log.to_json().dump() << '\n' << std::flush;
        }
        result.log.push_back(log);
        if (callback_) callback_(log);
        if (since_best_ >= train_.patience) break;
    }
    result.best_epoch = best_epoch_;
    result.best_valid_mrr = best_metric_;
    return result;
}

PyramidMixer<float> Trainer::best_model() const {
    PyramidMixer<float> out(model_.config(), 0);
    std::vector<NamedTensor<float>> values;
    auto params = model_.parameters();
    for (std::size_t i = 0; i < params.size(); ++i) {
        values.emplace_back(params[i].first, Tensor<float>::from(params[i].second.shape(), best_params_[i]));
    }
    out.load_parameters(values);
    return out;
}

Checkpoint Trainer::checkpoint() const {
    Checkpoint ckpt;
    std::ostringstream rng_state;
    rng_state << rng_;
    ckpt.meta = {{"model", model_.config().to_json()},
                 {"train", train_.to_json()},
                 {"seed", seed_},
                 {"epoch", epoch_},
                 {"best_epoch", best_epoch_},
                 {"best_metric", best_metric_},
                 {"since_best", since_best_},
                 {"adam_step", adam_.steps()},
                 {"rng", rng_state.str()}};
    for (const auto& [name, p] : model_.parameters()) {
        ckpt.tensors.emplace_back(name, Tensor<float>::from(p.shape(), p.values()));
    }
    for (auto& t : adam_.state()) ckpt.tensors.push_back(std::move(t));
    return ckpt;
}

}  // namespace pymx
