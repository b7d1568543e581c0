#pragma once

// Binary checkpoint: "PYMX", u32 version, u64-prefixed JSON metadata, u64
// tensor count, manifest of (u64 name length, name, u64 rank, u64 dims...),
// raw little-endian float32 data in manifest order, trailing CRC32 of all
// preceding bytes.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pymx/model.hpp"

namespace pymx {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
    nlohmann::json meta;
    std::vector<NamedTensor<float>> tensors;

    const Tensor<float>& tensor(const std::string& name) const;
};

/// Writes to a temporary sibling and renames, so readers never see a partial file.
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
/// FormatError on bad magic, version, CRC or truncation.
Checkpoint load_checkpoint(const std::filesystem::path& path);

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes);

/// Model config stored under meta["model"].
ModelConfig checkpoint_model_config(const Checkpoint& ckpt);

/// Builds the model described by the checkpoint and loads its parameters.
PyramidMixer<float> model_from_checkpoint(const Checkpoint& ckpt);

/// Loads parameters into `model`; ConfigError naming the first differing
/// field if the checkpoint was written for another configuration.
void load_model_parameters(PyramidMixer<float>& model, const Checkpoint& ckpt);

}  // namespace pymx
