#pragma once

#include <filesystem>

#include <json.hpp>
#include <torch/torch.h>

namespace stagekit {

/// Binary weight container: "SKCK", version, then every named parameter and
/// buffer as (name, shape, float32 little-endian data). Metadata lives in a
/// JSON sidecar next to it (`<path>.json`).
void save_checkpoint(const torch::nn::Module& module, const std::filesystem::path& path, const nlohmann::json& meta);

/// Loads weights into an identically shaped module and returns the sidecar.
/// Missing files raise IoError; shape or name mismatches raise CorruptionError.
nlohmann::json load_checkpoint(torch::nn::Module& module, const std::filesystem::path& path);

nlohmann::json read_checkpoint_meta(const std::filesystem::path& path);
std::filesystem::path sidecar_path(const std::filesystem::path& path);

/// Detached copies of every parameter and buffer, for in-memory model selection.
struct WeightSnapshot {
  std::vector<std::pair<std::string, torch::Tensor>> tensors;
};
WeightSnapshot snapshot_weights(const torch::nn::Module& module);
void restore_weights(torch::nn::Module& module, const WeightSnapshot& snap);

std::int64_t parameter_count(const torch::nn::Module& module);

}  // namespace stagekit
