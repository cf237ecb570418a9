#pragma once

// Parameter checkpoints.
//
// A checkpoint is a directory holding
//   manifest.json  {"format_version": 1, "hyperparameters": {...},
//                   "components": {name: [{"name", "shape": [r, c], "offset"}]}}
//   tensors.bin    every tensor as row-major little-endian float64, back to back;
//                  "offset" counts float64 elements from the start of the file.

#include "latentpilot/nn.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <map>
#include <string>

namespace lp {

inline constexpr int kCheckpointFormatVersion = 1;

struct Checkpoint {
  std::map<std::string, ParamSet> components;
  nlohmann::json hyperparameters = nlohmann::json::object();
};

void save_checkpoint(const std::filesystem::path& dir, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& dir);

/// Copies a stored component into `params`, requiring identical names and
/// shapes. Throws std::runtime_error describing the first mismatch.
void restore_component(const Checkpoint& ckpt, const std::string& component, ParamSet& params);

}  // namespace lp
