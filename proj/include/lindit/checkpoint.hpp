#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "lindit/came8bit.hpp"
#include "lindit/model.hpp"

namespace lindit {

inline constexpr int kCheckpointVersion = 1;

struct OptimizerSnapshot {
  CameConfig config;
  std::vector<ParamState> states;

  bool operator==(const OptimizerSnapshot&) const = default;
};

// A checkpoint directory holds manifest.json (format version, model config,
// tensor directory) and payload.bin (little-endian tensors back to back).
struct Checkpoint {
  LinearDiT<float> model;
  std::optional<OptimizerSnapshot> optimizer;
  nlohmann::json meta = nlohmann::json::object();
};

void save_checkpoint(const std::filesystem::path& dir, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& dir);

// Bitwise equality of every parameter tensor (NaN payloads included).
bool bit_identical(const LinearDiT<float>& a, const LinearDiT<float>& b);

}  // namespace lindit
