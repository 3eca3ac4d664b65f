#include "lindit/serialization.hpp"

#include <algorithm>

namespace lindit {

void reject_unknown_keys(const json& j, std::initializer_list<const char*> allowed, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + ": expected an object");
  for (const auto& [key, _] : j.items()) {
    if (std::none_of(allowed.begin(), allowed.end(), [&](const char* a) { return key == a; })) {
      throw ConfigError(where + ": unknown key '" + key + "'");
    }
  }
}

json to_json(const ModelConfig& c) {
  return {{"depth", c.depth},         {"d_model", c.d_model},       {"d_ff", c.d_ff},
          {"vocab", c.vocab},         {"grid_h", c.grid_h},         {"grid_w", c.grid_w},
          {"channels", c.channels},   {"patch", c.patch},           {"timesteps", c.timesteps},
          {"max_prompt_len", c.max_prompt_len}, {"qk_norm", c.qk_norm}};
}

ModelConfig model_config_from_json(const json& j) {
  const std::string w = "model";
  reject_unknown_keys(j,
                      {"depth", "d_model", "d_ff", "vocab", "grid_h", "grid_w", "channels", "patch", "timesteps",
                       "max_prompt_len", "qk_norm"},
                      w);
  ModelConfig c;
  read_optional(j, "depth", c.depth, w);
  read_optional(j, "d_model", c.d_model, w);
  read_optional(j, "d_ff", c.d_ff, w);
  read_optional(j, "vocab", c.vocab, w);
  read_optional(j, "grid_h", c.grid_h, w);
  read_optional(j, "grid_w", c.grid_w, w);
  read_optional(j, "channels", c.channels, w);
  read_optional(j, "patch", c.patch, w);
  read_optional(j, "timesteps", c.timesteps, w);
  read_optional(j, "max_prompt_len", c.max_prompt_len, w);
  read_optional(j, "qk_norm", c.qk_norm, w);
  c.validate();
  return c;
}

json to_json(const CameConfig& c) {
  return {{"lr", c.lr},       {"weight_decay", c.weight_decay}, {"beta1", c.beta1},
          {"beta2", c.beta2}, {"beta3", c.beta3},               {"eps1", c.eps1},
          {"eps2", c.eps2},   {"clip_d", c.clip_d},             {"block_size", c.block_size},
          {"quant_threshold", c.quant_threshold},               {"quantize", c.quantize}};
}

CameConfig came_config_from_json(const json& j) {
  const std::string w = "optimizer";
  reject_unknown_keys(j,
                      {"lr", "weight_decay", "beta1", "beta2", "beta3", "eps1", "eps2", "clip_d", "block_size",
                       "quant_threshold", "quantize"},
                      w);
  CameConfig c;
  read_optional(j, "lr", c.lr, w);
  read_optional(j, "weight_decay", c.weight_decay, w);
  read_optional(j, "beta1", c.beta1, w);
  read_optional(j, "beta2", c.beta2, w);
  read_optional(j, "beta3", c.beta3, w);
  read_optional(j, "eps1", c.eps1, w);
  read_optional(j, "eps2", c.eps2, w);
  read_optional(j, "clip_d", c.clip_d, w);
  read_optional(j, "block_size", c.block_size, w);
  read_optional(j, "quant_threshold", c.quant_threshold, w);
  read_optional(j, "quantize", c.quantize, w);
  c.validate();
  return c;
}

}  // namespace lindit
