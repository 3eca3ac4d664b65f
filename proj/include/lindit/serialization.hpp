#pragma once

#include <initializer_list>
#include <string>

#include <nlohmann/json.hpp>

#include "lindit/came8bit.hpp"
#include "lindit/growth.hpp"
#include "lindit/model.hpp"

namespace lindit {

using nlohmann::json;

// Throws ConfigError naming the first key of `j` that is not in `allowed`.
void reject_unknown_keys(const json& j, std::initializer_list<const char*> allowed, const std::string& where);

json to_json(const ModelConfig& c);
ModelConfig model_config_from_json(const json& j);

json to_json(const CameConfig& c);
CameConfig came_config_from_json(const json& j);

// Reads `key` from j into out if present, with a ConfigError on type mismatch.
template <typename T>
void read_optional(const json& j, const char* key, T& out, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(where + "." + key + ": " + e.what());
  }
}

}  // namespace lindit
