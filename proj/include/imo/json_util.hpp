#pragma once

#include <string>

#include <nlohmann/json.hpp>

#include "imo/errors.hpp"

namespace imo {

/// Reads `j[key]` as T, falling back to `fallback` when absent. Type
/// mismatches raise ConfigError naming `prefix.key`.
template <typename T>
T json_get(const nlohmann::json& j, const std::string& key, const T& fallback,
           const std::string& prefix) {
  const std::string path = prefix.empty() ? key : prefix + "." + key;
  if (!j.is_object()) throw ConfigError(prefix.empty() ? "<root>" : prefix, "expected an object");
  auto it = j.find(key);
  if (it == j.end() || it->is_null()) return fallback;
  try {
    return it->get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError(path, "has the wrong type (" + std::string(it->type_name()) + ")");
  }
}

}  // namespace imo
