#pragma once

#include <initializer_list>
#include <string>

#include "json.hpp"

#include "bistet/errors.hpp"

namespace bistet {

// Rejects objects carrying keys outside the allowed set, so typos in config
// or manifest files fail loudly instead of silently using defaults.
inline void expect_object_keys(const nlohmann::json& j,
                               std::initializer_list<const char*> allowed,
                               const std::string& where) {
  require(j.is_object(), ErrorKind::Config, where + ": expected a JSON object");
  for (const auto& item : j.items()) {
    bool known = false;
    for (const char* key : allowed) {
      if (item.key() == key) {
        known = true;
        break;
      }
    }
    require(known, ErrorKind::Config, where + ": unknown key \"" + item.key() + "\"");
  }
}

template <typename T>
T json_get(const nlohmann::json& j, const char* key, const std::string& where) {
  require(j.contains(key), ErrorKind::Config, where + ": missing key \"" + key + "\"");
  try {
    return j.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    raise(ErrorKind::Config, where + ": bad value for \"" + std::string(key) + "\": " + e.what());
  }
}

template <typename T>
T json_get_or(const nlohmann::json& j, const char* key, const std::string& where, T fallback) {
  if (!j.contains(key)) return fallback;
  return json_get<T>(j, key, where);
}

}  // namespace bistet
