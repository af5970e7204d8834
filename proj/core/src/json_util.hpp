#pragma once

#include <string>

#include "diffmap/errors.hpp"
#include "json.hpp"

namespace diffmap::detail {

using nlohmann::json;

// Fetches a required field, reporting the dotted path on absence or type mismatch.
template <class T>
T require_field(const json& j, const std::string& key, const std::string& context) {
  if (!j.is_object() || !j.contains(key)) throw FormatError(context + ": missing field '" + key + "'");
  try {
    return j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw FormatError(context + ": field '" + key + "' has wrong type (" + e.what() + ")");
  }
}

inline json parse_json(const std::string& text, const std::string& context) {
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    throw FormatError(context + ": invalid JSON (" + e.what() + ")");
  }
}

}  // namespace diffmap::detail
