#pragma once

#include <string>

#include "json.hpp"
#include "tdsm/errors.hpp"
#include "tdsm/io.hpp"

namespace tdsm {

// Reads a JSON value that may be either a plain number or a decimal string
// (the exact-round-trip form our writers emit).
inline double parse_double_field(const nlohmann::json& v) {
  if (v.is_string()) return parse_double_string(v.get<std::string>());
  if (v.is_number()) return v.get<double>();
  throw ConfigError("expected a number or a numeric string in JSON");
}

}  // namespace tdsm
