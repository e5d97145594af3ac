#pragma once

#include "cast/core.hpp"

#include <cstdint>
#include <string>

namespace cast {

/// Value parsers for key=value configs; failures throw ConfigError naming the key.
int parse_int(const std::string& key, const std::string& v);
std::uint64_t parse_u64(const std::string& key, const std::string& v);
double parse_double(const std::string& key, const std::string& v);
bool parse_bool(const std::string& key, const std::string& v);

/// Round-trippable text for a double (%.17g).
std::string fmt_double(double d);
inline const char* fmt_bool(bool b) { return b ? "true" : "false"; }

}  // namespace cast
