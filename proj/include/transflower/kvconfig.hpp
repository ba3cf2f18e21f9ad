#ifndef TRANSFLOWER_KVCONFIG_HPP
#define TRANSFLOWER_KVCONFIG_HPP

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>

namespace transflower {

/// Flat `key = value` configuration, sorted by key.
using KeyValues = std::map<std::string, std::string>;

/// Parses `key = value` lines; '#' starts a comment, blank lines are
/// ignored. Throws ParseError with the line number on a malformed line.
KeyValues parse_kv(std::string_view text, std::string_view source = "config");
KeyValues load_kv(const std::filesystem::path& path);
/// Canonical form: one `key=value` line per entry in key order.
std::string format_kv(const KeyValues& kv);

const std::string& kv_require(const KeyValues& kv, const std::string& key);
double kv_double(const KeyValues& kv, const std::string& key);
long long kv_int(const KeyValues& kv, const std::string& key);
bool kv_bool(const KeyValues& kv, const std::string& key);

}  // namespace transflower

#endif  // TRANSFLOWER_KVCONFIG_HPP
