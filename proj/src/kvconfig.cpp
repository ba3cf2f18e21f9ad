#include "transflower/kvconfig.hpp"

#include <charconv>
#include <fstream>
#include <sstream>

#include "transflower/csv.hpp"
#include "transflower/errors.hpp"

namespace transflower {

namespace {
std::string_view trim(std::string_view s) {
    while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
    while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
    return s;
}
}  // namespace

KeyValues parse_kv(std::string_view text, std::string_view source) {
    KeyValues kv;
    std::size_t line_no = 0;
    std::size_t pos = 0;
    while (pos <= text.size()) {
        std::size_t nl = text.find('\n', pos);
        std::string_view line = text.substr(pos, nl == std::string_view::npos ? std::string_view::npos : nl - pos);
        pos = nl == std::string_view::npos ? text.size() + 1 : nl + 1;
        ++line_no;
        if (auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        auto eq = line.find('=');
        if (eq == std::string_view::npos)
            throw ParseError(std::string(source) + ":" + std::to_string(line_no) + ": expected key = value");
        std::string key(trim(line.substr(0, eq)));
        if (key.empty()) throw ParseError(std::string(source) + ":" + std::to_string(line_no) + ": empty key");
        kv[key] = std::string(trim(line.substr(eq + 1)));
    }
    return kv;
}

KeyValues load_kv(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ParseError("cannot open config '" + path.string() + "'");
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_kv(ss.str(), path.string());
}

std::string format_kv(const KeyValues& kv) {
    std::string out;
    for (const auto& [k, v] : kv) out += k + "=" + v + "\n";
    return out;
}

const std::string& kv_require(const KeyValues& kv, const std::string& key) {
    auto it = kv.find(key);
    if (it == kv.end()) throw ValidationError("missing configuration key '" + key + "'");
    return it->second;
}

double kv_double(const KeyValues& kv, const std::string& key) {
    return csv::parse_double(kv_require(kv, key), key);
}

long long kv_int(const KeyValues& kv, const std::string& key) {
    const std::string& v = kv_require(kv, key);
    long long out = 0;
    auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || ptr != v.data() + v.size())
        throw ValidationError("configuration key '" + key + "' must be an integer, got '" + v + "'");
    return out;
}

bool kv_bool(const KeyValues& kv, const std::string& key) {
    const std::string& v = kv_require(kv, key);
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw ValidationError("configuration key '" + key + "' must be true or false, got '" + v + "'");
}

}  // namespace transflower
