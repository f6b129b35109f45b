#include "carn/keyvalue.hpp"

#include <charconv>
#include <fstream>
#include <sstream>

namespace carn {

namespace {

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

template <typename N>
N parse_number(const std::string& key, const std::string& text) {
    N v{};
    const auto* end = text.data() + text.size();
    const auto [ptr, ec] = std::from_chars(text.data(), end, v);
    if (ec != std::errc() || ptr != end) {
        throw ConfigError("config key '" + key + "': cannot parse '" + text + "' as a number");
    }
    return v;
}

}  // namespace

KeyValues KeyValues::parse(const std::string& text) {
    KeyValues kv;
    std::istringstream in(text);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const auto t = trim(line);
        if (t.empty() || t[0] == '#') continue;
        const auto eq = t.find('=');
        if (eq == std::string::npos) {
            throw ConfigError("line " + std::to_string(lineno) + ": expected 'key = value'");
        }
        const auto key = trim(t.substr(0, eq));
        if (key.empty()) throw ConfigError("line " + std::to_string(lineno) + ": empty key");
        kv.values_[key] = trim(t.substr(eq + 1));
    }
    return kv;
}

KeyValues KeyValues::read_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot open config file " + path);
    std::stringstream ss;
    ss << f.rdbuf();
    return parse(ss.str());
}

std::string KeyValues::to_text() const {
    std::string s;
    for (const auto& [k, v] : values_) s += k + " = " + v + "\n";
    return s;
}

std::string KeyValues::get(const std::string& key, const std::string& fallback) const {
    const auto it = values_.find(key);
    return it == values_.end() ? fallback : it->second;
}

std::string KeyValues::require(const std::string& key) const {
    const auto it = values_.find(key);
    if (it == values_.end()) throw ConfigError("missing config key '" + key + "'");
    return it->second;
}

double KeyValues::get_double(const std::string& key, double fallback) const {
    return has(key) ? parse_number<double>(key, require(key)) : fallback;
}

long long KeyValues::get_int(const std::string& key, long long fallback) const {
    return has(key) ? parse_number<long long>(key, require(key)) : fallback;
}

std::size_t KeyValues::get_size(const std::string& key, std::size_t fallback) const {
    if (!has(key)) return fallback;
    const auto v = parse_number<long long>(key, require(key));
    if (v < 0) throw ConfigError("config key '" + key + "' must be non-negative");
    return static_cast<std::size_t>(v);
}

bool KeyValues::get_bool(const std::string& key, bool fallback) const {
    if (!has(key)) return fallback;
    const auto v = require(key);
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    throw ConfigError("config key '" + key + "': expected true/false, got '" + v + "'");
}

std::vector<std::size_t> KeyValues::get_size_list(const std::string& key,
                                                  const std::vector<std::size_t>& fallback) const {
    if (!has(key)) return fallback;
    std::vector<std::size_t> out;
    std::stringstream ss(require(key));
    std::string item;
    while (std::getline(ss, item, ',')) {
        const auto v = parse_number<long long>(key, trim(item));
        if (v < 0) throw ConfigError("config key '" + key + "' entries must be non-negative");
        out.push_back(static_cast<std::size_t>(v));
    }
    return out;
}

std::string format_double(double v) {
    char buf[64];
    const auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, ptr);
}

std::string join_sizes(const std::vector<std::size_t>& v) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (i) s += ",";
        s += std::to_string(v[i]);
    }
    return s;
}

}  // namespace carn
