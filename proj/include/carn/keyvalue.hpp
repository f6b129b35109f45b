#pragma once

#include <cstddef>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

namespace carn {

class ConfigError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Flat "key = value" text. Blank lines and lines starting with '#' are
/// ignored; surrounding whitespace is trimmed; a repeated key overrides the
/// earlier value.
class KeyValues {
public:
    static KeyValues parse(const std::string& text);
    static KeyValues read_file(const std::string& path);

    std::string to_text() const;

    bool has(const std::string& key) const { return values_.count(key) != 0; }
    void set(const std::string& key, std::string value) { values_[key] = std::move(value); }
    const std::map<std::string, std::string>& values() const { return values_; }

    std::string get(const std::string& key, const std::string& fallback) const;
    std::string require(const std::string& key) const;
    double get_double(const std::string& key, double fallback) const;
    long long get_int(const std::string& key, long long fallback) const;
    std::size_t get_size(const std::string& key, std::size_t fallback) const;
    bool get_bool(const std::string& key, bool fallback) const;
    std::vector<std::size_t> get_size_list(const std::string& key,
                                           const std::vector<std::size_t>& fallback) const;

private:
    std::map<std::string, std::string> values_;
};

/// Shortest decimal form that parses back to exactly `v`.
std::string format_double(double v);
std::string join_sizes(const std::vector<std::size_t>& v);

}  // namespace carn
