#pragma once

#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include "driforge/errors.hpp"
#include "driforge/text.hpp"

namespace driforge::toml {

// Minimal TOML subset, enough for a run configuration file:
//   [section] and [a.b] headers, key = value pairs, # comments,
//   values: "basic strings", integers, floats, booleans, flat arrays.
// No multiline strings, no inline tables, no datetimes.

using Value = std::variant<std::string, std::int64_t, double, bool, std::vector<std::string>>;

class Table {
public:
    // Keys are dotted: "section.key".
    std::map<std::string, Value> values;

    bool has(const std::string& key) const { return values.count(key) != 0; }

    std::string get_string(const std::string& key, const std::string& fallback = {}) const {
        auto it = values.find(key);
        if (it == values.end()) return fallback;
        if (auto* s = std::get_if<std::string>(&it->second)) return *s;
        throw ConfigError("config key '" + key + "' is not a string");
    }

    std::int64_t get_int(const std::string& key, std::int64_t fallback = 0) const {
        auto it = values.find(key);
        if (it == values.end()) return fallback;
        if (auto* i = std::get_if<std::int64_t>(&it->second)) return *i;
        throw ConfigError("config key '" + key + "' is not an integer");
    }

    double get_double(const std::string& key, double fallback = 0.0) const {
        auto it = values.find(key);
        if (it == values.end()) return fallback;
        if (auto* d = std::get_if<double>(&it->second)) return *d;
        if (auto* i = std::get_if<std::int64_t>(&it->second)) return static_cast<double>(*i);
        throw ConfigError("config key '" + key + "' is not a number");
    }

    bool get_bool(const std::string& key, bool fallback = false) const {
        auto it = values.find(key);
        if (it == values.end()) return fallback;
        if (auto* b = std::get_if<bool>(&it->second)) return *b;
        throw ConfigError("config key '" + key + "' is not a boolean");
    }

    std::vector<std::string> get_string_array(const std::string& key,
                                              const std::vector<std::string>& fallback = {}) const {
        auto it = values.find(key);
        if (it == values.end()) return fallback;
        if (auto* a = std::get_if<std::vector<std::string>>(&it->second)) return *a;
        throw ConfigError("config key '" + key + "' is not an array");
    }
};

namespace detail {

inline std::string parse_basic_string(const std::string& raw, std::size_t line_no) {
    std::string out;
    for (std::size_t i = 1; i + 1 <= raw.size(); ++i) {
        char c = raw[i];
        if (c == '"') return out; // caller checked the closing quote position
        if (c == '\\') {
            if (i + 1 >= raw.size()) throw ParseError("dangling escape in string", line_no);
            char e = raw[++i];
            switch (e) {
            case 'n': out.push_back('\n'); break;
            case 't': out.push_back('\t'); break;
            case 'r': out.push_back('\r'); break;
            case '"': out.push_back('"'); break;
            case '\\': out.push_back('\\'); break;
            default: throw ParseError(std::string("unsupported escape \\") + e, line_no);
            }
        } else {
            out.push_back(c);
        }
    }
    throw ParseError("unterminated string", line_no);
}

inline Value parse_scalar(const std::string& raw, std::size_t line_no) {
    std::string t = trim(raw);
    if (t.empty()) throw ParseError("empty value", line_no);
    if (t[0] == '"') {
        if (t.back() != '"' || t.size() < 2) throw ParseError("unterminated string", line_no);
        return parse_basic_string(t, line_no);
    }
    if (t == "true") return true;
    if (t == "false") return false;
    bool looks_float = t.find_first_of(".eE") != std::string::npos;
    try {
        std::size_t pos = 0;
        if (looks_float) {
            double d = std::stod(t, &pos);
            if (pos == t.size()) return d;
        } else {
            std::int64_t i = std::stoll(t, &pos);
            if (pos == t.size()) return i;
        }
    } catch (const std::exception&) {
    }
    throw ParseError("cannot parse value '" + t + "'", line_no);
}

} // namespace detail

inline Table parse(const std::string& text) {
    Table table;
    std::istringstream in(text);
    std::string line;
    std::string section;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        // Strip comments outside strings.
        bool in_string = false;
        for (std::size_t i = 0; i < line.size(); ++i) {
            char c = line[i];
            if (c == '"' && (i == 0 || line[i - 1] != '\\')) in_string = !in_string;
            if (c == '#' && !in_string) {
                line.resize(i);
                break;
            }
        }
        std::string t = trim(line);
        if (t.empty()) continue;
        if (t.front() == '[') {
            if (t.back() != ']') throw ParseError("unterminated section header", line_no);
            section = trim(t.substr(1, t.size() - 2));
            if (section.empty()) throw ParseError("empty section header", line_no);
            continue;
        }
        std::size_t eq = t.find('=');
        if (eq == std::string::npos) throw ParseError("expected key = value", line_no);
        std::string key = trim(t.substr(0, eq));
        std::string raw = trim(t.substr(eq + 1));
        if (key.empty()) throw ParseError("empty key", line_no);
        std::string full_key = section.empty() ? key : section + "." + key;
        if (!raw.empty() && raw.front() == '[') {
            if (raw.back() != ']') throw ParseError("unterminated array", line_no);
            std::vector<std::string> items;
            std::string body = raw.substr(1, raw.size() - 2);
            std::string cur;
            bool in_str = false;
            for (std::size_t i = 0; i < body.size(); ++i) {
                char c = body[i];
                if (c == '"' && (i == 0 || body[i - 1] != '\\')) in_str = !in_str;
                if (c == ',' && !in_str) {
                    items.push_back(cur);
                    cur.clear();
                } else {
                    cur.push_back(c);
                }
            }
            if (!trim(cur).empty()) items.push_back(cur);
            std::vector<std::string> parsed;
            for (const auto& item : items) {
                Value v = detail::parse_scalar(item, line_no);
                if (auto* s = std::get_if<std::string>(&v)) parsed.push_back(*s);
                else if (auto* i = std::get_if<std::int64_t>(&v)) parsed.push_back(std::to_string(*i));
                else throw ParseError("arrays hold strings or integers only", line_no);
            }
            table.values[full_key] = parsed;
        } else {
            table.values[full_key] = detail::parse_scalar(raw, line_no);
        }
    }
    return table;
}

inline Table parse_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("cannot open config file: " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    return parse(buf.str());
}

} // namespace driforge::toml
