#pragma once

#include <fstream>
#include <functional>
#include <string>

#include <json.hpp>

#include "driforge/errors.hpp"

namespace driforge::jsonl {

using json = nlohmann::json;

// Streams a JSONL file record by record. `on_record(line_number, parsed)` is
// called for every non-blank line; parse failures go to `on_error` when given,
// otherwise they throw.
inline void for_each(const std::string& path,
                     const std::function<void(std::size_t, const json&)>& on_record,
                     const std::function<void(std::size_t, const std::string&)>& on_error = nullptr) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("cannot open JSONL file: " + path);
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.find_first_not_of(" \t") == std::string::npos) continue;
        json rec = json::parse(line, nullptr, false);
        if (rec.is_discarded()) {
            if (on_error) on_error(line_no, "invalid JSON");
            else throw ParseError("invalid JSON record", line_no);
            continue;
        }
        on_record(line_no, rec);
    }
}

class Writer {
public:
    explicit Writer(const std::string& path) : out_(path, std::ios::binary) {
        if (!out_) throw ConfigError("cannot open JSONL file for writing: " + path);
    }

    void write(const json& rec) { out_ << rec.dump() << '\n'; }

    void close() { out_.close(); }

private:
    std::ofstream out_;
};

} // namespace driforge::jsonl
