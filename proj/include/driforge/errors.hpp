#pragma once

#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace driforge {

// Base error for everything the pipeline can surface to a caller.
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Bad user-supplied configuration (paths, thresholds, bin scores out of range).
class ConfigError : public Error {
public:
    explicit ConfigError(const std::string& msg) : Error(msg) {}
};

// Malformed input data (a record, a file, a response body).
class ParseError : public Error {
public:
    ParseError(const std::string& msg, std::size_t line = 0)
        : Error(line ? msg + " (line " + std::to_string(line) + ")" : msg), line_(line) {}
    std::size_t line() const { return line_; }

private:
    std::size_t line_;
};

// A stage-level failure. Carries a machine-readable kind and the ids involved,
// which the CLI serializes as {stage, error_kind, detail, offending_ids}.
class StageError : public Error {
public:
    StageError(std::string kind, const std::string& detail,
               std::vector<std::string> offending_ids = {})
        : Error(detail), kind_(std::move(kind)), offending_ids_(std::move(offending_ids)) {}

    const std::string& kind() const { return kind_; }
    const std::vector<std::string>& offending_ids() const { return offending_ids_; }

private:
    std::string kind_;
    std::vector<std::string> offending_ids_;
};

} // namespace driforge
