#pragma once

#include <fcntl.h>
#include <unistd.h>

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "driforge/errors.hpp"
#include "driforge/hash.hpp"

namespace driforge {

namespace fs = std::filesystem;

inline constexpr const char* kToolVersion = "0.1.0";

inline std::string hash_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw StageError("missing_input", "cannot open file for hashing: " + path.string());
    Sha256 h;
    char buf[1 << 16];
    while (in.read(buf, sizeof(buf)) || in.gcount() > 0) h.update(buf, static_cast<std::size_t>(in.gcount()));
    auto d = h.digest();
    return to_hex(d.data(), d.size());
}

// Unix seconds for manifest timestamps. SOURCE_DATE_EPOCH (the
// reproducible-builds convention) pins it so reruns can be byte-identical.
inline std::int64_t manifest_now() {
    if (const char* v = std::getenv("SOURCE_DATE_EPOCH")) {
        try {
            return std::stoll(v);
        } catch (const std::exception&) {
        }
    }
    return std::chrono::duration_cast<std::chrono::seconds>(
               std::chrono::system_clock::now().time_since_epoch())
        .count();
}

struct RunManifest {
    std::string stage;
    std::map<std::string, std::string> input_hashes;  // logical name -> sha256
    std::string config_hash;
    std::string tool_version = kToolVersion;
    std::int64_t started_at = 0;
    std::int64_t finished_at = 0;
    std::map<std::string, std::string> output_hashes; // file name -> sha256

    nlohmann::json to_json() const {
        return nlohmann::json{{"stage", stage},
                              {"input_hashes", input_hashes},
                              {"config_hash", config_hash},
                              {"tool_version", tool_version},
                              {"started_at", started_at},
                              {"finished_at", finished_at},
                              {"output_hashes", output_hashes}};
    }

    static RunManifest from_json(const nlohmann::json& doc) {
        RunManifest m;
        m.stage = doc.at("stage").get<std::string>();
        for (const auto& [k, v] : doc.at("input_hashes").items()) m.input_hashes[k] = v.get<std::string>();
        m.config_hash = doc.at("config_hash").get<std::string>();
        m.tool_version = doc.value("tool_version", "");
        m.started_at = doc.value("started_at", std::int64_t(0));
        m.finished_at = doc.value("finished_at", std::int64_t(0));
        for (const auto& [k, v] : doc.at("output_hashes").items()) m.output_hashes[k] = v.get<std::string>();
        return m;
    }

    static RunManifest load(const fs::path& path) {
        std::ifstream in(path, std::ios::binary);
        if (!in)
            throw StageError("missing_manifest", "expected manifest not found: " + path.string() +
                                                     " (run the upstream stage first, or pass --force)");
        nlohmann::json doc = nlohmann::json::parse(in, nullptr, false);
        if (doc.is_discarded()) throw ParseError("manifest is not valid JSON: " + path.string());
        return from_json(doc);
    }
};

// Guards a pipeline output root: one stage process at a time per directory.
class DirectoryLock {
public:
    explicit DirectoryLock(const fs::path& root) : lock_path_(root / ".lock") {
        fs::create_directories(root);
        // O_EXCL makes creation atomic even across racing processes.
        int fd = ::open(lock_path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
        if (fd < 0)
            throw StageError("locked", "output directory is locked by another run: " + lock_path_.string());
        ::close(fd);
        held_ = true;
    }

    DirectoryLock(const DirectoryLock&) = delete;
    DirectoryLock& operator=(const DirectoryLock&) = delete;

    ~DirectoryLock() {
        if (held_) {
            std::error_code ec;
            fs::remove(lock_path_, ec);
        }
    }

private:
    fs::path lock_path_;
    bool held_ = false;
};

// Builds one stage's output atomically: callers fill a temp directory, then
// commit() hashes every file, writes the manifest and renames the directory
// into place. Without commit, the temp tree is removed.
class StageOutput {
public:
    StageOutput(const fs::path& out_root, std::string stage)
        : stage_(std::move(stage)), final_dir_(out_root / stage_),
          tmp_dir_(out_root / (".tmp-" + stage_)) {
        fs::create_directories(out_root);
        std::error_code ec;
        fs::remove_all(tmp_dir_, ec);
        fs::create_directories(tmp_dir_);
    }

    ~StageOutput() {
        if (!committed_) {
            std::error_code ec;
            fs::remove_all(tmp_dir_, ec);
        }
    }

    const fs::path& dir() const { return tmp_dir_; }
    fs::path file(const std::string& name) const { return tmp_dir_ / name; }

    void commit(const std::map<std::string, std::string>& input_hashes, const std::string& config_hash,
                std::int64_t started_at) {
        RunManifest manifest;
        manifest.stage = stage_;
        manifest.input_hashes = input_hashes;
        manifest.config_hash = config_hash;
        manifest.started_at = started_at;
        manifest.finished_at = manifest_now();
        std::vector<fs::path> files;
        for (const auto& entry : fs::recursive_directory_iterator(tmp_dir_))
            if (entry.is_regular_file()) files.push_back(entry.path());
        std::sort(files.begin(), files.end());
        for (const auto& f : files)
            manifest.output_hashes[fs::relative(f, tmp_dir_).generic_string()] = hash_file(f);
        {
            std::ofstream out(tmp_dir_ / "manifest.json", std::ios::binary);
            if (!out) throw StageError("stage_io", "cannot write manifest in " + tmp_dir_.string());
            out << manifest.to_json().dump(2) << '\n';
        }
        std::error_code ec;
        fs::remove_all(final_dir_, ec);
        fs::rename(tmp_dir_, final_dir_);
        committed_ = true;
    }

private:
    std::string stage_;
    fs::path final_dir_;
    fs::path tmp_dir_;
    bool committed_ = false;
};

// Verifies an upstream stage directory and returns its manifest.
inline RunManifest require_stage(const fs::path& out_root, const std::string& stage, bool force = false) {
    fs::path manifest_path = out_root / stage / "manifest.json";
    if (force && !fs::exists(manifest_path)) {
        RunManifest empty;
        empty.stage = stage;
        return empty;
    }
    return RunManifest::load(manifest_path);
}

} // namespace driforge
