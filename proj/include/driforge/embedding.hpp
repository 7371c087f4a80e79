#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <memory>
#include <mutex>
#include <shared_mutex>
#include <string>
#include <string_view>
#include <thread>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "driforge/errors.hpp"
#include "driforge/hash.hpp"
#include "driforge/jsonl.hpp"
#include "driforge/text.hpp"

namespace driforge {

// Vectors are stored as float32 (storage economy); all similarity math runs
// in float64.
using Vec = std::vector<float>;

inline void check_finite(const Vec& v, std::string_view what) {
    for (float x : v)
        if (!std::isfinite(x)) throw StageError("bad_vector", std::string(what) + ": non-finite component");
}

inline bool is_zero_vector(const Vec& v) {
    for (float x : v)
        if (x != 0.0f) return false;
    return true;
}

inline double dot(const Vec& u, const Vec& v) {
    double s = 0;
    for (std::size_t i = 0; i < u.size(); ++i) s += static_cast<double>(u[i]) * static_cast<double>(v[i]);
    return s;
}

inline double norm(const Vec& u) { return std::sqrt(dot(u, u)); }

// cos(u,v) = <u,v> / (|u||v|). Throws on dimension mismatch or a zero vector.
inline double cosine(const Vec& u, const Vec& v) {
    if (u.size() != v.size())
        throw StageError("dimension_mismatch", "cosine: dims " + std::to_string(u.size()) + " vs " +
                                                   std::to_string(v.size()));
    double nu = norm(u);
    double nv = norm(v);
    if (nu == 0.0 || nv == 0.0) throw StageError("zero_vector", "cosine: zero vector has no direction");
    double c = dot(u, v) / (nu * nv);
    // FP round-off can leave the quotient a hair outside [-1, 1].
    if (c > 1.0) c = 1.0;
    if (c < -1.0) c = -1.0;
    return c;
}

// ---------------------------------------------------------------------------
// Providers

class EmbeddingProvider {
public:
    virtual ~EmbeddingProvider() = default;
    virtual std::string provider_id() const = 0;
    virtual std::string model_id() const = 0;
    virtual std::size_t dim() const = 0;
    // One batch in, one vector per text out, same order.
    virtual std::vector<Vec> embed(const std::vector<std::string>& texts) = 0;
};

// Deterministic offline embedder: hashed bag-of-words. Every token bumps the
// bucket its 64-bit hash selects, so vectors are non-negative, reproducible
// everywhere and need no network. Texts without tokens map to the zero vector
// (rejected downstream when used for similarity).
class MockEmbeddingProvider : public EmbeddingProvider {
public:
    explicit MockEmbeddingProvider(std::size_t dim = 384) : dim_(dim) {
        if (dim_ == 0) throw ConfigError("embedding dim must be positive");
    }

    std::string provider_id() const override { return "mock"; }
    std::string model_id() const override { return "hashed-bow-" + std::to_string(dim_); }
    std::size_t dim() const override { return dim_; }

    std::vector<Vec> embed(const std::vector<std::string>& texts) override {
        std::vector<Vec> out;
        out.reserve(texts.size());
        for (const auto& t : texts) {
            Vec v(dim_, 0.0f);
            for (const auto& tok : tokenize(fold_case(t))) v[fnv1a64(tok) % dim_] += 1.0f;
            out.push_back(std::move(v));
        }
        return out;
    }

private:
    std::size_t dim_;
};

// ---------------------------------------------------------------------------
// Cache
//
// Durable, append-friendly binary file, one per (provider, model):
//   header:  magic "DRFE" | u32 version=1 | u32 dim
//            | u32 len + provider_id bytes | u32 len + model_id bytes
//   records: 32-byte SHA-256 of the raw text | dim * float32 (little-endian)
// Opening a cache whose header names a different provider/model/dim is a hard
// error, so switching models can never reuse stale vectors.

class EmbeddingCache {
public:
    EmbeddingCache(std::string path, std::string provider_id, std::string model_id, std::size_t dim)
        : path_(std::move(path)), provider_id_(std::move(provider_id)), model_id_(std::move(model_id)),
          dim_(dim) {
        if (dim_ == 0) throw ConfigError("cache dim must be positive");
        load_or_create();
    }

    std::size_t dim() const { return dim_; }
    std::size_t size() const {
        std::shared_lock lock(mutex_);
        return entries_.size();
    }

    static std::string key_for(std::string_view text) { return sha256_hex(text); }

    std::optional<Vec> get(const std::string& key) const {
        std::shared_lock lock(mutex_);
        auto it = entries_.find(key);
        if (it == entries_.end()) return std::nullopt;
        return it->second;
    }

    // Inserts and appends to the backing file. A dim mismatch is a hard error.
    void put(const std::string& key, const Vec& vec) {
        if (vec.size() != dim_)
            throw StageError("dimension_mismatch", "cache expects dim " + std::to_string(dim_) +
                                                       ", got " + std::to_string(vec.size()));
        std::unique_lock lock(mutex_);
        auto [it, inserted] = entries_.emplace(key, vec);
        if (!inserted) return;
        std::ofstream out(path_, std::ios::binary | std::ios::app);
        if (!out) throw StageError("cache_io", "cannot append to cache file: " + path_);
        write_record(out, key, vec);
    }

    // JSONL interoperability form: {"hash": str, "vec": [float]}.
    void export_jsonl(const std::string& out_path) const {
        std::shared_lock lock(mutex_);
        jsonl::Writer w(out_path);
        std::vector<const std::string*> keys;
        keys.reserve(entries_.size());
        for (const auto& [k, v] : entries_) keys.push_back(&k);
        std::sort(keys.begin(), keys.end(), [](auto* a, auto* b) { return *a < *b; });
        for (const auto* k : keys) {
            const Vec& v = entries_.at(*k);
            w.write(nlohmann::json{{"hash", *k}, {"vec", v}});
        }
    }

    void import_jsonl(const std::string& in_path) {
        jsonl::for_each(in_path, [&](std::size_t line_no, const nlohmann::json& rec) {
            try {
                auto key = rec.at("hash").get<std::string>();
                auto vec = rec.at("vec").get<Vec>();
                put(key, vec);
            } catch (const StageError&) {
                throw;
            } catch (const std::exception& e) {
                throw ParseError(std::string("bad cache record: ") + e.what(), line_no);
            }
        });
    }

private:
    void load_or_create() {
        std::ifstream in(path_, std::ios::binary);
        if (!in) {
            std::ofstream out(path_, std::ios::binary);
            if (!out) throw StageError("cache_io", "cannot create cache file: " + path_);
            write_header(out);
            return;
        }
        char magic[4];
        if (!in.read(magic, 4)) {
            // Zero-length file: treat as fresh.
            std::ofstream out(path_, std::ios::binary | std::ios::trunc);
            write_header(out);
            return;
        }
        if (std::memcmp(magic, "DRFE", 4) != 0)
            throw StageError("cache_io", "not an embedding cache file: " + path_);
        std::uint32_t version = read_u32(in);
        if (version != 1) throw StageError("cache_io", "unsupported cache version in " + path_);
        std::uint32_t dim = read_u32(in);
        std::string provider = read_string(in);
        std::string model = read_string(in);
        if (dim != dim_ || provider != provider_id_ || model != model_id_)
            throw StageError("cache_mismatch",
                             "cache " + path_ + " holds (" + provider + ", " + model + ", dim " +
                                 std::to_string(dim) + "), expected (" + provider_id_ + ", " + model_id_ +
                                 ", dim " + std::to_string(dim_) + ")");
        while (true) {
            unsigned char digest[32];
            if (!in.read(reinterpret_cast<char*>(digest), 32)) break;
            Vec v(dim_);
            if (!in.read(reinterpret_cast<char*>(v.data()), std::streamsize(dim_ * sizeof(float))))
                throw StageError("cache_io", "truncated cache record in " + path_);
            entries_.emplace(to_hex(digest, 32), std::move(v));
        }
    }

    static std::uint32_t read_u32(std::istream& in) {
        unsigned char b[4];
        if (!in.read(reinterpret_cast<char*>(b), 4)) throw StageError("cache_io", "truncated cache header");
        return std::uint32_t(b[0]) | (std::uint32_t(b[1]) << 8) | (std::uint32_t(b[2]) << 16) |
               (std::uint32_t(b[3]) << 24);
    }

    static void write_u32(std::ostream& out, std::uint32_t x) {
        unsigned char b[4] = {static_cast<unsigned char>(x), static_cast<unsigned char>(x >> 8),
                              static_cast<unsigned char>(x >> 16), static_cast<unsigned char>(x >> 24)};
        out.write(reinterpret_cast<const char*>(b), 4);
    }

    static std::string read_string(std::istream& in) {
        std::uint32_t len = read_u32(in);
        std::string s(len, '\0');
        if (!in.read(s.data(), len)) throw StageError("cache_io", "truncated cache header string");
        return s;
    }

    void write_header(std::ostream& out) const {
        out.write("DRFE", 4);
        write_u32(out, 1);
        write_u32(out, static_cast<std::uint32_t>(dim_));
        write_u32(out, static_cast<std::uint32_t>(provider_id_.size()));
        out.write(provider_id_.data(), std::streamsize(provider_id_.size()));
        write_u32(out, static_cast<std::uint32_t>(model_id_.size()));
        out.write(model_id_.data(), std::streamsize(model_id_.size()));
    }

    static void write_record(std::ostream& out, const std::string& hex_key, const Vec& vec) {
        unsigned char digest[32];
        for (std::size_t i = 0; i < 32; ++i) {
            auto nibble = [](char c) -> unsigned {
                return c <= '9' ? unsigned(c - '0') : unsigned(c - 'a' + 10);
            };
            digest[i] = static_cast<unsigned char>((nibble(hex_key[2 * i]) << 4) | nibble(hex_key[2 * i + 1]));
        }
        out.write(reinterpret_cast<const char*>(digest), 32);
        out.write(reinterpret_cast<const char*>(vec.data()), std::streamsize(vec.size() * sizeof(float)));
    }

    std::string path_;
    std::string provider_id_;
    std::string model_id_;
    std::size_t dim_;
    std::unordered_map<std::string, Vec> entries_;
    mutable std::shared_mutex mutex_;
};

// ---------------------------------------------------------------------------
// Batched, cached embedding

struct EmbedOptions {
    std::size_t batch_size = 64;
    std::size_t max_attempts = 3;
    std::size_t backoff_ms = 100; // doubles per attempt
};

struct EmbedStats {
    std::size_t texts = 0;
    std::size_t cache_hits = 0;
    std::size_t provider_calls = 0;
    std::size_t embedded = 0;
};

// Cache-first batch embedding. Misses go to the provider in bounded batches
// with bounded retries; every fetched vector is persisted before return.
// Output order matches input order.
inline std::vector<Vec> embed_batch(const std::vector<std::string>& texts, EmbeddingProvider& provider,
                                    EmbeddingCache& cache, const EmbedOptions& opts = {},
                                    EmbedStats* stats = nullptr) {
    if (cache.dim() != provider.dim())
        throw StageError("dimension_mismatch", "cache dim " + std::to_string(cache.dim()) +
                                                   " != provider dim " + std::to_string(provider.dim()));
    std::vector<std::string> keys(texts.size());
    std::vector<std::string> miss_texts;
    std::vector<std::string> miss_keys;
    std::unordered_map<std::string, std::size_t> miss_index;
    std::size_t hits = 0;
    for (std::size_t i = 0; i < texts.size(); ++i) {
        keys[i] = EmbeddingCache::key_for(texts[i]);
        if (cache.get(keys[i])) {
            ++hits;
        } else if (miss_index.emplace(keys[i], miss_texts.size()).second) {
            miss_texts.push_back(texts[i]);
            miss_keys.push_back(keys[i]);
        }
    }

    std::size_t calls = 0;
    std::size_t batch_size = std::max<std::size_t>(1, opts.batch_size);
    for (std::size_t start = 0; start < miss_texts.size(); start += batch_size) {
        std::size_t count = std::min(batch_size, miss_texts.size() - start);
        std::vector<std::string> batch(miss_texts.begin() + std::ptrdiff_t(start),
                                       miss_texts.begin() + std::ptrdiff_t(start + count));
        std::vector<Vec> result;
        std::string last_error;
        bool ok = false;
        for (std::size_t attempt = 0; attempt < std::max<std::size_t>(1, opts.max_attempts); ++attempt) {
            if (attempt > 0)
                std::this_thread::sleep_for(std::chrono::milliseconds(opts.backoff_ms << (attempt - 1)));
            try {
                result = provider.embed(batch);
                ++calls;
                ok = true;
                break;
            } catch (const std::exception& e) {
                ++calls;
                last_error = e.what();
            }
        }
        if (!ok)
            throw StageError("provider_failure",
                             "embedding provider failed for batch starting at text " +
                                 std::to_string(start) + " after " + std::to_string(opts.max_attempts) +
                                 " attempts: " + last_error);
        if (result.size() != batch.size())
            throw StageError("provider_failure", "provider returned " + std::to_string(result.size()) +
                                                     " vectors for a batch of " + std::to_string(batch.size()));
        for (std::size_t j = 0; j < result.size(); ++j) {
            if (result[j].size() != cache.dim())
                throw StageError("dimension_mismatch",
                                 "provider returned dim " + std::to_string(result[j].size()) +
                                     ", cache expects " + std::to_string(cache.dim()));
            check_finite(result[j], "provider vector");
            cache.put(miss_keys[start + j], result[j]);
        }
    }

    std::vector<Vec> out;
    out.reserve(texts.size());
    for (std::size_t i = 0; i < texts.size(); ++i) {
        auto v = cache.get(keys[i]);
        if (!v) throw StageError("cache_io", "vector missing after embed for text " + std::to_string(i));
        out.push_back(std::move(*v));
    }
    if (stats) {
        stats->texts = texts.size();
        stats->cache_hits = hits;
        stats->provider_calls = calls;
        stats->embedded = miss_texts.size();
    }
    return out;
}

} // namespace driforge
