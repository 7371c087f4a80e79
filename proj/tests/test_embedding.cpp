#include <catch2/catch.hpp>

#include <random>

#include "driforge/chat.hpp"
#include "driforge/embedding.hpp"
#include "support.hpp"

using namespace driforge;

namespace {

// Counts calls and can be scripted to fail; wraps the deterministic mock.
class CountingProvider : public EmbeddingProvider {
public:
    explicit CountingProvider(std::size_t dim, std::size_t fail_first_n = 0)
        : inner_(dim), fail_remaining_(fail_first_n) {}
    std::string provider_id() const override { return "counting"; }
    std::string model_id() const override { return inner_.model_id(); }
    std::size_t dim() const override { return inner_.dim(); }
    std::vector<Vec> embed(const std::vector<std::string>& texts) override {
        ++calls;
        if (fail_remaining_ > 0) {
            --fail_remaining_;
            throw TransportError("scripted failure");
        }
        return inner_.embed(texts);
    }
    std::size_t calls = 0;

private:
    MockEmbeddingProvider inner_;
    std::size_t fail_remaining_;
};

class WrongDimProvider : public EmbeddingProvider {
public:
    std::string provider_id() const override { return "wrongdim"; }
    std::string model_id() const override { return "wrongdim"; }
    std::size_t dim() const override { return 384; }
    std::vector<Vec> embed(const std::vector<std::string>& texts) override {
        return std::vector<Vec>(texts.size(), Vec(383, 1.0f)); // one short
    }
};

} // namespace

TEST_CASE("cosine basics", "[embedding]") {
    Vec x{0.3f, -1.2f, 2.5f};
    CHECK(cosine(x, x) == Approx(1.0).margin(1e-12));
    CHECK(cosine({1, 0}, {0, 1}) == Approx(0.0).margin(1e-12));
    // 32 / (sqrt(14) * sqrt(77)), hand-checked on an independent calculator
    CHECK(cosine({1, 2, 3}, {4, 5, 6}) == Approx(0.974631846).margin(1e-6));
    CHECK(cosine({1, 1}, {-1, -1}) == Approx(-1.0).margin(1e-12));

    CHECK_THROWS_AS(cosine({1, 2}, {1, 2, 3}), StageError);
    CHECK_THROWS_AS(cosine({0, 0}, {1, 2}), StageError);
}

TEST_CASE("cosine symmetry and scale invariance", "[embedding]") {
    std::mt19937 rng(7);
    std::uniform_real_distribution<float> dist(-1.0f, 1.0f);
    for (int trial = 0; trial < 200; ++trial) {
        Vec u(16), v(16);
        for (auto& a : u) a = dist(rng);
        for (auto& b : v) b = dist(rng);
        if (is_zero_vector(u) || is_zero_vector(v)) continue;
        double c = cosine(u, v);
        CHECK(c == cosine(v, u)); // exact
        CHECK(c >= -1.0);
        CHECK(c <= 1.0);
        // Power-of-two scaling is exact in float32, so the invariant holds to
        // full precision; arbitrary factors round the stored components first.
        Vec u2 = u, u3 = u;
        for (auto& a : u2) a *= 4.0f;
        for (auto& a : u3) a *= 3.7f;
        CHECK(cosine(u2, v) == Approx(c).margin(1e-12));
        CHECK(cosine(u3, v) == Approx(c).margin(1e-6));
    }
}

TEST_CASE("mock embedder is deterministic, non-negative, zero on empty", "[embedding]") {
    MockEmbeddingProvider mock(64);
    auto a = mock.embed({"Spital kosten steigen", "Spital kosten steigen", "!!!"});
    CHECK(a[0] == a[1]);
    for (float v : a[0]) CHECK(v >= 0.0f);
    CHECK(is_zero_vector(a[2])); // no tokens, no direction
    CHECK_FALSE(is_zero_vector(a[0]));
    // case folding happens before hashing
    auto b = mock.embed({"SPITAL KOSTEN STEIGEN"});
    CHECK(b[0] == a[0]);
}

TEST_CASE("embed_batch: cache-first, batching, persistence", "[embedding]") {
    testsupport::TempDir tmp;
    SECTION("all cached means zero provider calls") {
        CountingProvider provider(32);
        EmbeddingCache cache(tmp.file("c.bin"), provider.provider_id(), provider.model_id(), 32);
        std::vector<std::string> texts{"eins", "zwei", "drei"};
        embed_batch(texts, provider, cache);
        CHECK(provider.calls == 1); // one batch for three misses
        EmbedStats stats;
        auto out = embed_batch(texts, provider, cache, {}, &stats);
        CHECK(provider.calls == 1); // untouched
        CHECK(stats.cache_hits == 3);
        CHECK(stats.provider_calls == 0);
        CHECK(out.size() == 3);
    }
    SECTION("batch size 2 over 3 misses makes 2 calls") {
        CountingProvider provider(32);
        EmbeddingCache cache(tmp.file("c2.bin"), provider.provider_id(), provider.model_id(), 32);
        EmbedOptions opts;
        opts.batch_size = 2;
        embed_batch({"a", "b", "c"}, provider, cache, opts);
        CHECK(provider.calls == 2);
    }
    SECTION("duplicate texts collapse to one miss") {
        CountingProvider provider(32);
        EmbeddingCache cache(tmp.file("c3.bin"), provider.provider_id(), provider.model_id(), 32);
        EmbedOptions opts;
        opts.batch_size = 1;
        auto out = embed_batch({"same", "same", "same"}, provider, cache, opts);
        CHECK(provider.calls == 1);
        CHECK(out[0] == out[1]);
        CHECK(out[1] == out[2]);
    }
    SECTION("order matches input order") {
        CountingProvider provider(32);
        EmbeddingCache cache(tmp.file("c4.bin"), provider.provider_id(), provider.model_id(), 32);
        MockEmbeddingProvider direct(32);
        auto out = embed_batch({"x", "y"}, provider, cache);
        CHECK(out[0] == direct.embed({"x"})[0]);
        CHECK(out[1] == direct.embed({"y"})[0]);
    }
}

TEST_CASE("embed_batch retries transient failures then errors out", "[embedding]") {
    testsupport::TempDir tmp;
    SECTION("two failures then success within 3 attempts") {
        CountingProvider provider(16, 2);
        EmbeddingCache cache(tmp.file("r.bin"), provider.provider_id(), provider.model_id(), 16);
        EmbedOptions opts;
        opts.max_attempts = 3;
        opts.backoff_ms = 1;
        auto out = embed_batch({"text"}, provider, cache, opts);
        CHECK(out.size() == 1);
        CHECK(provider.calls == 3);
    }
    SECTION("persistent failure surfaces a stage error naming the batch") {
        CountingProvider provider(16, 100);
        EmbeddingCache cache(tmp.file("r2.bin"), provider.provider_id(), provider.model_id(), 16);
        EmbedOptions opts;
        opts.max_attempts = 3;
        opts.backoff_ms = 1;
        CHECK_THROWS_WITH(embed_batch({"text"}, provider, cache, opts),
                          Catch::Contains("batch starting at text 0"));
        CHECK(provider.calls == 3);
    }
}

TEST_CASE("dimension mismatch is a hard error", "[embedding]") {
    testsupport::TempDir tmp;
    WrongDimProvider provider;
    EmbeddingCache cache(tmp.file("d.bin"), provider.provider_id(), provider.model_id(), 384);
    try {
        embed_batch({"text"}, provider, cache);
        FAIL("expected StageError");
    } catch (const StageError& e) {
        CHECK(e.kind() == "dimension_mismatch");
    }
}

TEST_CASE("cache round-trip: reopen, byte-identical vectors, zero calls", "[embedding]") {
    testsupport::TempDir tmp;
    std::vector<std::string> texts{"erster Absatz", "zweiter Absatz", "dritter Absatz"};
    std::vector<Vec> first;
    {
        CountingProvider provider(48);
        EmbeddingCache cache(tmp.file("cache.bin"), provider.provider_id(), provider.model_id(), 48);
        first = embed_batch(texts, provider, cache);
    }
    {
        CountingProvider provider(48);
        EmbeddingCache cache(tmp.file("cache.bin"), provider.provider_id(), provider.model_id(), 48);
        EmbedStats stats;
        auto second = embed_batch(texts, provider, cache, {}, &stats);
        CHECK(provider.calls == 0);
        CHECK(stats.cache_hits == 3);
        REQUIRE(second.size() == first.size());
        for (std::size_t i = 0; i < first.size(); ++i) CHECK(second[i] == first[i]); // float32 bit-equal
    }
}

TEST_CASE("cache refuses a different provider, model or dim", "[embedding]") {
    testsupport::TempDir tmp;
    {
        EmbeddingCache cache(tmp.file("m.bin"), "mock", "model-a", 16);
        cache.put(EmbeddingCache::key_for("t"), Vec(16, 1.0f));
    }
    CHECK_THROWS_AS(EmbeddingCache(tmp.file("m.bin"), "mock", "model-b", 16), StageError);
    CHECK_THROWS_AS(EmbeddingCache(tmp.file("m.bin"), "other", "model-a", 16), StageError);
    CHECK_THROWS_AS(EmbeddingCache(tmp.file("m.bin"), "mock", "model-a", 32), StageError);
    EmbeddingCache ok(tmp.file("m.bin"), "mock", "model-a", 16);
    CHECK(ok.size() == 1);
}

TEST_CASE("cache JSONL export/import round-trip", "[embedding]") {
    testsupport::TempDir tmp;
    MockEmbeddingProvider provider(24);
    EmbeddingCache cache(tmp.file("a.bin"), provider.provider_id(), provider.model_id(), 24);
    embed_batch({"alpha beta", "gamma delta"}, provider, cache);
    cache.export_jsonl(tmp.file("dump.jsonl"));

    EmbeddingCache other(tmp.file("b.bin"), provider.provider_id(), provider.model_id(), 24);
    other.import_jsonl(tmp.file("dump.jsonl"));
    CHECK(other.size() == cache.size());
    auto key = EmbeddingCache::key_for("alpha beta");
    REQUIRE(other.get(key).has_value());
    CHECK(*other.get(key) == *cache.get(key));
}

TEST_CASE("cache rejects wrong-dimension puts", "[embedding]") {
    testsupport::TempDir tmp;
    EmbeddingCache cache(tmp.file("p.bin"), "mock", "m", 8);
    CHECK_THROWS_AS(cache.put("00", Vec(7, 1.0f)), StageError);
}
